"""Central finite-difference checks for every differentiable op and loss.

The error reported for one check is

    max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, 1e-12)

taken over every element of every input, i.e. the worst deviation relative to
the gradient's own scale. Non-scalar op outputs are reduced to a scalar with a
fixed random projection so the whole Jacobian is exercised.
"""
from dataclasses import dataclass

import numpy as np

from .data import culture_masked_loss
from .diffcore import tensor as T
from .diffcore.tensor import Tensor
from .metrics import ccc_loss, cross_entropy
from .weighting import DwaState, UncertaintyState, druw_loss, rruw_loss

STEP = 1e-5
TOLERANCE = 1e-4


def numeric_gradient(fn, arrays, h=STEP):
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_gradient(build, arrays):
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(tensors).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def relative_error(analytic, numeric):
    worst = max(float(np.max(np.abs(a - n))) if a.size else 0.0 for a, n in zip(analytic, numeric))
    scale = max(max(float(np.max(np.abs(a))), float(np.max(np.abs(n)))) if a.size else 0.0
                for a, n in zip(analytic, numeric))
    return worst / max(scale, 1e-12)


def check(build, arrays, h=STEP):
    """Relative error between backprop and central differences for ``build``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    return relative_error(analytic_gradient(build, arrays), numeric_gradient(value, arrays, h))


def _projected(op, out_shape, rng):
    weights = rng.normal(size=out_shape)
    return lambda ts: T.sum_(op(ts) * weights)


def _away_from_zero(rng, shape, margin=0.1):
    return rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _case_ops():
    """Each builder takes an rng and returns (scalar_fn, input arrays)."""
    cases = {}

    def elementwise(name, op, sampler):
        def build(rng):
            xs = sampler(rng)
            out_shape = np.broadcast_shapes(*[x.shape for x in xs])
            return _projected(op, out_shape, rng), xs
        cases[name] = build

    normal = lambda shape: (lambda rng: [rng.normal(size=shape)])
    elementwise("add", lambda t: t[0] + t[1], lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))])
    elementwise("sub", lambda t: t[0] - t[1], lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))])
    elementwise("multiply", lambda t: t[0] * t[1], lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))])
    elementwise("divide", lambda t: t[0] / t[1], lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(3, 4))])
    elementwise("exp", lambda t: T.exp(t[0]), normal((3, 4)))
    elementwise("log", lambda t: T.log(t[0]), lambda r: [r.uniform(0.5, 2.0, size=(3, 4))])
    elementwise("sqrt", lambda t: T.sqrt(t[0]), lambda r: [r.uniform(0.5, 2.0, size=(3, 4))])
    elementwise("power", lambda t: T.power(t[0], 3), normal((3, 4)))
    elementwise("abs", lambda t: T.abs_(t[0]), lambda r: [_away_from_zero(r, (3, 4))])
    elementwise("relu", lambda t: T.relu(t[0]), lambda r: [_away_from_zero(r, (3, 4))])
    elementwise("maximum", lambda t: T.maximum(t[0], 0.05), lambda r: [_away_from_zero(r, (3, 4)) + 0.05])

    def shaped(name, op, sampler, out_shape_fn):
        def build(rng):
            xs = sampler(rng)
            return _projected(op, out_shape_fn(xs), rng), xs
        cases[name] = build

    shaped("matmul", lambda t: T.matmul(t[0], t[1]), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 5))],
           lambda xs: (3, 5))
    shaped("matmul_folded", lambda t: T.matmul(t[0], t[1]), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))],
           lambda xs: (2, 3, 5))
    shaped("matmul_batched", lambda t: T.matmul(t[0], t[1]),
           lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))], lambda xs: (2, 3, 2))
    shaped("concat", lambda t: T.concat([t[0], t[1]], axis=1), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 2))],
           lambda xs: (3, 6))
    shaped("sum", lambda t: T.sum_(t[0], axis=0), normal((3, 4)), lambda xs: (4,))
    shaped("mean", lambda t: T.mean(t[0], axis=1), normal((3, 4)), lambda xs: (3,))
    shaped("variance", lambda t: T.variance(t[0], axis=0), normal((5, 4)), lambda xs: (4,))
    shaped("softmax", lambda t: T.softmax(t[0], axis=1), normal((3, 5)), lambda xs: (3, 5))
    shaped("softmax_axis0", lambda t: T.softmax(t[0], axis=0), normal((3, 5)), lambda xs: (3, 5))
    shaped("log_softmax", lambda t: T.log_softmax(t[0], axis=-1), normal((3, 5)), lambda xs: (3, 5))
    shaped("layer_norm", lambda t: T.layer_norm(t[0], t[1], t[2]),
           lambda r: [r.normal(size=(2, 3, 6)), r.normal(size=(6,)), r.normal(size=(6,))], lambda xs: (2, 3, 6))
    shaped("attention", lambda t: T.scaled_dot_product_attention(t[0], t[1], t[2], heads=2),
           lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 5, 4)), r.normal(size=(2, 5, 4))],
           lambda xs: (2, 3, 4))
    shaped("conv1d", lambda t: T.conv1d(t[0], t[1], t[2], stride=2, padding=1),
           lambda r: [r.normal(size=(2, 9, 2)), r.normal(size=(4 * 2, 3)), r.normal(size=(3,))],
           lambda xs: (2, (9 + 2 - 4) // 2 + 1, 3))
    shaped("getitem", lambda t: T.getitem(t[0], (np.array([[0], [2], [2]]), np.array([[1, 3], [0, 1], [1, 3]]))),
           normal((3, 4)), lambda xs: (3, 2))
    shaped("reshape_transpose", lambda t: T.transpose(T.reshape(t[0], (4, 3)), (1, 0)), normal((3, 4)),
           lambda xs: (3, 4))
    return cases


def _case_losses():
    cases = {}

    def ccc_case(rng):
        target = rng.uniform(0, 1, size=(8, 10))
        return (lambda t: ccc_loss(t[0], target)), [rng.uniform(0, 1, size=(8, 10))]

    def ce_case(rng):
        labels = rng.integers(0, 8, size=6)
        return (lambda t: cross_entropy(t[0], labels)), [rng.normal(size=(6, 8))]

    def culture_case(rng):
        # three cultures, two samples each, four-wide blocks; small enough for 100 trials
        culture = rng.permutation(np.repeat(np.arange(3), 2))
        targets = rng.uniform(0, 1, size=(6, 4))
        return (lambda t: culture_masked_loss(t[0], targets, culture, n_cultures=3)), [rng.uniform(0, 1, size=(6, 12))]

    def log_alpha(rng):
        # keep clear of the kinks at s_k = 0 and sum|s| = phi
        while True:
            s = _away_from_zero(rng, 4, margin=0.05) * 0.35
            if abs(np.abs(s).sum() - 1.0) > 0.01:
                return s

    def rruw_case(rng):
        def fn(t):
            u = UncertaintyState(4, 1.0, t[1])
            return rruw_loss([T.getitem(t[0], i) for i in range(4)], u)
        return fn, [rng.uniform(0.2, 2.0, size=4), log_alpha(rng)]

    def druw_case(rng):
        d = DwaState(4, 2.0)
        d.push(rng.uniform(0.5, 2.0, size=4))
        d.push(rng.uniform(0.5, 2.0, size=4))

        def fn(t):
            u = UncertaintyState(4, 1.0, t[1])
            return druw_loss([T.getitem(t[0], i) for i in range(4)], u, d)
        return fn, [rng.uniform(0.2, 2.0, size=4), log_alpha(rng)]

    cases["ccc_loss"] = ccc_case
    cases["cross_entropy"] = ce_case
    cases["culture_masked_loss"] = culture_case
    cases["rruw_loss"] = rruw_case
    cases["druw_loss"] = druw_case
    return cases


OP_CASES = _case_ops()
LOSS_CASES = _case_losses()
ALL_CASES = {**OP_CASES, **LOSS_CASES}


@dataclass
class CheckRow:
    name: str
    trials: int
    max_error: float

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def run_gradcheck(trials=100, seed=0, names=None):
    rows = []
    for name, build in ALL_CASES.items():
        if names and name not in names:
            continue
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = 0.0
        for _ in range(trials):
            fn, arrays = build(rng)
            worst = max(worst, check(fn, arrays))
        rows.append(CheckRow(name, trials, worst))
    return rows
