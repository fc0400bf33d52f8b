"""Multi-task loss aggregation: uniform, DWA, RRUW and DRUW.

Task losses arrive as scalar tensors in a fixed task order. DWA weights come
from a temperature softmax over the ratio of the last two epoch-mean losses and
are treated as constants. The uncertainty strategies learn one positive scale
per task, stored as ``alpha = exp(log_alpha)`` so positivity needs no
projection.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.nn import Parameter

STRATEGIES = ("uniform", "dwa", "rruw", "druw")

# 1 + log(alpha^2) is floored here before the outer log; see UncertaintyState.
REGULARISER_FLOOR = 1e-6


class WeightingError(ValueError):
    pass


@dataclass
class DwaState:
    n_tasks: int
    temperature: float = 2.0
    history: list = field(default_factory=list)  # newest last, each a length-K array

    def __post_init__(self):
        if self.temperature <= 0:
            raise WeightingError(f"temperature must be positive, got {self.temperature}")

    def push(self, epoch_means):
        means = np.asarray(epoch_means, dtype=np.float64)
        if means.shape != (self.n_tasks,):
            raise WeightingError(f"expected {self.n_tasks} epoch losses, got shape {means.shape}")
        self.history = (self.history + [means])[-2:]

    @property
    def ready(self):
        return len(self.history) >= 2


@dataclass
class UncertaintyState:
    """Trainable per-task scales.

    The regulariser ``log(1 + log alpha^2)`` is only defined for
    ``alpha > exp(-1/2)``; its inner argument is floored at
    ``REGULARISER_FLOOR`` so training cannot step into the undefined region.
    """

    n_tasks: int
    phi: float = 1.0
    log_alpha: Parameter = None

    def __post_init__(self):
        if self.phi <= 0:
            raise WeightingError(f"phi must be positive, got {self.phi}")
        if self.log_alpha is None:
            self.log_alpha = Parameter(np.zeros(self.n_tasks), "weighting", name="weighting.log_alpha")

    @classmethod
    def from_alpha(cls, alpha, phi=1.0):
        alpha = np.asarray(alpha, dtype=np.float64)
        if np.any(alpha <= 0):
            raise WeightingError(f"alpha must be positive, got {alpha}")
        return cls(alpha.size, phi, Parameter(np.log(alpha), "weighting", name="weighting.log_alpha"))

    @property
    def alpha(self):
        return np.exp(self.log_alpha.data)

    def constraint_gap(self):
        """``|sum_k |log alpha_k| - phi|``; zero exactly on the constraint surface."""
        return abs(np.abs(self.log_alpha.data).sum() - self.phi)


def _stack(task_losses):
    if not task_losses:
        raise WeightingError("need at least one task loss")
    return T.concat([T.reshape(T.as_tensor(l), (1,)) for l in task_losses], axis=0)


def _weighted_sum(task_losses, weights):
    return T.sum_(_stack(task_losses) * weights)


def uniform_loss(task_losses):
    return _weighted_sum(task_losses, np.ones(len(task_losses)))


def dwa_weights(state):
    k = state.n_tasks
    if not state.ready:
        return np.ones(k)
    prev, prev2 = state.history[-1], state.history[-2]
    if np.any(prev <= 0) or np.any(prev2 <= 0):
        raise WeightingError("DWA needs strictly positive historical losses")
    z = (prev / prev2) / state.temperature
    z = z - z.max()
    e = np.exp(z)
    return k * e / e.sum()


def dwa_loss(task_losses, state):
    return _weighted_sum(task_losses, dwa_weights(state))


def _uncertainty_loss(task_losses, u, extra=None):
    if len(task_losses) != u.n_tasks:
        raise WeightingError(f"{len(task_losses)} losses for {u.n_tasks} uncertainty weights")
    s = u.log_alpha
    inv_sq = T.exp(s * -2.0)  # 1 / alpha^2
    coef = inv_sq if extra is None else inv_sq + extra
    weighted = T.sum_(_stack(task_losses) * coef)
    inner = T.maximum(1.0 + s * 2.0, REGULARISER_FLOOR)  # 1 + log alpha^2
    regulariser = T.sum_(T.log(inner))
    constraint = T.abs_(u.phi - T.sum_(T.abs_(s)))
    return weighted + regulariser + constraint


def rruw_loss(task_losses, u):
    return _uncertainty_loss(task_losses, u)


def druw_loss(task_losses, u, d, mix=1.0):
    """RRUW with the DWA weights added to each task's inverse-square scale.

    ``mix`` scales the DWA contribution; 1 reproduces the plain combination.
    """
    return _uncertainty_loss(task_losses, u, extra=dwa_weights(d) * mix)


class LossWeighting:
    """Bundles one strategy with its state for use inside a training loop."""

    def __init__(self, strategy, n_tasks, temperature=2.0, phi=1.0, mix=1.0):
        if strategy not in STRATEGIES:
            raise WeightingError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        self.strategy = strategy
        self.n_tasks = n_tasks
        self.mix = mix
        self.dwa = DwaState(n_tasks, temperature) if strategy in ("dwa", "druw") else None
        self.uncertainty = UncertaintyState(n_tasks, phi) if strategy in ("rruw", "druw") else None

    def __call__(self, task_losses):
        if self.strategy == "uniform":
            return uniform_loss(task_losses)
        if self.strategy == "dwa":
            return dwa_loss(task_losses, self.dwa)
        if self.strategy == "rruw":
            return rruw_loss(task_losses, self.uncertainty)
        return druw_loss(task_losses, self.uncertainty, self.dwa, self.mix)

    def parameters(self):
        return [self.uncertainty.log_alpha] if self.uncertainty is not None else []

    def end_epoch(self, epoch_means):
        if self.dwa is not None:
            self.dwa.push(epoch_means)

    def lambdas(self):
        return dwa_weights(self.dwa) if self.dwa is not None else np.ones(self.n_tasks)

    def alphas(self):
        return self.uncertainty.alpha if self.uncertainty is not None else np.ones(self.n_tasks)

    def state_dict(self):
        state = {}
        if self.dwa is not None:
            state["dwa_history"] = np.array(self.dwa.history).reshape(-1, self.n_tasks)
        if self.uncertainty is not None:
            state["log_alpha"] = self.uncertainty.log_alpha.data.copy()
        return state

    def load_state_dict(self, state):
        if self.dwa is not None:
            self.dwa.history = [row.copy() for row in np.asarray(state["dwa_history"], dtype=np.float64)]
        if self.uncertainty is not None:
            self.uncertainty.log_alpha.data = np.asarray(state["log_alpha"], dtype=np.float64).copy()


TRACE_HEADER = ("epoch", "strategy", "task", "lambda", "alpha")


def write_weight_trace(rows, path):
    """Write ``(epoch, strategy, task, lambda, alpha)`` rows as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for epoch, strategy, task, lam, alpha in rows:
            w.writerow([int(epoch), strategy, task, repr(float(lam)), repr(float(alpha))])
