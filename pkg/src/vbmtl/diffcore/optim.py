"""Adam with decoupled weight decay and per-group learning rates."""
import numpy as np


class MissingGradientError(RuntimeError):
    pass


class AdamW:
    """AdamW over a fixed parameter list.

    ``lrs`` maps each parameter group (``backbone``, ``head``, ``weighting``) to
    its learning rate. Moments live in one flat buffer so a step is a handful
    of vector ops. After each :meth:`step` the gradients are cleared.
    """

    def __init__(self, params, lrs, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        names = [p.name or f"param{i}" for i, p in enumerate(self.params)]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.names = names
        self.lrs = dict(lrs)
        for p in self.params:
            if p.group not in self.lrs:
                raise ValueError(f"no learning rate configured for group {p.group!r}")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        sizes = np.array([p.size for p in self.params], dtype=np.int64)
        self._bounds = np.concatenate([[0], np.cumsum(sizes)])
        self._sizes = sizes
        self.m = np.zeros(int(self._bounds[-1]))
        self.v = np.zeros(int(self._bounds[-1]))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _lr_vector(self):
        per_param = np.array([self.lrs[p.group] for p in self.params])
        return np.repeat(per_param, self._sizes)

    def step(self):
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        g = np.concatenate([np.ravel(p.grad) for p in self.params])
        w = np.concatenate([p.data.ravel() for p in self.params])
        lr = self._lr_vector()
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        g *= g
        self.v += (1.0 - b2) * g
        w *= 1.0 - lr * self.weight_decay
        denom = np.sqrt(self.v / (1.0 - b2 ** t))
        denom += self.eps
        lr /= 1.0 - b1 ** t
        w -= lr * self.m / denom
        for i, p in enumerate(self.params):
            p.data = w[self._bounds[i]:self._bounds[i + 1]].reshape(p.shape)
        self.zero_grad()

    def scale_lrs(self, factor):
        for g in self.lrs:
            self.lrs[g] *= factor

    def state_dict(self):
        state = {"step_count": self.step_count, "lrs": dict(self.lrs)}
        for i, name in enumerate(self.names):
            lo, hi = self._bounds[i], self._bounds[i + 1]
            shape = self.params[i].shape
            state[f"m/{name}"] = self.m[lo:hi].reshape(shape).copy()
            state[f"v/{name}"] = self.v[lo:hi].reshape(shape).copy()
        return state

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.lrs = {k: float(val) for k, val in state["lrs"].items()}
        for i, name in enumerate(self.names):
            lo, hi = self._bounds[i], self._bounds[i + 1]
            self.m[lo:hi] = np.ravel(state[f"m/{name}"])
            self.v[lo:hi] = np.ravel(state[f"v/{name}"])
