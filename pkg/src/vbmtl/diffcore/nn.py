"""Parameters, module containers and the small layers the models are built from."""
import numpy as np

from . import tensor as T
from .tensor import Tensor

GROUPS = ("backbone", "head", "weighting")


class Parameter(Tensor):
    """Trainable tensor bound to one learning-rate group for its lifetime."""

    def __init__(self, data, group, name=None):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}; expected one of {GROUPS}")
        super().__init__(data, requires_grad=True, name=name)
        self._group = group

    @property
    def group(self):
        return self._group

    def __repr__(self):
        return f"Parameter(shape={self.shape}, group={self.group!r}, name={self.name!r})"


class Module:
    """Attribute-walking container, in the spirit of torch.nn.Module."""

    training = True

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _children(value):
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _children(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _children(v)


def _walk(value, name):
    if isinstance(value, Parameter):
        if value.name is None:
            value.name = name
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    def __init__(self, n_in, n_out, rng, group):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), group)
        self.bias = Parameter(np.zeros(n_out), group)

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim, group, eps=1e-5):
        self.weight = Parameter(np.ones(dim), group)
        self.bias = Parameter(np.zeros(dim), group)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """One hidden layer with a rectifier, then a linear output layer."""

    def __init__(self, n_in, hidden, n_out, rng, group="head"):
        self.hidden = Linear(n_in, hidden, rng, group)
        self.out = Linear(hidden, n_out, rng, group)

    def __call__(self, x):
        return self.out(T.relu(self.hidden(x)))


class MultiHeadAttention(Module):
    """Projected multi-head attention; ``last_attn`` keeps the latest weights."""

    def __init__(self, dim, heads, rng, group):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, group)
        self.k = Linear(dim, dim, rng, group)
        self.v = Linear(dim, dim, rng, group)
        self.o = Linear(dim, dim, rng, group)
        self.last_attn = None

    def __call__(self, query, key_value):
        ctx = T.scaled_dot_product_attention(self.q(query), self.k(key_value), self.v(key_value), self.heads)
        self.last_attn = ctx.attn_weights
        return self.o(ctx)
