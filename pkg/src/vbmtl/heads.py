"""Task heads over a :class:`~vbmtl.backbone.HiddenStack`.

Three interchangeable architectures, all returning ``{task: prediction}`` for
the four tasks in chain order:

* ``VanillaHeads``: independent two-layer networks on the pooled top state.
* ``ChainHeads``: each task also sees the earlier tasks' labels (training) or
  predictions (evaluation).
* ``BranchHeads``: per-task stacks of attention blocks whose queries walk up
  the backbone layers.
"""
from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .diffcore.nn import MLP, LayerNorm, Module, MultiHeadAttention


@dataclass(frozen=True)
class TaskSpec:
    name: str
    out_dim: int
    kind: str  # "classification" or "regression"


TASKS = (
    TaskSpec("type", 8, "classification"),
    TaskSpec("two", 2, "regression"),
    TaskSpec("high", 10, "regression"),
    TaskSpec("culture", 40, "regression"),
)
TASK_NAMES = tuple(t.name for t in TASKS)
ARCHITECTURES = ("vanilla", "chain", "branch")


class MissingTruthError(ValueError):
    pass


def pool(states):
    """Mean over the frame axis (second to last)."""
    states = T.as_tensor(states)
    if states.ndim < 2 or states.shape[-2] == 0:
        raise ValueError(f"pool needs at least one frame, got shape {states.shape}")
    return T.mean(states, axis=-2)


class _Heads(Module):
    def task_parameters(self, task):
        return [p for name, p in self.named_parameters() if name.split(".")[1] == task]


class VanillaHeads(_Heads):
    def __init__(self, d_model, rng, hidden=256, tasks=TASKS):
        self.tasks = tasks
        self.nets = {t.name: MLP(d_model, hidden, t.out_dim, rng) for t in tasks}

    def __call__(self, stack, truth=None):
        feats = pool(stack.top)
        return {t.name: self.nets[t.name](feats) for t in self.tasks}


class ChainHeads(_Heads):
    """Classifier chain in the order type -> two -> high -> culture.

    ``conditioning_source`` records whether the last forward pass fed ground
    truth (``"truth"``) or the chain's own predictions (``"prediction"``).
    """

    def __init__(self, d_model, rng, hidden=256, tasks=TASKS):
        self.tasks = tasks
        self.in_widths = {}
        width = d_model
        self.nets = {}
        for t in tasks:
            self.in_widths[t.name] = width
            self.nets[t.name] = MLP(width, hidden, t.out_dim, rng)
            width += t.out_dim
        self.conditioning_source = None

    def _conditioning(self, task, out):
        if task.kind == "classification":
            return T.softmax(out, axis=-1)
        return out

    def __call__(self, stack, truth=None, mode=None):
        if mode is None:
            mode = "train" if self.training else "eval"
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "train":
            missing = [t.name for t in self.tasks if truth is None or t.name not in truth]
            if missing:
                raise MissingTruthError(f"train-mode chain needs ground truth for {missing}")
        feats = pool(stack.top)
        outputs = {}
        parts = [feats]
        for t in self.tasks:
            x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
            out = self.nets[t.name](x)
            outputs[t.name] = out
            if t is self.tasks[-1]:
                break
            if mode == "train":
                parts.append(T.Tensor(_truth_vector(t, truth[t.name])))
            else:
                parts.append(self._conditioning(t, out))
        self.conditioning_source = "truth" if mode == "train" else "prediction"
        return outputs


def _truth_vector(task, value):
    value = np.asarray(value)
    if task.kind == "classification":
        return np.eye(task.out_dim)[value.astype(np.intp)]
    return value.astype(np.float64)


def stage_indices(n_layers, n_blocks):
    """Backbone state index feeding each attention stage; index 0 seeds keys/values."""
    if n_blocks < 1 or n_blocks > n_layers:
        raise ValueError(f"need 1 <= attention blocks <= {n_layers} backbone layers, got {n_blocks}")
    return [int(i) for i in np.round(np.linspace(0, n_layers, n_blocks + 1))]


class AttentionBlock(Module):
    def __init__(self, d_model, heads, rng):
        self.attn = MultiHeadAttention(d_model, heads, rng, "head")
        self.norm = LayerNorm(d_model, "head")

    def __call__(self, query, key_value):
        return self.norm(query + self.attn(query, key_value))


class BranchHeads(_Heads):
    def __init__(self, d_model, rng, n_layers, hidden=256, n_blocks=None, heads=4, tasks=TASKS):
        self.tasks = tasks
        n_blocks = n_layers if n_blocks is None else n_blocks
        self.stages = stage_indices(n_layers, n_blocks)
        self.n_layers = n_layers
        self.blocks = {t.name: [AttentionBlock(d_model, heads, rng) for _ in range(n_blocks)] for t in tasks}
        self.nets = {t.name: MLP(d_model, hidden, t.out_dim, rng) for t in tasks}
        self.last_block_outputs = {}

    def __call__(self, stack, truth=None):
        if len(stack) != self.n_layers + 1:
            raise ValueError(f"expected {self.n_layers + 1} hidden states, got {len(stack)}")
        outputs = {}
        for t in self.tasks:
            kv = stack[self.stages[0]]
            trail = []
            for block, idx in zip(self.blocks[t.name], self.stages[1:]):
                kv = block(stack[idx], kv)
                trail.append(kv)
            self.last_block_outputs[t.name] = trail
            outputs[t.name] = self.nets[t.name](pool(kv))
        return outputs

    def attention_weights(self, task):
        return [b.attn.last_attn for b in self.blocks[task]]


def build_heads(architecture, d_model, rng, n_layers, hidden=256, n_blocks=None, heads=4):
    if architecture == "vanilla":
        return VanillaHeads(d_model, rng, hidden)
    if architecture == "chain":
        return ChainHeads(d_model, rng, hidden)
    if architecture == "branch":
        return BranchHeads(d_model, rng, n_layers, hidden, n_blocks, heads)
    raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")
