"""Toy wav2vec2-style encoder: strided conv front end plus a transformer stack.

``encode`` returns every hidden state (embedding output first, then one per
encoder layer) so that heads can attend over intermediate layers.
"""
from dataclasses import dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.nn import LayerNorm, Linear, Module, MultiHeadAttention, Parameter


class MaskingContractError(RuntimeError):
    """Masking was requested outside training mode."""


@dataclass
class BackboneConfig:
    input_len: int = 4000
    conv_channels: int = 32
    conv_kernels: tuple = (10, 8, 4)
    conv_strides: tuple = (8, 4, 4)
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    mask_prob: float = 0.05

    def __post_init__(self):
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        self.conv_strides = tuple(int(s) for s in self.conv_strides)
        if len(self.conv_kernels) != len(self.conv_strides):
            raise ValueError("conv_kernels and conv_strides must have equal length")
        for k, s in zip(self.conv_kernels, self.conv_strides):
            if k < s or (k - s) % 2:
                raise ValueError(f"conv kernel {k} / stride {s}: need kernel >= stride with even difference")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValueError(f"mask_prob must lie in [0, 1), got {self.mask_prob}")

    @property
    def n_frames(self):
        # padding (kernel - stride) / 2 makes each conv map length L to floor(L / stride)
        n = self.input_len
        for s in self.conv_strides:
            n //= s
        return n


@dataclass
class HiddenStack:
    states: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]

    @property
    def top(self):
        return self.states[-1]


def sinusoidal_positions(n_frames, dim):
    pos = np.arange(n_frames)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((n_frames, dim))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return table


def time_feature_mask(features, mask_prob, rng):
    """Zero whole time steps and whole feature channels, each with ``mask_prob``.

    ``features`` is (..., frames, dim); masks are drawn independently per
    leading index. A probability of 1 is clamped just below 1.
    """
    p = min(float(mask_prob), 1.0 - 1e-12)
    if p <= 0.0:
        return features
    shape = features.shape
    lead = shape[:-2]
    keep_t = rng.random(lead + (shape[-2], 1)) >= p
    keep_f = rng.random(lead + (1, shape[-1])) >= p
    return features * (keep_t & keep_f).astype(np.float64)


class EncoderLayer(Module):
    def __init__(self, cfg, rng):
        d = cfg.d_model
        self.norm1 = LayerNorm(d, "backbone")
        self.attn = MultiHeadAttention(d, cfg.n_heads, rng, "backbone")
        self.norm2 = LayerNorm(d, "backbone")
        self.ff_in = Linear(d, d * cfg.ff_mult, rng, "backbone")
        self.ff_out = Linear(d * cfg.ff_mult, d, rng, "backbone")

    def __call__(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff_out(T.relu(self.ff_in(self.norm2(x))))


class Backbone(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.conv_w = []
        self.conv_b = []
        c_in = 1
        for k in cfg.conv_kernels:
            bound = 1.0 / np.sqrt(k * c_in)
            self.conv_w.append(Parameter(rng.uniform(-bound, bound, size=(k * c_in, cfg.conv_channels)), "backbone"))
            self.conv_b.append(Parameter(np.zeros(cfg.conv_channels), "backbone"))
            c_in = cfg.conv_channels
        self.feat_norm = LayerNorm(cfg.conv_channels, "backbone")
        self.proj = Linear(cfg.conv_channels, cfg.d_model, rng, "backbone")
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.positions = sinusoidal_positions(cfg.n_frames, cfg.d_model)
        self.last_masked = False

    def front_end(self, wave):
        x = T.as_tensor(wave)
        x = T.reshape(x, x.shape + (1,))
        for w, b, k, s in zip(self.conv_w, self.conv_b, self.cfg.conv_kernels, self.cfg.conv_strides):
            x = T.relu(T.conv1d(x, w, b, stride=s, padding=(k - s) // 2))
        return x

    def encode(self, wave, rng=None, mask=None):
        """Run the encoder on one signal (L,) or a batch (N, L).

        Masking is on by default in training mode and must stay off in
        evaluation mode; training-mode masking needs ``rng``.
        """
        data = wave.data if isinstance(wave, T.Tensor) else np.asarray(wave, dtype=np.float64)
        single = data.ndim == 1
        if single:
            data = data[None, :]
        if data.ndim != 2 or data.shape[1] != self.cfg.input_len:
            raise ValueError(f"expected signals of length {self.cfg.input_len}, got shape {np.shape(wave)}")
        if mask is None:
            mask = self.training and self.cfg.mask_prob > 0
        if mask and not self.training:
            raise MaskingContractError("time/feature masking requested in evaluation mode")
        feats = self.proj(self.feat_norm(self.front_end(data)))
        if mask:
            if rng is None:
                raise ValueError("training-mode masking needs an rng")
            feats = time_feature_mask(feats, self.cfg.mask_prob, rng)
        self.last_masked = bool(mask)
        x = feats + self.positions
        states = [x]
        for layer in self.layers:
            x = layer(x)
            states.append(x)
        if single:
            states = [s[0] for s in states]
        return HiddenStack(states)

    __call__ = encode
