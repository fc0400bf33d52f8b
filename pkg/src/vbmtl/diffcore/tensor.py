"""Reverse-mode differentiable n-d arrays.

Every op builds a new :class:`Tensor` whose ``_backward`` maps the output
gradient to one gradient per parent. Operand data is never mutated.
"""
import contextlib

import numpy as np

from .. import _kernels as K

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return variance(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def relu(self):
        return relu(self)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "divide")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a):
    # subgradient 0 at the kink
    a = as_tensor(a)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for a scalar floor; no gradient below it."""
    a = as_tensor(a)
    mask = a.data > floor
    return Tensor._from_op(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._from_op(np.array(out, copy=True), (a,), backward)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat on axis {axis}: shapes {ref} and {t.shape} differ off-axis")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return int(np.prod([shape[ax] for ax in axes]))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._from_op(out, (a,), lambda g: (np.array(_expand_like(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = _count(a.shape, axis)
    if n == 0:
        raise ShapeError(f"mean over empty axis {axis} of shape {a.shape}")
    out = a.data.mean(axis=axis, keepdims=keepdims)
    return Tensor._from_op(out, (a,), lambda g: (_expand_like(g, a.shape, axis, keepdims) / n,))


def variance(a, axis=None, keepdims=False):
    """Population (1/N) variance."""
    a = as_tensor(a)
    n = _count(a.shape, axis)
    if n == 0:
        raise ShapeError(f"variance over empty axis {axis} of shape {a.shape}")
    centred = a.data - a.data.mean(axis=axis, keepdims=True)
    out = (centred ** 2).mean(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand_like(g, a.shape, axis, keepdims) * (2.0 / n) * centred,)

    return Tensor._from_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and fused network ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading dims into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(out, (a, b), backward_folded)
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def _move_last(x, axis):
    return np.moveaxis(x, axis, -1) if axis not in (-1, x.ndim - 1) else x


def softmax(a, axis=-1):
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    moved = _move_last(a.data, axis)
    flat = moved.reshape(-1, moved.shape[-1])
    y = K.softmax_fwd(flat)
    out = np.moveaxis(y.reshape(moved.shape), -1, axis)

    def backward(g):
        gm = _move_last(g, axis).reshape(-1, moved.shape[-1])
        gx = K.softmax_bwd(y, gm).reshape(moved.shape)
        return (np.moveaxis(gx, -1, axis),)

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalise over the last axis, then apply optional affine gain/shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    xhat2, rstd = K.layer_norm_fwd(x.data.reshape(-1, d), eps)
    xhat = xhat2.reshape(x.shape)
    out = xhat
    parents = [x]
    if weight is not None:
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        dxhat = g * weight.data if weight is not None else g
        gx = K.layer_norm_bwd(dxhat.reshape(-1, d), xhat2, rstd).reshape(x.shape)
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return Tensor._from_op(out, tuple(parents), backward)


def scaled_dot_product_attention(q, k, v, heads):
    """Multi-head attention core on already-projected inputs.

    q: (..., Tq, D); k, v: (..., Tk, D); D must split evenly into ``heads``.
    The per-head attention probabilities are attached to the result as
    ``attn_weights`` with shape (..., heads, Tq, Tk).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    dim = q.shape[-1]
    if dim % heads:
        raise ShapeError(f"attention: width {dim} not divisible by {heads} heads")
    dh = dim // heads
    scale = 1.0 / np.sqrt(dh)

    def split(x):
        t = x.shape[-2]
        return np.swapaxes(x.reshape(x.shape[:-1] + (heads, dh)), -2, -3).reshape(x.shape[:-2] + (heads, t, dh))

    def merge(x):
        t = x.shape[-2]
        return np.swapaxes(x, -2, -3).reshape(x.shape[:-3] + (t, heads * dh))

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
    tk = scores.shape[-1]
    probs = K.softmax_fwd(scores.reshape(-1, tk)).reshape(scores.shape)
    out = merge(probs @ vh)

    def backward(g):
        gh = split(g)
        gprobs = gh @ np.swapaxes(vh, -1, -2)
        gv = np.swapaxes(probs, -1, -2) @ gh
        gscores = K.softmax_bwd(probs.reshape(-1, tk), gprobs.reshape(-1, tk)).reshape(scores.shape) * scale
        gq = gscores @ kh
        gk = np.swapaxes(gscores, -1, -2) @ qh
        return merge(gq), merge(gk), merge(gv)

    res = Tensor._from_op(out, (q, k, v), backward)
    res.attn_weights = probs
    return res


def conv1d(x, weight, bias, stride, padding):
    """Strided 1-D convolution over the time axis.

    x: (N, L, Cin) channels-last; weight: (kernel * Cin, Cout); bias: (Cout,).
    Output length is ``(L + 2 * padding - kernel) // stride + 1``.
    """
    x = as_tensor(x)
    n, length, cin = x.shape
    kc, _ = weight.shape
    if kc % cin:
        raise ShapeError(f"conv1d: weight rows {kc} not a multiple of {cin} input channels")
    kernel = kc // cin
    lp = length + 2 * padding
    n_out = (lp - kernel) // stride + 1
    if n_out < 1:
        raise ShapeError(f"conv1d: input length {length} too short for kernel {kernel}")
    xpad = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    cols = np.ascontiguousarray(K.im2col(xpad, kernel, stride, n_out))
    out = (cols.reshape(-1, kc) @ weight.data + bias.data).reshape(n, n_out, -1)

    def backward(g):
        gw = cols.reshape(-1, kc).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g.reshape(-1, g.shape[-1]) @ weight.data.T).reshape(n, n_out, kc)
            gxp = K.col2im(gcols, lp, kernel, stride)
            gx = gxp[:, padding:padding + length, :]
        return gx, gw, gb

    return Tensor._from_op(out, (x, weight, bias), backward)
