"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors wrap ndarrays and record a backward closure per operation; calling
`backward()` on a scalar loss runs the tape in reverse topological order.
Ops are array-level (matmul, softmax, layer norm, ...) so graphs stay small
and the heavy lifting lands in BLAS. Arrays keep whatever float dtype they
are given: training runs float32, gradient-check tests run float64.

Every primitive's backward rule is validated against central finite
differences in the test suite.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording (evaluation / generation forward passes)."""
    prev = _grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: np.ndarray, owned: bool) -> None:
        # `owned` promises the array is freshly allocated and private to this
        # call; unowned grads (views / pass-throughs shared with sibling
        # nodes) are copied before the in-place += below can alias them.
        if self.grad is None:
            self.grad = grad if owned else grad.copy()
        else:
            self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is detached from the graph (no tracked parents)")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b._accumulate(gb, owned=gb is not g)

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0), owned=True)

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data, owned=True)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data, owned=True)

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data), owned=True)

    return _make(out_data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation, smooth everywhere)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + (3.0 * _GELU_A) * x2)
            a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du), owned=True)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0), owned=True)

    return _make(out_data, (a,), backward)


def clip_min(a: Tensor, floor: float) -> Tensor:
    out_data = np.maximum(a.data, floor)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > floor), owned=True)

    return _make(out_data, (a,), backward)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True), owned=True)

    return _make(out_data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape), owned=False)

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse), owned=False)

    return _make(out_data, (a,), backward)


def take(a: Tensor, key) -> Tensor:
    """Basic slicing/indexing; backward scatters into a zero tensor."""
    out_data = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a._accumulate(full, owned=True)

    return _make(out_data, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather by integer ids; backward scatter-adds into the table."""
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full, owned=True)

    return _make(out_data, (table,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner), owned=True)

    return _make(out_data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        if a.requires_grad:
            p = np.exp(out_data)
            a._accumulate(g - p * g.sum(axis=axis, keepdims=True), owned=True)

    return _make(out_data, (a,), backward)


def normalize(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis (layer-norm core)."""
    mean = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out_data = (a.data - mean) * inv_std

    def backward(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * out_data).mean(axis=-1, keepdims=True)
            a._accumulate(inv_std * (g - gm - out_data * gx), owned=True)

    return _make(out_data, (a,), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis, computed as one 2-d GEMM."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out_data = (x2 @ w.data + b.data).reshape(*lead, w.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[-1])
        if x.requires_grad:
            x._accumulate((g2 @ w.data.T).reshape(x.shape), owned=True)
        if w.requires_grad:
            w._accumulate(x2.T @ g2, owned=True)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0), owned=True)

    return _make(out_data, (x, w, b), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused (x - mean) / std * gain + bias over the last axis."""
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0), owned=True)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0), owned=True)
        if x.requires_grad:
            gx = g * gain.data
            gm = gx.mean(axis=-1, keepdims=True)
            gxx = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (gx - gm - xhat * gxx), owned=True)

    return _make(out_data, (x, gain, bias), backward)


def masked_softmax(a: Tensor, additive_mask: np.ndarray, axis: int = -1) -> Tensor:
    """softmax(a + mask) with the mask treated as a constant."""
    z = a.data + additive_mask
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - inner), owned=True)

    return _make(out_data, (a,), backward)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, D) -> (B, heads, T, D/heads)."""
    b, t, d = x.shape
    out_data = np.ascontiguousarray(
        x.data.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)
    )

    def backward(g):
        if x.requires_grad:
            x._accumulate(
                np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(b, t, d),
                owned=True,
            )

    return _make(out_data, (x,), backward)


def merge_heads(x: Tensor) -> Tensor:
    """(B, heads, T, hd) -> (B, T, heads*hd)."""
    b, h, t, hd = x.shape
    out_data = np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(b, t, h * hd)

    def backward(g):
        if x.requires_grad:
            x._accumulate(
                np.ascontiguousarray(g.reshape(b, t, h, hd).transpose(0, 2, 1, 3)),
                owned=True,
            )

    return _make(out_data, (x,), backward)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    expanded = idx[..., None]
    out_data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, expanded, g[..., None], axis=-1)
            a._accumulate(full, owned=True)

    return _make(out_data, (a,), backward)


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions where mask is 1.

    Fused for speed and stability; the mask weights are constants.
    """
    total = mask.sum()
    if total == 0:
        raise ValueError("masked_cross_entropy: every position is masked out")
    logp = log_softmax(logits, axis=-1)
    picked = gather_last(logp, targets)
    weights = (mask / total).astype(logits.dtype)
    return mul(reduce_sum(mul(picked, Tensor(weights))), -1.0)
