"""Dense tensors with reverse-mode gradients, plus reproducible random streams.

Everything downstream (the denoiser, the training loop, the sampler) is built
on the small op set in this module. Tensors wrap numpy arrays in row-major
order; gradients are accumulated by ``backward`` over the recorded graph.
Random numbers come from counter-based Philox streams so every draw is
reproducible from ``(seed, stream_id, counter)`` alone.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

_MASK64 = (1 << 64) - 1
# Each RNG call owns a disjoint block of 2^40 64-bit Philox outputs.
_COUNTER_BLOCK = 1 << 40

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for sampling/eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass
class RngStream:
    """Counter-based random stream (Philox4x64) splittable by stream_id.

    Identical (seed, stream_id, counter) triples reproduce identical output;
    each call consumes one counter increment and draws from a disjoint
    counter block of the underlying generator.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        bg = np.random.Philox(key=[self.seed & _MASK64, self.stream_id & _MASK64])
        bg.advance(self.counter * _COUNTER_BLOCK)
        return np.random.Generator(bg)

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent stream keyed by the given integers."""
        sid = self.stream_id & _MASK64
        for i in ids:
            sid = _splitmix64(sid ^ _splitmix64((i & _MASK64) ^ 0xA5A5A5A5A5A5A5A5))
        return RngStream(self.seed, sid, 0)

    def standard_normal(self, shape, dtype=np.float32) -> np.ndarray:
        g = self._generator()
        self.counter += 1
        out = g.standard_normal(size=shape, dtype=np.float64)
        return out.astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        g = self._generator()
        self.counter += 1
        return g.integers(low, high, size=size)

    def uniform(self, size=None) -> np.ndarray:
        g = self._generator()
        self.counter += 1
        return g.random(size=size)


class Tensor:
    """A dense row-major array with an optional gradient.

    Tensors produced by ops are treated as immutable; ``grad`` is the only
    field mutated after construction (by ``backward`` / ``zero_grad``).
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a_shape, b_shape):
    """Trailing-dimension broadcasting only; anything else is an error."""
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray):
    # graph outputs are never mutated in place, so aliasing the buffer is safe
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=False)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _make(a.data * s, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), bw)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out_data, (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, np.swapaxes(g, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), bw)


def narrow(a: Tensor, start: int, size: int, axis: int = -1) -> Tensor:
    """Slice `size` entries along `axis` starting at `start`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _make(a.data[idx], (a,), bw)


def expand_dims(a: Tensor, axis: int) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, np.squeeze(g, axis=axis))

    return _make(np.expand_dims(a.data, axis), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # shared weight: fold batch dims instead of stacking matmuls
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accum(b, gb)

    return _make(out_data, (a, b), bw)


def layer_norm_rows(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each trailing-axis row to mean 0, variance 1 (no affine)."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm_rows needs row length >= 2, got {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def bw(g):
        if not x.requires_grad:
            return
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - y * gym))

    return _make(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the trailing axis with max-subtraction."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, y * (g - dot))

    return _make(y, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, accumulate: bool = False):
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    With accumulate=False (the default) existing grads in the graph are
    cleared first; with accumulate=True new gradients add onto them.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ParameterError("loss does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    if not accumulate:
        for node in topo:
            node.grad = None

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                node.grad = None  # free intermediates; leaves have no _backward


def gaussian(shape, rng: RngStream, dtype=np.float32) -> Tensor:
    """I.i.d. standard-normal tensor; advances the stream counter once."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s <= 0 for s in shape):
        raise ParameterError(f"gaussian needs positive extents, got {shape}")
    return Tensor(rng.standard_normal(shape, dtype=dtype))
