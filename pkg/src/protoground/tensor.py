"""Dense tensors with tape-based reverse-mode automatic differentiation.

Double precision is the default dtype so that gradient checks have
numerical headroom.  Layout is row-major with explicit shape arithmetic;
elementwise ops require equal shapes and any broadcasting must go through
an explicit ``broadcast_to``.  A fresh :class:`Tape` is opened per forward
pass; ops executed outside a tape run forward-only.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """A dense array plus the bookkeeping needed for reverse mode.

    Tensors are immutable once constructed (by convention: nothing in this
    package writes to ``data`` after an op returns).  ``grad`` is populated
    by :meth:`Tape.backward` for every reachable tensor with
    ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar for readable module code.  All of it
    # routes through the strict ops below.
    def __add__(self, other):
        return add_const(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return add_const(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else hadamard(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if isinstance(other, (int, float)) else div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of the ops of one forward pass.

    Nodes are appended in creation order, which is a topological order by
    construction.  ``backward`` may run once; a second call raises to keep
    silent gradient accumulation bugs out of training loops.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, root: Tensor):
        """Accumulate gradients of the scalar ``root`` into every reachable tensor."""
        if self._used:
            raise RuntimeError("backward() already ran on this tape; build a fresh tape")
        self._used = True
        if root.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if root.grad is None:
            root.grad = np.zeros_like(root.data)
        root.grad += 1.0
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap op output; record on the active tape iff gradients can flow."""
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a child's grad buffer or a view of one
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "hadamard")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def backward(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g)

    return _make(a.data + c, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = np.power(a.data, p)

    def backward(g):
        _accum(a, g * p * np.power(a.data, p - 1.0))

    return _make(out_data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed overflow-free; used to keep scalars positive."""
    out_data = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * sig)

    return _make(out_data, (a,), backward)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data > lo

    def backward(g):
        _accum(a, g * mask)

    return _make(np.maximum(a.data, lo), (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data

    def backward(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _make(np.where(take_a, a.data, b.data), (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "minimum")
    take_a = a.data <= b.data

    def backward(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _make(np.where(take_a, a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the backward sums over every expanded axis."""
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e
    in_shape = a.shape
    lead = len(shape) - len(in_shape)
    summed_axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(in_shape) if n == 1 and shape[lead + i] != 1
    )

    def backward(g):
        red = g.sum(axis=summed_axes, keepdims=False) if summed_axes else g
        _accum(a, red.reshape(in_shape))

    return _make(np.ascontiguousarray(out_data), (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            gg = g.reshape((1,) * a.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            gg = g.reshape((1,) * a.ndim)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape) / n)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; gradients dA = g @ B.T and dB = A.T @ g."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not compatible 2-D operands")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading batch axes."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} are not compatible batched operands")

    def backward(g):
        _accum(a, g @ b.data.transpose(0, 2, 1))
        _accum(b, a.data.transpose(0, 2, 1) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x [..., in] -> [..., out]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    if b is not None:
        out = add(out, broadcast_to(b, out.shape))
    if x.ndim != 2:
        out = reshape(out, lead + (w.shape[1],))
    return out


# ---------------------------------------------------------------------------
# normalization / softmax
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shifted softmax along ``axis``; rows are strictly positive and sum to 1."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} must be ({x.shape[-1]},)")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        lead_axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead_axes))
        _accum(bias, g.sum(axis=lead_axes))
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * term)

    return _make(out_data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# gradient flow control / indexing
# ---------------------------------------------------------------------------

def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that contributes nothing to any ancestor's gradient."""
    return Tensor(x.data.copy())


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]; the backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids outside table of {weight.shape[0]} rows")

    def backward(g):
        if weight.requires_grad:
            full = np.zeros_like(weight.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
            _accum(weight, full)

    return _make(weight.data[ids], (weight,), backward)


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., j] = x[..., idx[..., j]] with idx matching x on leading axes."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, _expand_index(idx, x.shape), g)
        _accum(x, full)

    return _make(np.take_along_axis(x.data, idx, axis=-1), (x,), backward)


def _expand_index(idx: np.ndarray, shape):
    prefix = idx.shape[:-1]
    grids = []
    for axis, n in enumerate(prefix):
        sh = [1] * (len(prefix) + 1)
        sh[axis] = n
        grids.append(np.broadcast_to(np.arange(n).reshape(sh), idx.shape))
    return tuple(grids) + (idx,)


def scatter_along_last(values: Tensor, idx: np.ndarray, size: int) -> Tensor:
    """Place values into a zero tensor of last-axis extent ``size``.

    Indices must be unique per row (they come from top-k selections), so a
    plain put is exact and the backward is a gather.
    """
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros(values.shape[:-1] + (size,), dtype=values.data.dtype)
    np.put_along_axis(out_data, idx, values.data, axis=-1)

    def backward(g):
        _accum(values, np.take_along_axis(g, idx, axis=-1))

    return _make(out_data, (values,), backward)


def gather_bias(a_raw: Tensor, idx: np.ndarray, onehot: Optional[np.ndarray] = None) -> Tensor:
    """Positional-bias gather: out[b,i,j] = a_raw[b,i,idx[...,i,j]].

    ``idx`` is either [n, n] (shared across the batch, the unpadded-grid fast
    path) or [B, n, n].  For the shared case a cached one-hot tensor makes
    the backward a dense einsum instead of a scatter.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n_range = a_raw.shape[-1]
    if idx.min() < 0 or idx.max() >= n_range:
        raise ShapeError(f"gather_bias: index range [{idx.min()}, {idx.max()}] outside table extent {n_range}")
    if idx.ndim == 2:
        rows = np.arange(idx.shape[0])[:, None]
        out_data = a_raw.data[:, rows, idx]
        if onehot is None:
            onehot = (idx[:, :, None] == np.arange(n_range)[None, None, :]).astype(np.float64)

        def backward(g):
            # per query row i: grad_raw[:, i, :] = g[:, i, :] @ onehot[i]
            gi = np.ascontiguousarray(g.transpose(1, 0, 2))
            _accum(a_raw, np.matmul(gi, onehot).transpose(1, 0, 2))

    elif idx.ndim == 3:
        if idx.shape[0] != a_raw.shape[0]:
            raise ShapeError(f"gather_bias: batch {idx.shape[0]} vs {a_raw.shape[0]}")
        out_data = np.take_along_axis(a_raw.data, idx, axis=-1)

        def backward(g):
            full = np.zeros_like(a_raw.data)
            np.add.at(full, _expand_index(idx, a_raw.shape), g)
            _accum(a_raw, full)

    else:
        raise ShapeError(f"gather_bias: index rank {idx.ndim} unsupported")
    return _make(np.ascontiguousarray(out_data), (a_raw,), backward)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                      max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from the leaf ``tensors`` on every call.
    Returns the max over checked coordinates of
    |analytic - central| / max(1, |analytic|).  ``max_coords`` caps the
    number of coordinates probed per tensor (all by default).
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        y = f()
        if y.size != 1:
            raise ShapeError("finite_diff_check: f must be scalar-valued")
        tape.backward(y)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            step = h * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + step
            y_plus = f().item()
            flat[i] = orig - step
            y_minus = f().item()
            flat[i] = orig
            fd = (y_plus - y_minus) / (2.0 * step)
            if not (math.isfinite(fd) and math.isfinite(gflat[i])):
                raise NumericError("finite_diff_check: non-finite value encountered")
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    for t in tensors:
        t.zero_grad()
    return worst


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Xavier/Glorot uniform init over the first two fan axes."""
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[1] if len(shape) > 1 else shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
