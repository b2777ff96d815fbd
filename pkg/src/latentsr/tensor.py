"""Minimal N-dimensional tensor with reverse-mode automatic differentiation.

Values are stored as contiguous row-major float32 numpy arrays. Every
operation records a tape node holding its parents and a backward closure;
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every reachable tensor that ``requires_grad``.

Broadcasting is deliberately restricted: elementwise ops accept equal shapes
or a scalar operand, and the few structured broadcasts a network needs
(sequence positions, per-channel biases, per-sample scales) are explicit
named ops with their own backward rules. This keeps shape bugs loud.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "neg",
    "abs_",
    "silu",
    "gelu",
    "matmul",
    "conv2d",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "sum_",
    "mean",
    "softmax",
    "standardize",
    "upsample_nearest2x",
    "take_rows",
    "add_batch_bias",
    "mul_batch_bias",
    "add_channel_bias",
    "channel_affine",
    "scale_per_sample",
]

_F32 = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class _Node:
    """Tape record: op name, parent tensors, and the backward closure.

    ``backward(grad)`` returns one gradient array (or None) per parent, in
    parent order. The tape is acyclic by construction; nodes are created in
    forward order, which fixes the reverse topological order.
    """

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=_F32)
    return np.ascontiguousarray(arr)


class Tensor:
    """Row-major float32 array with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_F32), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_F32), requires_grad)

    @staticmethod
    def full(shape, value, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=_F32), requires_grad)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> Optional[str]:
        return self._node.op if self._node is not None else None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values, detached from the tape."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- gradient machinery ----------------------------------------------------

    def zero_grad(self) -> None:
        """Explicitly clear the accumulated gradient."""
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor.

        ``self`` must be a scalar. Repeated calls keep accumulating until
        ``zero_grad()`` is invoked on the targets.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")

        order = _toposort(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for t in order:
            g = flowing.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = g.copy()
                else:
                    t.grad = t.grad + g
            node = t._node
            if node is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not _wants_grad(parent):
                    continue
                pg = pg.astype(_F32, copy=False)
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"backward of {node.op}: gradient shape {pg.shape} != "
                        f"parent shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division only supports a scalar divisor")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return abs_(self)


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _toposort(root: Tensor) -> list[Tensor]:
    """Deterministic reverse-topological order (root first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
    order.reverse()
    return order


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(_wants_grad(p) for p in parents):
        out._node = _Node(op, tuple(parents), backward)
    return out


def _scalar_of(t) -> Optional[float]:
    """Return the scalar value if the operand broadcasts as a scalar."""
    if isinstance(t, (int, float, np.floating, np.integer)):
        return float(t)
    if isinstance(t, Tensor) and t.data.size == 1:
        return None  # handled as a scalar *tensor*, keeps its tape edge
    return None


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a broadcast gradient back onto a scalar-shaped operand."""
    if grad.shape == shape:
        return grad
    return np.sum(grad, dtype=_F32).reshape(shape)


def _coerce(t) -> Tensor:
    if isinstance(t, Tensor):
        return t
    return Tensor(np.asarray(t, dtype=_F32))


# -- elementwise ops --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "add")
    data = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _result(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _result(data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "mul")
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _reduce_to(g * b_data, a_data.shape), _reduce_to(g * a_data, b_data.shape)

    return _result(data, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g):
        return (-g,)

    return _result(-a.data, "neg", (a,), backward)


def abs_(a: Tensor) -> Tensor:
    a = _coerce(a)
    sign = np.sign(a.data)

    def backward(g):
        return (g * sign,)

    return _result(np.abs(a.data), "abs", (a,), backward)


def silu(a: Tensor) -> Tensor:
    a = _coerce(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        d = sig * (1.0 + a.data * (1.0 - sig))
        return (g * d,)

    return _result(data, "silu", (a,), backward)


_GELU_C = _F32(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU (smooth, self-contained derivative)."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + _F32(0.044715) * x * x * x)
    th = np.tanh(inner)
    data = _F32(0.5) * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _F32(0.044715) * x * x)
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner
        return (g * d.astype(_F32),)

    return _result(data, "gelu", (a,), backward)


# -- contractions -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product or batched 3-D product with equal batch extents."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched dims {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")
    data = a.data @ b.data

    def backward(g):
        if a.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _result(data, "matmul", (a, b), backward)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, zero padding, exact output extents.

    Output extent (H + 2*pad - kh) / stride + 1 must divide exactly; a
    remainder raises rather than silently truncating.
    """
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape}, {w.shape}")
    n, c, h, wid = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cw}")
    if kh > h + 2 * pad or kw > wid + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{wid + 2 * pad}")
    if (h + 2 * pad - kh) % stride or (wid + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d: non-integral output extent for input {h}x{wid}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = np.zeros((n, o, ho, wo), dtype=_F32)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += np.einsum("nchw,oc->nohw", xs, w.data[:, :, i, j], optimize=True)
    parents = [x, w]
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * (ho - 1) + 1, stride),
                      slice(j, j + stride * (wo - 1) + 1, stride))
                dw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[sl], optimize=True)
                dxp[sl] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
        dx = dxp[:, :, pad:pad + h, pad:pad + wid] if pad else dxp
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=_F32))
        return tuple(grads)

    return _result(out, "conv2d", parents, backward)


# -- shape algebra -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    data = np.ascontiguousarray(a.data).reshape(shape)
    src_shape = a.data.shape

    def backward(g):
        return (g.reshape(src_shape),)

    return _result(data, "reshape", (a,), backward)


def permute(a: Tensor, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for rank {a.ndim}")
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(data, "permute", (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    axis = axis % ts[0].ndim
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(data, "concat", ts, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _coerce(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) exceeds axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(a.data[sl])

    def backward(g):
        dx = np.zeros_like(a.data)
        dx[sl] = g
        return (dx,)

    return _result(data, "narrow", (a,), backward)


# -- reductions ---------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=_F32)
    data = np.asarray(data, dtype=_F32)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g.reshape(())),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(_F32),)

    return _result(data, "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    data = np.asarray(a.data.mean(axis=axis, keepdims=keepdims, dtype=_F32), dtype=_F32)
    inv = _F32(1.0 / count)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g.reshape(()) * inv),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return ((np.broadcast_to(gg, a.data.shape) * inv).astype(_F32),)

    return _result(data, "mean", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; invariant to additive shifts along axis."""
    a = _coerce(a)
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=ax, keepdims=True, dtype=_F32)

    def backward(g):
        dot = (g * data).sum(axis=ax, keepdims=True, dtype=_F32)
        return ((data * (g - dot)).astype(_F32),)

    return _result(data.astype(_F32), "softmax", (a,), backward)


def standardize(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization along one axis (pre-affine)."""
    a = _coerce(a)
    ax = axis % a.ndim
    mu = a.data.mean(axis=ax, keepdims=True, dtype=_F32)
    var = ((a.data - mu) ** 2).mean(axis=ax, keepdims=True, dtype=_F32)
    istd = (1.0 / np.sqrt(var + _F32(eps))).astype(_F32)
    xhat = ((a.data - mu) * istd).astype(_F32)

    def backward(g):
        gm = g.mean(axis=ax, keepdims=True, dtype=_F32)
        gx = (g * xhat).mean(axis=ax, keepdims=True, dtype=_F32)
        return ((istd * (g - gm - xhat * gx)).astype(_F32),)

    return _result(xhat, "standardize", (a,), backward)


# -- structured broadcasts and resampling ------------------------------------------


def upsample_nearest2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling for NCHW tensors."""
    a = _coerce(a)
    if a.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: need 4-D input, got {a.shape}")
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = a.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=_F32),)

    return _result(data, "upsample_nearest2x", (a,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row gather (embedding lookup); grads scatter-add into the table."""
    table = _coerce(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index out of range for table with {table.shape[0]} rows")
    data = np.ascontiguousarray(table.data[idx])

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return _result(data, "take_rows", (table,), backward)


def add_batch_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[B, ...] + b[...] with b shared across the leading batch axis."""
    x, b = _coerce(x), _coerce(b)
    if b.shape != x.shape[1:]:
        raise ShapeError(f"add_batch_bias: bias shape {b.shape} != per-sample shape {x.shape[1:]}")
    data = x.data + b.data[None]

    def backward(g):
        return g, g.sum(axis=0, dtype=_F32)

    return _result(data, "add_batch_bias", (x, b), backward)


def mul_batch_bias(x: Tensor, s: Tensor) -> Tensor:
    """x[B, ...] * s[...] with s shared across the leading batch axis."""
    x, s = _coerce(x), _coerce(s)
    if s.shape != x.shape[1:]:
        raise ShapeError(f"mul_batch_bias: scale shape {s.shape} != per-sample shape {x.shape[1:]}")
    data = x.data * s.data[None]

    def backward(g):
        return g * s.data[None], (g * x.data).sum(axis=0, dtype=_F32)

    return _result(data, "mul_batch_bias", (x, s), backward)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift of an NCHW tensor: x * gamma[C] + beta[C]."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"channel_affine: x {x.shape} with gamma {gamma.shape}, beta {beta.shape}"
        )
    gview = gamma.data[None, :, None, None]
    data = x.data * gview + beta.data[None, :, None, None]

    def backward(g):
        dx = g * gview
        dgamma = (g * x.data).sum(axis=(0, 2, 3), dtype=_F32)
        dbeta = g.sum(axis=(0, 2, 3), dtype=_F32)
        return dx, dgamma, dbeta

    return _result(data, "channel_affine", (x, gamma, beta), backward)


def add_channel_bias(x: Tensor, v: Tensor) -> Tensor:
    """x[B, C, H, W] + v[B, C] broadcast over the spatial axes."""
    x, v = _coerce(x), _coerce(v)
    if x.ndim != 4 or v.ndim != 2 or v.shape != x.shape[:2]:
        raise ShapeError(f"add_channel_bias: shapes {x.shape} and {v.shape} incompatible")
    data = x.data + v.data[:, :, None, None]

    def backward(g):
        return g, g.sum(axis=(2, 3), dtype=_F32)

    return _result(data, "add_channel_bias", (x, v), backward)


def scale_per_sample(x: Tensor, s: Tensor) -> Tensor:
    """x[B, ...] * s[B], one scalar per leading-axis sample."""
    x, s = _coerce(x), _coerce(s)
    if s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_per_sample: scale shape {s.shape} vs batch {x.shape[0]}")
    expand = (slice(None),) + (None,) * (x.ndim - 1)
    data = x.data * s.data[expand]

    def backward(g):
        dx = g * s.data[expand]
        ds = (g * x.data).reshape(x.shape[0], -1).sum(axis=1, dtype=_F32)
        return dx, ds

    return _result(data, "scale_per_sample", (x, s), backward)
