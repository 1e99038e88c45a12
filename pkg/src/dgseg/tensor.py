"""Dense tensors with reverse-mode automatic differentiation.

The engine is define-by-run: while recording is enabled, every primitive
stores its parent tensors, a backward rule, and a forward closure for
replay. Backward rules are themselves written with these primitives, so a
backward pass executed with ``create_graph=True`` is recorded too and can
be differentiated again. That nesting is what lets an outer objective see
through one SGD update.

Only float32/float64 are supported. Mixing the two dtypes in one
expression is an error rather than a silent upcast.
"""

from __future__ import annotations

import threading
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "DifferentiableGraph",
    "GradientMap",
    "NumericError",
    "MissingParameterError",
    "no_grad",
    "grad_enabled",
    "backward",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_scalar",
    "exp",
    "log",
    "sqrt",
    "astype",
    "relu",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "broadcast_to",
    "matmul",
    "im2col",
    "col2im",
    "concat",
    "slice_axis",
    "assert_finite",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NumericError(ArithmeticError):
    """A documented operation produced a NaN or Inf."""


class MissingParameterError(KeyError):
    """A gradient was requested for a parameter the recorded graph never used."""


class _GradState(threading.local):
    enabled = True


_state = _GradState()


def grad_enabled() -> bool:
    return _state.enabled


class _set_grad:
    def __init__(self, enabled: bool):
        self._target = enabled

    def __enter__(self):
        self._prev = _state.enabled
        _state.enabled = self._target

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class no_grad(_set_grad):
    """Context manager that disables graph recording."""

    def __init__(self):
        super().__init__(False)


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A dense numpy array plus an optional position in a recorded op graph.

    Tensors are value-like: operations never mutate inputs. Leaf tensors
    created with ``requires_grad=True`` act as parameters; everything an
    op produces while recording is enabled remembers how to push
    gradients back to its parents.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_forward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._forward: Callable | None = None
        self._op: str | None = None

    # --- introspection ---

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        op = f", op={self._op!r}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{op})"

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


# Gradient map: parameter identifier -> gradient tensor of identical shape.
GradientMap = dict


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a scalar/array operand to the other operand's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


def _record(out_data, parents: tuple, bw, fw, name: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = bw
        out._forward = fw
        out._op = name
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# --- elementwise primitives ---


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def fw(da, db):
        return da + db

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(fw(a.data, b.data), (a, b), bw, fw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def fw(da, db):
        return da - db

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(neg(g), b.shape) if b.requires_grad else None,
        )

    return _record(fw(a.data, b.data), (a, b), bw, fw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def fw(da, db):
        return da * db

    def bw(g):
        return (
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _record(fw(a.data, b.data), (a, b), bw, fw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def fw(da, db):
        return da / db

    def bw(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _record(fw(a.data, b.data), (a, b), bw, fw, "div")


def neg(a) -> Tensor:
    if not isinstance(a, Tensor):
        a = Tensor(a)

    def fw(da):
        return -da

    def bw(g):
        return (neg(g),)

    return _record(fw(a.data), (a,), bw, fw, "neg")


def pow_scalar(a: Tensor, p) -> Tensor:
    p = float(p)

    def fw(da):
        return da ** p

    def bw(g):
        return (mul(g, mul(pow_scalar(a, p - 1.0), p)),)

    return _record(fw(a.data), (a,), bw, fw, "pow")


def exp(a: Tensor) -> Tensor:
    def fw(da):
        return np.exp(da)

    out = _record(fw(a.data), (a,), None, fw, "exp")
    if out.requires_grad:
        out._backward = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    def fw(da):
        return np.log(da)

    def bw(g):
        return (div(g, a),)

    return _record(fw(a.data), (a,), bw, fw, "log")


def sqrt(a: Tensor) -> Tensor:
    def fw(da):
        return np.sqrt(da)

    out = _record(fw(a.data), (a,), None, fw, "sqrt")
    if out.requires_grad:
        out._backward = lambda g: (div(mul(g, 0.5), out),)
    return out


def astype(a: Tensor, dtype) -> Tensor:
    """Cast to another float dtype; gradients cast back to the input dtype."""
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise TypeError(f"astype supports float32/float64, got {dt}")
    if a.data.dtype == dt:
        return a

    def fw(da):
        return da.astype(dt)

    out = _record(fw(a.data), (a,), None, fw, "astype")
    if out.requires_grad:
        src_dtype = a.data.dtype
        out._backward = lambda g: (astype(g, src_dtype),)
    return out


def relu(a) -> Tensor:
    """Elementwise max(0, x). The subgradient at exactly 0 is 0."""
    if not isinstance(a, Tensor):
        a = Tensor(a)

    def fw(da):
        return np.maximum(da, 0)

    def bw(g):
        mask = constant((a.data > 0).astype(a.data.dtype))
        return (mul(g, mask),)

    return _record(fw(a.data), (a,), bw, fw, "relu")


# --- reductions and shape ops ---


def _norm_axis(axis, ndim) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)

    def fw(da):
        return da.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if not keepdims:
            kept = (
                (1,) * a.ndim
                if axis is None
                else tuple(1 if i in axis else s for i, s in enumerate(a.shape))
            )
            gg = reshape(g, kept)
        return (broadcast_to(gg, a.shape),)

    return _record(fw(a.data), (a,), bw, fw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    n = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def fw(da):
        return da.reshape(shape)

    def bw(g):
        return (reshape(g, a.shape),)

    return _record(fw(a.data), (a,), bw, fw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def fw(da):
        return da.transpose(axes)

    def bw(g):
        return (transpose(g, inv),)

    return _record(fw(a.data), (a,), bw, fw, "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def fw(da):
        return np.broadcast_to(da, shape)

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _record(fw(a.data), (a,), bw, fw, "broadcast")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    a, b = _pair(a, b)

    def fw(da, db):
        return da @ db

    def bw(g):
        ga = matmul(g, transpose(b, (1, 0))) if a.requires_grad else None
        gb = matmul(transpose(a, (1, 0)), g) if b.requires_grad else None
        return ga, gb

    return _record(fw(a.data, b.data), (a, b), bw, fw, "matmul")


# --- convolution support ---


def _im2col_data(x: np.ndarray, ksize: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - ksize + 1, wp - ksize + 1
    xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    win = sliding_window_view(xp, (ksize, ksize), axis=(2, 3))  # (n,c,ho,wo,k,k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * ksize * ksize).copy()


def _col2im_data(cols: np.ndarray, x_shape, ksize: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - ksize + 1, wp - ksize + 1
    g = cols.reshape(n, ho, wo, c, ksize, ksize).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # fixed loop order keeps scatter accumulation deterministic
    for dy in range(ksize):
        for dx in range(ksize):
            out[:, :, dy : dy + ho, dx : dx + wo] += g[:, :, dy, dx]
    return out[:, :, padding : padding + h, padding : padding + w].copy()


def im2col(a: Tensor, ksize: int, padding: int) -> Tensor:
    """Unfold (N,C,H,W) into rows of k*k patches, one row per output pixel."""
    if a.ndim != 4:
        raise ValueError("im2col expects a rank-4 tensor")
    x_shape = a.shape

    def fw(da):
        return _im2col_data(da, ksize, padding)

    def bw(g):
        return (col2im(g, x_shape, ksize, padding),)

    return _record(fw(a.data), (a,), bw, fw, "im2col")


def col2im(a: Tensor, x_shape, ksize: int, padding: int) -> Tensor:
    """Scatter-add patch rows back to an (N,C,H,W) tensor; transpose of im2col."""
    x_shape = tuple(x_shape)

    def fw(da):
        return _col2im_data(da, x_shape, ksize, padding)

    def bw(g):
        return (im2col(g, ksize, padding),)

    return _record(fw(a.data), (a,), bw, fw, "col2im")


# --- concatenation / slicing ---


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat of zero tensors")
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]

    def fw(*datas):
        return np.concatenate(datas, axis=axis)

    def bw(g):
        grads, off = [], 0
        for p, n in zip(parts, sizes):
            grads.append(slice_axis(g, axis, off, off + n) if p.requires_grad else None)
            off += n
        return tuple(grads)

    return _record(fw(*(p.data for p in parts)), parts, bw, fw, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.ndim))
    a_shape = a.shape

    def fw(da):
        return da[idx].copy()

    def bw(g):
        return (_embed(g, a_shape, axis, start),)

    return _record(fw(a.data), (a,), bw, fw, "slice")


def _embed(a: Tensor, target_shape, axis: int, start: int) -> Tensor:
    idx = tuple(
        slice(start, start + a.shape[i]) if i == axis else slice(None)
        for i in range(len(target_shape))
    )
    n = a.shape[axis]

    def fw(da):
        out = np.zeros(target_shape, dtype=da.dtype)
        out[idx] = da
        return out

    def bw(g):
        return (slice_axis(g, axis, start, start + n),)

    return _record(fw(a.data), (a,), bw, fw, "embed")


# --- graphs and backward ---


class DifferentiableGraph:
    """Handle to a recorded computation ending in a scalar loss."""

    def __init__(self, root: Tensor):
        if root.data.size != 1:
            raise ValueError("graph root must be a scalar")
        self.root = root

    def replay(self) -> np.ndarray:
        """Re-execute the recorded ops on the recorded leaf data."""
        order = _toposort(self.root, recorded_only=True)
        vals: dict[int, np.ndarray] = {}
        for node in order:
            if node._forward is None:
                vals[id(node)] = node.data
            else:
                vals[id(node)] = node._forward(*(vals[id(p)] for p in node._parents))
        return vals[id(self.root)]


def _toposort(root: Tensor, recorded_only: bool = False) -> list[Tensor]:
    """Parents-before-children order over the graph hanging off ``root``.

    With ``recorded_only`` the walk follows every recorded parent edge;
    otherwise it is pruned to tensors that require grad.
    """
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) in visited:
                continue
            if recorded_only or p.requires_grad:
                stack.append((p, False))
    return topo


def backward(
    loss: "Tensor | DifferentiableGraph",
    wrt: Mapping[str, Tensor],
    create_graph: bool = False,
) -> GradientMap:
    """Reverse-mode gradients of a scalar loss for the named parameters.

    With ``create_graph`` the gradient computation is itself recorded, so
    the returned tensors can appear in a further differentiated
    expression (second-order gradients).
    """
    root = loss.root if isinstance(loss, DifferentiableGraph) else loss
    if root.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    topo = _toposort(root)
    on_tape = {id(n) for n in topo}
    grads: dict[int, Tensor] = {
        id(root): Tensor(np.ones_like(root.data), requires_grad=False)
    }
    with _set_grad(create_graph):
        for node in reversed(topo):
            if node._backward is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    result: GradientMap = {}
    for name, p in wrt.items():
        if id(p) not in on_tape or id(p) not in grads:
            raise MissingParameterError(name)
        result[name] = grads[id(p)]
    return result
