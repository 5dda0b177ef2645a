"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records its parents and a vector-Jacobian
product, :func:`backward` walks the graph once and overwrites ``grad`` on
every reachable tensor that requires one. Tensors are immutable after
creation (the underlying array is write-protected); graphs are rebuilt per
forward pass, so updating parameters between passes is safe.

All arithmetic is float64. Elementwise ops follow numpy broadcasting, with
gradients summed back over the broadcast axes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch, ZeroNorm

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _asarray(data) -> Array:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A write-protected float64 array plus autodiff bookkeeping.

    ``data`` is the shaped array (C-contiguous, row-major), ``grad`` is
    filled by :func:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

    @classmethod
    def _wrap(cls, arr: Array, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        """Fast path for op outputs; ``arr`` must be a fresh f64 array."""
        out = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr, dtype=np.float64)  # 0-d results come back as scalars
        if not (arr.flags.c_contiguous and arr.dtype == np.float64):
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLoss(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __neg__(self):
        return scale(self, -1.0)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data) -> Tensor:
    """A tensor that never takes gradients."""
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._wrap(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._wrap(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g: Array):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._wrap(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeMismatch(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g: Array):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._wrap(out, (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    f = float(factor)
    out = a.data * f

    def vjp(g: Array):
        return (g * f,)

    return Tensor._wrap(out, (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g: Array):
        return (g * out,)

    return Tensor._wrap(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g: Array):
        return (g / a.data,)

    return Tensor._wrap(out, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g: Array):
        return (g * (0.5 / out),)

    return Tensor._wrap(out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g: Array):
        return (g * (1.0 - out * out),)

    return Tensor._wrap(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    out = 0.5 * x * (1.0 + t)

    def vjp(g: Array):
        d_inner = _GELU_C * (1.0 + (3.0 * _GELU_A) * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * ((1.0 - t * t) * d_inner)
        return (g * d,)

    return Tensor._wrap(out, (a,), vjp)


def absolute(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    out = np.abs(a.data)

    def vjp(g: Array):
        return (g * np.sign(a.data),)

    return Tensor._wrap(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def vjp(g: Array):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._wrap(out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n)

    def vjp(g: Array):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._wrap(out, (a,), vjp)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Mean along one axis."""
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeMismatch(f"mean_axis: axis {axis} out of range for {a.shape}")
    axis = axis % a.ndim
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._wrap(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape / layout
# ---------------------------------------------------------------------------

def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose: rank-2 required, got {a.shape}")
    out = np.ascontiguousarray(a.data.T)

    def vjp(g: Array):
        return (np.ascontiguousarray(g.T),)

    return Tensor._wrap(out, (a,), vjp)


def swap_last2(a: Tensor) -> Tensor:
    """Swap the last two axes (batched transpose)."""
    if a.ndim < 2:
        raise ShapeMismatch(f"swap_last2: rank >= 2 required, got {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))

    def vjp(g: Array):
        return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)

    return Tensor._wrap(out, (a,), vjp)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis."""
    n = a.shape[-1] if a.ndim else 0
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"slice_last: [{start}, {stop}) out of {n}")
    out = np.ascontiguousarray(a.data[..., start:stop])

    def vjp(g: Array):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return Tensor._wrap(out, (a,), vjp)


def concat_last(*tensors: Tensor) -> Tensor:
    """Concatenate along the last axis (any common rank)."""
    ts = list(tensors)
    if not ts:
        raise ShapeMismatch("concat_last: need at least one tensor")
    lead = {t.shape[:-1] for t in ts}
    if len(lead) != 1 or ts[0].ndim < 1:
        raise ShapeMismatch(
            f"concat_last: leading shapes differ: {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=-1)
    offsets = np.cumsum([0] + [t.shape[-1] for t in ts])

    def vjp(g: Array):
        return tuple(np.ascontiguousarray(g[..., offsets[i]:offsets[i + 1]])
                     for i in range(len(ts)))

    return Tensor._wrap(out, tuple(ts), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape} changes element count")
    out = a.data.reshape(shape).copy()

    def vjp(g: Array):
        return (g.reshape(a.shape),)

    return Tensor._wrap(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeMismatch("concat: need at least one tensor")
    if axis not in (0, 1):
        raise ShapeMismatch("concat: axis must be 0 or 1")
    if any(t.ndim != 2 for t in ts):
        raise ShapeMismatch("concat: rank-2 tensors required")
    other = 1 - axis
    widths = {t.shape[other] for t in ts}
    if len(widths) != 1:
        raise ShapeMismatch(f"concat: extents along axis {other} differ: {sorted(widths)}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(ts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return Tensor._wrap(out, tuple(ts), vjp)


def concat_rows(*tensors: Tensor) -> Tensor:
    """Stack rank-2 tensors along rows."""
    return concat(tensors, axis=0)


def concat_cols(*tensors: Tensor) -> Tensor:
    """Stack rank-2 tensors along columns."""
    return concat(tensors, axis=1)


def gather_flat(a: Tensor, indices, shape: Sequence[int]) -> Tensor:
    """Select ``a.flat[indices]`` into a tensor of ``shape``.

    ``indices`` may repeat; the gradient scatter-adds. This one primitive
    covers row/column selection, diagonal extraction and the fixed index
    permutations used by the decoder's upsampling.
    """
    idx = np.asarray(indices, dtype=np.intp).ravel()
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != idx.size:
        raise ShapeMismatch(f"gather_flat: {idx.size} indices for shape {shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeMismatch("gather_flat: index out of range")
    out = a.data.ravel()[idx].reshape(shape)

    def vjp(g: Array):
        flat = np.bincount(idx, weights=g.ravel(), minlength=a.size)
        return (flat.reshape(a.shape),)

    return Tensor._wrap(out, (a,), vjp)


def take_rows(a: Tensor, rows) -> Tensor:
    """Select rows of a rank-2 tensor (repeats allowed)."""
    if a.ndim != 2:
        raise ShapeMismatch(f"take_rows: rank-2 required, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    n_cols = a.shape[1]
    idx = (rows[:, None] * n_cols + np.arange(n_cols)).ravel()
    return gather_flat(a, idx, (rows.size, n_cols))


def take_cols(a: Tensor, col_start: int, col_stop: int) -> Tensor:
    """Contiguous column slice of a rank-2 tensor."""
    if a.ndim != 2:
        raise ShapeMismatch(f"take_cols: rank-2 required, got {a.shape}")
    return slice_last(a, col_start, col_stop)


def diagonal(a: Tensor) -> Tensor:
    """Main diagonal of a square rank-2 tensor, as a length-n vector."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"diagonal: square rank-2 required, got {a.shape}")
    n = a.shape[0]
    return gather_flat(a, np.arange(n) * (n + 1), (n,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also covers the batched forms (B,m,k)@(k,n) and
    (B,m,k)@(B,k,n)."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
        out = a.data @ b.data

        def vjp(g: Array):
            return g @ b.data.T, a.data.T @ g

        return Tensor._wrap(out, (a, b), vjp)

    if a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ShapeMismatch(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
        # collapse the batch into rows: one GEMM instead of a batched loop
        bm, t, k = a.shape
        a2 = a.data.reshape(bm * t, k)
        out = (a2 @ b.data).reshape(bm, t, b.shape[1])

        def vjp(g: Array):
            g2 = g.reshape(bm * t, -1)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return Tensor._wrap(out, (a, b), vjp)

    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeMismatch(f"matmul: batch shapes differ: {a.shape} @ {b.shape}")
        out = np.matmul(a.data, b.data)

        def vjp(g: Array):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return ga, gb

        return Tensor._wrap(out, (a, b), vjp)

    raise ShapeMismatch(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


# ---------------------------------------------------------------------------
# row-wise ops
# ---------------------------------------------------------------------------

def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction for stability."""
    if a.ndim < 1:
        raise ShapeMismatch("softmax_last: rank >= 1 required")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Array):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._wrap(out, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor."""
    if a.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: rank-2 required, got {a.shape}")
    return softmax_last(a)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; all-zero rows are rejected."""
    if a.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows: rank-2 required, got {a.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNorm("l2_normalize_rows: all-zero row")
    out = a.data / norms

    def vjp(g: Array):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dot) / norms,)

    return Tensor._wrap(out, (a,), vjp)


# ---------------------------------------------------------------------------
# dispatch by kind (stable string names for the primitive set)
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "gelu": gelu,
    "abs": absolute,
    "sum": tensor_sum,
    "mean": mean,
    "mean_axis": mean_axis,
    "transpose": transpose,
    "swap_last2": swap_last2,
    "slice_last": slice_last,
    "reshape": reshape,
    "concat_rows": concat_rows,
    "concat_cols": concat_cols,
    "concat_last": concat_last,
    "gather_flat": gather_flat,
    "softmax_rows": softmax_rows,
    "softmax_last": softmax_last,
    "l2_normalize_rows": l2_normalize_rows,
}


def tensor_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name. ``kind`` must be one of ``op_kinds()``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ShapeMismatch(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def op_kinds() -> tuple[str, ...]:
    return tuple(sorted(_OPS))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with ``requires_grad``.

    Gradients are overwritten per call, never accumulated across calls.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward on tensor of shape {loss.shape}")
    if not loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                grads[id(parent)] = acc + pg

    for node in topo:
        node.grad = grads.get(id(node))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient.

    error_i = |g_ad[i] - g_fd[i]| / max(1, |g_ad[i]|, |g_fd[i]|); returns the
    max over coordinates. ``f`` must be deterministic; ``h`` in (0, 1e-3].
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"grad_check: h must be in (0, 1e-3], got {h}")
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise NonScalarLoss(f"grad_check: f returned shape {out.shape}")
    backward(out)
    g_ad = probe.grad
    if g_ad is None:
        g_ad = np.zeros_like(probe.data)

    base = np.array(x.data, dtype=np.float64)
    g_fd = np.zeros_like(base)
    flat = base.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(base)).item()
        flat[i] = orig - h
        lo = f(Tensor(base)).item()
        flat[i] = orig
        g_fd.ravel()[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if base.size else 0.0
