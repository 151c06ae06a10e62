"""Dense tensors with reverse-mode automatic differentiation.

Storage is a contiguous numpy array (float32 by default, float64 for
verification). A ``Graph`` is a tape: while one is active, every op appends a
record (inputs, output, backward closure); ``backward`` replays the records in
reverse and accumulates gradients into ``requires_grad`` leaves. With no
active graph, ops are plain numpy forward passes, which is the fast path for
evaluation and decoding.

All ops accept leading batch axes: the documented 2-D/1-D signatures are the
B=1 case of the same kernels.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import EmptyInputError, GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_STATE = threading.local()


def _active_graph():
    return getattr(_STATE, "graph", None)


class Graph:
    """Append-only tape of op records; one backward pass, then freed."""

    def __init__(self):
        self.nodes = []  # (out Tensor, input Tensors, backward closure)
        self.consumed = False

    def __enter__(self):
        if _active_graph() is not None:
            raise GraphError("a graph is already active on this thread")
        _STATE.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.graph = None
        return False


class Tensor:
    """A dense array plus autodiff metadata."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray promotes 0-d to 1-d, so guard scalars
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, like=None, dtype=None):
    """Non-differentiable tensor; dtype taken from `like` when given."""
    if dtype is None:
        dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype))


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return constant(x, like=like)


def _record(out, inputs, backward_fn):
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.dtype} in one op")


# ---------------------------------------------------------------------------
# binary elementwise ops (numpy broadcasting; backward unbroadcasts)

def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _broadcast_shape(a, b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _broadcast_shape(a, b)
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _broadcast_shape(a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    _broadcast_shape(a, b)
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def neg(x):
    out = Tensor(-x.data)

    def backward(g):
        return (-g,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# unary elementwise ops

def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _record(out, (x,), backward)


def sigmoid(x):
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _record(out, (x,), backward)


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def backward(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), backward)


def exp(x):
    y = np.exp(x.data)
    out = Tensor(y)

    def backward(g):
        return (g * y,)

    return _record(out, (x,), backward)


def log(x):
    out = Tensor(np.log(x.data))

    def backward(g):
        return (g / x.data,)

    return _record(out, (x,), backward)


def sqrt(x):
    y = np.sqrt(x.data)
    out = Tensor(y)

    def backward(g):
        return (g * 0.5 / y,)

    return _record(out, (x,), backward)


def square(x):
    out = Tensor(x.data * x.data)

    def backward(g):
        return (g * 2.0 * x.data,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and structure ops

def matmul(a, b):
    """Matrix product; contraction over a's last and b's second-to-last axis.

    2-D is the documented case; leading axes broadcast like numpy @ so the
    batched kernels reuse the same op.
    """
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def transpose_last2(x):
    if x.ndim < 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    out = Tensor(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)))

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _record(out, (x,), backward)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def concat(parts, axis):
    """Concatenate tensors along `axis`; backward slices the gradient back."""
    parts = list(parts)
    if not parts:
        raise EmptyInputError("concat of zero parts")
    _check_same_dtype(*parts)
    nd = parts[0].ndim
    ax = axis if axis >= 0 else axis + nd
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        for i in range(nd):
            if i != ax and p.shape[i] != parts[0].shape[i]:
                raise ShapeError(f"concat extent mismatch on axis {i}: {parts[0].shape} vs {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=ax))
            for i in range(len(parts))
        )

    return _record(out, tuple(parts), backward)


def slice_axis(x, axis, start, stop):
    """Contiguous copy of x[..., start:stop, ...] along `axis`."""
    nd = x.ndim
    ax = axis if axis >= 0 else axis + nd
    idx = tuple(slice(None) if i != ax else slice(start, stop) for i in range(nd))
    out = Tensor(np.ascontiguousarray(x.data[idx]))

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record(out, (x,), backward)


def row_softmax(x):
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (x,), backward)


def logsumexp_last(x):
    """log(sum(exp(x))) over the last axis, max-shifted for stability."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(s)).squeeze(-1))
    soft = e / s

    def backward(g):
        return (soft * np.expand_dims(g, -1),)

    return _record(out, (x,), backward)


def broadcast_add(vec, mat):
    """Add a feature vector to every column of a matrix.

    vec: [..., d], mat: [..., d, n]. The vector gradient is the column-sum of
    the upstream gradient.
    """
    _check_same_dtype(vec, mat)
    if mat.ndim < 2 or vec.ndim < 1 or vec.shape[-1] != mat.shape[-2]:
        raise ShapeError(f"broadcast_add: vec {vec.shape} vs mat {mat.shape}")
    vdata = vec.data[..., None]
    try:
        np.broadcast_shapes(vdata.shape, mat.shape)
    except ValueError:
        raise ShapeError(f"broadcast_add: vec {vec.shape} vs mat {mat.shape}") from None
    out = Tensor(mat.data + vdata)

    def backward(g):
        return _unbroadcast(g.sum(axis=-1), vec.shape), _unbroadcast(g, mat.shape)

    return _record(out, (vec, mat), backward)


def reduce_mean_rows(x):
    """Mean over the rows (second-to-last axis): [..., m, n] -> [..., n]."""
    if x.ndim < 2:
        raise ShapeError(f"reduce_mean_rows needs a matrix, got {x.shape}")
    m = x.shape[-2]
    if m == 0:
        raise EmptyInputError("reduce_mean_rows over zero rows")
    out = Tensor(x.data.mean(axis=-2))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / m, x.shape),)

    return _record(out, (x,), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a if a >= 0 else a + ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise EmptyInputError("reduce_mean over zero elements")
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _record(out, (x,), backward)


def gather_rows(table, ids):
    """Pick rows of a 2-D table: table[V, d], ids int array -> [*ids.shape, d].

    Gradient scatter-adds into the picked rows only.
    """
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), backward)


def take_index_last(x, ids):
    """x[..., C] indexed by ids[...] along the last axis -> x.shape[:-1]."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {ids.shape} does not match {x.shape[:-1]}")
    picked = np.take_along_axis(x.data, ids[..., None], axis=-1).squeeze(-1)
    out = Tensor(picked)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], np.asarray(g)[..., None], axis=-1)
        return (gx,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle

def backward(loss, graph=None):
    """Populate .grad on every requires_grad leaf reachable from `loss`."""
    graph = graph or _active_graph()
    if graph is None:
        raise GraphError("no active graph to differentiate through")
    if graph.consumed:
        raise GraphError("backward already ran on this graph")
    if loss.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {loss.shape}")
    produced = {id(out): i for i, (out, _, _) in enumerate(graph.nodes)}
    if id(loss) not in produced:
        raise GraphError("loss was not produced by this graph")

    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for out, inputs, backward_fn in reversed(graph.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gin in zip(inputs, backward_fn(g)):
            if gin is None:
                continue
            if id(inp) in produced:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
            elif inp.requires_grad:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gin
    graph.nodes.clear()
    graph.consumed = True


def grad_check(f, params, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` is a nullary callable returning a scalar Tensor and closing over
    `params`. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|). Use float64 parameters for the
    documented tolerances.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.grad = None
    with Graph() as g:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss in grad_check")
        backward(loss, g)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = float(f().data)
            flat[i] = saved - h
            down = float(f().data)
            flat[i] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("non-finite evaluation in grad_check")
            numeric = (up - down) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
