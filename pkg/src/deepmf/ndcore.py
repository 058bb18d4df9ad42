"""Dense float64 tensors and a minimal reverse-mode differentiation engine.

Define-by-run: every primitive executed while a :class:`Tape` is active
appends one node (output, inputs, local vjp closure) to it. ``backward``
walks the tape once in reverse, accumulating adjoints. The primitive set is
exactly what a small two-branch MLP with a cosine head and a soft quantizer
needs; shapes are explicit and there is no general broadcasting.

Tensors are immutable after construction (their buffers are marked
read-only) and safe to share across threads; a tape is single-threaded.
"""

import numpy as np

from . import kernels
from .errors import DimensionError, NonFiniteError

NORM_FLOOR = 1e-12  # lower clamp for norm denominators in gradients


class Tensor:
    """Immutable dense float64 array with explicit, row-major shape."""

    __slots__ = ("data", "is_param")

    def __init__(self, values, is_param=False):
        arr = np.array(values, dtype=np.float64, order="C")
        self._attach(arr, is_param)

    @classmethod
    def _wrap(cls, arr, is_param=False):
        # Internal: take ownership of a freshly allocated array (no copy).
        # ascontiguousarray would promote 0-d to 1-d, so guard by ndim.
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        t = object.__new__(cls)
        t._attach(arr, is_param)
        return t

    def _attach(self, arr, is_param):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or infinite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "is_param", bool(is_param))

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, param={self.is_param})"


def tensor(values):
    return Tensor(values)


def parameter(values):
    """A leaf tensor flagged as trainable."""
    return Tensor(values, is_param=True)


# --- tape ------------------------------------------------------------------

_tape_stack = []


class Tape:
    """Ordered record of the primitives of one forward pass.

    Nodes are appended in execution order, so operands always precede their
    consumers and a single reverse sweep visits each node exactly once.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self._nodes)


def _record(out, inputs, vjp):
    if _tape_stack:
        _tape_stack[-1]._nodes.append((out, inputs, vjp))


class Gradients:
    """Read-only mapping from tensors (by identity) to gradient arrays."""

    def __init__(self, arrays, tensors):
        self._arrays = arrays
        self._tensors = tensors

    def __getitem__(self, t):
        try:
            return self._arrays[id(t)]
        except KeyError:
            raise KeyError("tensor has no recorded gradient") from None

    def get(self, t, default=None):
        return self._arrays.get(id(t), default)

    def __contains__(self, t):
        return id(t) in self._arrays

    def parameters(self):
        """Tensors flagged as parameters that received a gradient."""
        return [t for t in self._tensors.values() if t.is_param]


def backward(tape, loss):
    """Adjoints of ``loss`` w.r.t. every tensor that feeds it on ``tape``.

    ``loss`` must be a scalar produced by an operation recorded on the tape.
    Deterministic: accumulation order is fixed by the tape order.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise DimensionError(
            f"backward requires a scalar loss tensor, got shape "
            f"{getattr(loss, 'shape', None)!r}"
        )
    if not any(out is loss for out, _, _ in tape._nodes):
        raise DimensionError("loss is not an output recorded on this tape")

    arrays = {id(loss): np.ones((), dtype=np.float64)}
    tensors = {id(loss): loss}
    for out, inputs, vjp in reversed(tape._nodes):
        g = arrays.get(id(out))
        if g is None:
            continue
        for t, part in zip(inputs, vjp(g)):
            if part is None:
                continue
            acc = arrays.get(id(t))
            arrays[id(t)] = part if acc is None else acc + part
            tensors[id(t)] = t
    return Gradients(arrays, tensors)


# --- shape guards ----------------------------------------------------------


def _need_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _need_matrix(t, op):
    if t.ndim != 2:
        raise DimensionError(f"{op}: expected a matrix, got shape {t.shape}")


# --- primitives -------------------------------------------------------------


def matmul(a, b):
    """Matrix product of two 2-d tensors."""
    _need_matrix(a, "matmul")
    _need_matrix(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.shape} x {b.shape}"
        )
    out = Tensor._wrap(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    _record(out, (a, b), vjp)
    return out


def add(a, b):
    _need_same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    _record(out, (a, b), lambda g: (g, g))
    return out


def sub(a, b):
    _need_same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a, b):
    _need_same_shape(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    _record(out, (a, b), lambda g: (g * b.data, g * a.data))
    return out


def div(a, b):
    _need_same_shape(a, b, "div")
    out = Tensor._wrap(a.data / b.data)  # non-finite quotients rejected by _wrap

    def vjp(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    _record(out, (a, b), vjp)
    return out


def add_bias(m, v):
    """Add a length-H vector to every row of a (B, H) matrix."""
    _need_matrix(m, "add_bias")
    if v.ndim != 1 or v.shape[0] != m.shape[1]:
        raise DimensionError(
            f"add_bias: bias shape {v.shape} does not match matrix {m.shape}"
        )
    out = Tensor._wrap(m.data + v.data[None, :])
    _record(out, (m, v), lambda g: (g, g.sum(axis=0)))
    return out


def smul(a, c):
    """Multiply by a Python scalar constant."""
    c = float(c)
    out = Tensor._wrap(a.data * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def selu(x):
    """Self-normalizing exponential-linear unit, applied entrywise."""
    out = Tensor._wrap(kernels.selu_forward(x.data))
    _record(out, (x,), lambda g: (kernels.selu_backward(x.data, g),))
    return out


def logistic(x, slope, center):
    """Entrywise sigmoid 1 / (1 + exp(-slope * (x - center)))."""
    slope = float(slope)
    s = kernels.logistic(x.data, slope, float(center))
    out = Tensor._wrap(s)
    _record(out, (x,), lambda g: (g * (slope * s * (1.0 - s)),))
    return out


def square(x):
    out = Tensor._wrap(x.data * x.data)
    _record(out, (x,), lambda g: (g * (2.0 * x.data),))
    return out


def absval(x):
    out = Tensor._wrap(np.abs(x.data))
    _record(out, (x,), lambda g: (g * np.sign(x.data),))
    return out


def total(x):
    """Sum of all entries, as a scalar tensor."""
    out = Tensor._wrap(np.asarray(x.data.sum()))
    _record(out, (x,), lambda g: (np.full(x.shape, float(g)),))
    return out


def mean(x):
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    n = x.size
    out = Tensor._wrap(np.asarray(x.data.sum() / n))
    _record(out, (x,), lambda g: (np.full(x.shape, float(g) / n),))
    return out


def row_sum(m):
    """(B, H) -> (B,) sums along each row."""
    _need_matrix(m, "row_sum")
    out = Tensor._wrap(m.data.sum(axis=1))

    def vjp(g):
        return (np.repeat(g[:, None], m.shape[1], axis=1),)

    _record(out, (m,), vjp)
    return out


def row_l2norm(m):
    """(B, H) -> (B,) Euclidean norm of each row.

    Forward is the exact norm (zero rows give 0); the gradient divides by
    the norm clamped below at NORM_FLOOR.
    """
    _need_matrix(m, "row_l2norm")
    n = np.sqrt((m.data * m.data).sum(axis=1))
    out = Tensor._wrap(n)
    safe = np.maximum(n, NORM_FLOOR)

    def vjp(g):
        return ((g / safe)[:, None] * m.data,)

    _record(out, (m,), vjp)
    return out


def l2_norm(x):
    """Euclidean norm of all entries, as a scalar tensor."""
    if x.size == 0:
        raise DimensionError("l2_norm of an empty tensor")
    n = float(np.sqrt((x.data * x.data).sum()))
    out = Tensor._wrap(np.asarray(n))
    safe = max(n, NORM_FLOOR)

    def vjp(g):
        return (x.data * (float(g) / safe),)

    _record(out, (x,), vjp)
    return out


def clamp_min(x, c):
    """Entrywise max(x, c) with pass-through gradient where x >= c."""
    c = float(c)
    out = Tensor._wrap(np.maximum(x.data, c))
    mask = (x.data >= c).astype(np.float64)
    _record(out, (x,), lambda g: (g * mask,))
    return out
