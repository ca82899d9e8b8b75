"""Dense tensors with a define-by-run reverse-mode tape.

Only the operations the encoder, the distiller and the task losses need are
provided. A :class:`Tape` is created per training step; parameters are
registered with :meth:`Tape.watch` and every operation whose inputs live on
that tape is recorded. Tensors created without a tape are constants.

    with Tape() as tape:
        w = tape.watch(w_value)
        loss = ad.sum(ad.matmul(x, w))
    grads = tape.backward(loss)
    grads[w]
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64
LEAKY_SLOPE = 0.2
LAYER_NORM_EPS = 1e-6


class TapeError(RuntimeError):
    pass


class DimensionError(ValueError):
    pass


class DegenerateNeighborhoodError(ValueError):
    """A segment that must be non-empty has no rows."""


class Tensor:
    """A numpy buffer plus an optional handle into a :class:`Tape`."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100  # ndarray op Tensor defers to Tensor's reflected ops

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(value)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.value = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return len(self.value)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, rows):
        return take(self, rows)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are numbered in recording order, so walking the record backwards
    is a reverse topological traversal. A tape can be differentiated once.
    """

    def __init__(self):
        self._records: list[tuple[int, tuple, object]] = []
        self._leaves: list[Tensor] = []
        self._count = 0
        self._consumed = False
        self.visited: list[int] = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def _new_node(self) -> int:
        if self._consumed:
            raise TapeError("tape already differentiated; record a new one")
        node = self._count
        self._count += 1
        return node

    def watch(self, value, dtype=None) -> Tensor:
        """Register ``value`` as a differentiable leaf on this tape."""
        arr = np.array(value.value if isinstance(value, Tensor) else value,
                       dtype=dtype or DEFAULT_DTYPE, copy=True)
        leaf = Tensor(arr, self, self._new_node())
        self._leaves.append(leaf)
        return leaf

    def record(self, value, parents, vjp) -> Tensor:
        """Append an operation. ``vjp(g)`` returns one gradient per parent."""
        out = Tensor(value, self, self._new_node())
        self._records.append((out.node, tuple(parents), vjp))
        return out

    def backward(self, loss: Tensor) -> dict:
        """Gradients of scalar ``loss`` for every watched leaf."""
        if self._consumed:
            raise TapeError("backward already run on this tape")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        buf = {loss.node: np.ones_like(loss.value)}
        for node, parents, vjp in reversed(self._records):
            g = buf.pop(node, None)
            if g is None:
                continue
            self.visited.append(node)
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or parent.tape is not self:
                    continue
                if parent.node in buf:
                    buf[parent.node] = buf[parent.node] + pg
                else:
                    buf[parent.node] = pg
        return {leaf: buf.get(leaf.node, np.zeros_like(leaf.value)) for leaf in self._leaves}


def backward(loss: Tensor) -> dict:
    if loss.tape is None:
        raise TapeError("loss is not on any tape")
    return loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def _make(value, parents, vjp) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None or tape._consumed:
        return Tensor(value)
    return tape.record(value, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a) -> Tensor:
    """max(x, 0); used for the hinge ``[.]_+``. Subgradient 0 at the origin."""
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    factor = np.where(pos, 1.0, slope)
    return _make(a.value * factor, (a,), lambda g: (g * factor,))


# ------------------------------------------------------------------ reductions

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(a, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``. Gradient at the zero vector is zero."""
    a = as_tensor(a)
    out = np.sqrt((a.value * a.value).sum(axis=axis))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.value * np.expand_dims(scale, axis),)

    return _make(out, (a,), vjp)


def l2_distance(a, b, axis=-1) -> Tensor:
    return l2_norm(sub(a, b), axis=axis)


def pairwise_distance(a, b) -> Tensor:
    """Matrix of L2 distances between rows of ``a`` (n x d) and ``b`` (m x d)."""
    a, b = as_tensor(a), as_tensor(b)
    diff = a.value[:, None, :] - b.value[None, :, :]
    out = np.sqrt((diff * diff).sum(-1))

    def vjp(g):
        scale = np.where(out > 0, g / np.where(out > 0, out, 1.0), 0.0)
        w = scale[:, :, None] * diff
        return w.sum(1), -w.sum(0)

    return _make(out, (a, b), vjp)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _make(a.value @ b.value, (a, b),
                 lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return _make(a.value[..., start:stop], (a,), vjp)


def take(a, rows) -> Tensor:
    """Gather rows; the gradient scatters back (repeated rows accumulate)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, rows, g)
        return (full,)

    return _make(a.value[rows], (a,), vjp)


def detach(a) -> Tensor:
    """Same values, no route back to ``a``."""
    return Tensor(as_tensor(a).value)


# ------------------------------------------------------------------- segments

class SegmentIndex:
    """Maps each row (one neighbor edge) to its segment (the target entity)."""

    def __init__(self, segment_ids, num_segments: int):
        ids = np.asarray(segment_ids, dtype=np.intp)
        if ids.ndim != 1:
            raise DimensionError("segment ids must be one-dimensional")
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise IndexError("segment id outside [0, num_segments)")
        self.ids = ids
        self.num_segments = int(num_segments)
        self.order = np.argsort(ids, kind="stable")
        self.counts = np.bincount(ids, minlength=num_segments)
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.nonempty = np.flatnonzero(self.counts)
        self._starts = starts[self.nonempty]

    def __len__(self):
        return self.ids.size

    @property
    def empty_segments(self) -> np.ndarray:
        return np.flatnonzero(self.counts == 0)

    def require_nonempty(self, segments=None):
        counts = self.counts if segments is None else self.counts[np.asarray(segments)]
        if np.any(counts == 0):
            bad = self.empty_segments if segments is None else np.asarray(segments)[counts == 0]
            raise DegenerateNeighborhoodError(f"empty segments: {bad.tolist()[:10]}")

    def reduce(self, values: np.ndarray, ufunc=np.add, fill=0.0) -> np.ndarray:
        out = np.full((self.num_segments,) + values.shape[1:], fill, dtype=values.dtype)
        if self.nonempty.size:
            out[self.nonempty] = ufunc.reduceat(values[self.order], self._starts, axis=0)
        return out


def segment_sum(values, idx: SegmentIndex) -> Tensor:
    values = as_tensor(values)
    if values.shape[0] != len(idx):
        raise DimensionError(f"{values.shape[0]} rows for a {len(idx)}-row index")
    return _make(idx.reduce(values.value), (values,), lambda g: (g[idx.ids],))


def segment_softmax(scores, idx: SegmentIndex, strict: bool = False) -> Tensor:
    """Softmax within each segment, stabilized by the per-segment maximum."""
    scores = as_tensor(scores)
    if strict:
        idx.require_nonempty()
    if scores.shape[0] != len(idx):
        raise DimensionError(f"{scores.shape[0]} scores for a {len(idx)}-row index")
    peak = idx.reduce(scores.value, np.maximum, fill=0.0)
    e = np.exp(scores.value - peak[idx.ids])
    out = e / idx.reduce(e)[idx.ids]

    def vjp(g):
        inner = idx.reduce(g * out)
        return (out * (g - inner[idx.ids]),)

    return _make(out, (scores,), vjp)


# ------------------------------------------------------------ normalization

def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.value.mean(-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def vjp(g):
        gh = g * gain.value
        gx = inv * (gh - gh.mean(-1, keepdims=True)
                    - xhat * (gh * xhat).mean(-1, keepdims=True))
        return gx, (g * xhat).reshape(-1, d).sum(0), g.reshape(-1, d).sum(0)

    return _make(xhat * gain.value + bias.value, (x, gain, bias), vjp)


def dropout(x, rate: float, seed: int | np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout; the mask is a pure function of ``seed``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep.astype(x.dtype))


__all__ = [
    "Tensor", "Tape", "SegmentIndex", "TapeError", "DimensionError",
    "DegenerateNeighborhoodError", "backward", "as_tensor", "add", "sub", "mul",
    "neg", "exp", "log", "relu", "leaky_relu", "sum", "mean", "l2_norm",
    "l2_distance", "pairwise_distance", "log_softmax", "matmul", "transpose",
    "reshape", "concat", "slice_cols", "take", "detach", "segment_sum",
    "segment_softmax", "layer_norm", "dropout",
]
