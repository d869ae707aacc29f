"""Reverse-mode automatic differentiation on an explicit tape.

Every differentiable quantity in the pipeline is a :class:`Tensor` holding a
float64 numpy array. Operations on tracked tensors append a node to the
active :class:`Tape`; :func:`backward` replays the tape in reverse and
accumulates gradients into every tracked ancestor.

Two gradient behaviors here are deliberately nonstandard:

* :func:`reparam_sample` routes gradients to the distribution parameters and
  never through the noise input.
* :func:`grl` is the identity forward but multiplies the incoming gradient
  by ``-lambda`` on the way back.

Tapes are confined to one thread; distinct threads get distinct tape stacks.
Untracked tensors are plain immutable value wrappers and are safe to share.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "constant",
    "param",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "relu",
    "softplus",
    "softmax_rows",
    "mean",
    "tsum",
    "l2_norm",
    "row_normalize",
    "concat",
    "elementwise_max",
    "take_rows",
    "take_columns",
    "gather_pairs",
    "pairwise_dist",
    "avg_pool_2x2",
    "segment_mean",
    "segment_logsumexp",
    "clip",
    "reparam_sample",
    "grl",
]


class Tape:
    """Ordered record of primitive operations.

    Record order is a topological order of the computation graph, so the
    backward pass can visit nodes exactly once in reverse. Use as a context
    manager to scope a graph (e.g. one training step) and free it afterwards.
    """

    def __init__(self):
        self.nodes = []

    def clear(self):
        self.nodes.clear()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


class _Node:
    __slots__ = ("output", "pairs", "tape")

    def __init__(self, output, pairs, tape):
        self.output = output
        self.pairs = pairs  # [(input Tensor, vjp callable), ...], tracked only
        self.tape = tape


_LOCAL = threading.local()


def _stack():
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = [Tape()]  # implicit base tape per thread
        _LOCAL.tapes = stack
    return stack


def active_tape():
    """The tape new operations record onto (top of this thread's stack)."""
    return _stack()[-1]


class Tensor:
    """An n-dimensional float64 value with optional gradient tracking.

    ``grad`` is present (a same-shape accumulator) iff the tensor is
    tracked; ``node`` points at the tape entry that produced it, or is
    ``None`` for leaves.
    """

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, tracked=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr) if tracked else None
        self.node = None

    @property
    def tracked(self):
        return self.grad is not None

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        tag = "tracked" if self.tracked else "const"
        return f"Tensor(shape={self.data.shape}, {tag})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def constant(data):
    """An untracked tensor (no gradient ever flows into it)."""
    return Tensor(data, tracked=False)


def param(data):
    """A tracked leaf tensor with a zeroed gradient accumulator."""
    return Tensor(np.array(data, dtype=np.float64), tracked=True)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, pairs):
    """Wrap an op result, recording a tape node if any input is tracked."""
    tracked = [(t, vjp) for t, vjp in pairs if t.tracked]
    if not tracked:
        return Tensor(out_data)
    out = Tensor(out_data, tracked=True)
    tape = active_tape()
    node = _Node(out, tracked, tape)
    out.node = node
    tape.nodes.append(node)
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked ancestor.

    ``loss`` must be a scalar tracked tensor. Repeated calls accumulate;
    callers clear gradients between optimization steps.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.tracked:
        raise UsageError("loss is not tracked on any tape")

    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    if loss.node is not None:
        # Record order is topological, so one reverse sweep suffices; nodes
        # whose outputs received no gradient are skipped.
        for node in reversed(loss.node.tape.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for t, vjp in node.pairs:
                contrib = vjp(g)
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + contrib
                else:
                    grads[k] = contrib
                    holders[k] = t
    for k, t in holders.items():
        t.grad += grads[k]


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.data.shape, b.data.shape
    return _record(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.data.shape, b.data.shape
    return _record(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(-g, sb))],
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        [
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        ],
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g / bd, ad.shape)),
            (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        ],
    )


def neg(a):
    a = _as_tensor(a)
    return _record(-a.data, [(a, lambda g: -g)])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    ad, bd = a.data, b.data
    return _record(
        ad @ bd,
        [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)],
    )


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _record(a.data.T.copy(), [(a, lambda g: g.T)])


# ---------------------------------------------------------------------------
# unary maps


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, [(a, lambda g: g * out)])


def log(a):
    a = _as_tensor(a)
    ad = a.data
    return _record(np.log(ad), [(a, lambda g: g / ad)])


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, [(a, lambda g: g * 0.5 / out)])


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    return _record(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def softplus(a):
    """log(1 + e^x), stabilized; strictly positive for all finite x."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = _sigmoid(a.data)
    return _record(out, [(a, lambda g: g * sig)])


def _sigmoid(x):
    # tanh form avoids overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through wherever lo <= x <= hi."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), [(a, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# reductions and normalizations


def mean(a):
    a = _as_tensor(a)
    n = a.data.size
    shape = a.data.shape
    return _record(
        np.asarray(a.data.mean()),
        [(a, lambda g: np.full(shape, float(g) / n))],
    )


def tsum(a):
    """Sum of all entries (named to avoid shadowing the builtin)."""
    a = _as_tensor(a)
    shape = a.data.shape
    return _record(np.asarray(a.data.sum()), [(a, lambda g: np.full(shape, float(g)))])


def l2_norm(a):
    """Frobenius norm of all entries; zero input gets a zero subgradient."""
    a = _as_tensor(a)
    ad = a.data
    n = float(np.sqrt((ad * ad).sum()))
    safe = n if n > 0.0 else 1.0
    return _record(np.asarray(n), [(a, lambda g: (float(g) / safe) * ad)])


def softmax_rows(x):
    """Row-wise softmax with max-shift; each row sums to 1 within 1e-12."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return _record(out, [(x, vjp)])


def row_normalize(x):
    """Scale each row to unit L2 norm; zero rows stay zero (zero gradient)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"row_normalize expects a matrix, got shape {x.data.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    nonzero = norms > 0.0
    safe = np.where(nonzero, norms, 1.0)
    out = np.where(nonzero, x.data / safe, 0.0)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return np.where(nonzero, (g - out * dot) / safe, 0.0)

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# structure: concatenation, gathers, pooling, segments


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _record(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def elementwise_max(tensors):
    """Elementwise maximum over same-shape tensors.

    Backward routes the full gradient to the argmax operand per cell; ties
    break toward the lowest operand index.
    """
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"elementwise_max needs equal shapes, got {sorted(shapes)}")
    stacked = np.stack([t.data for t in tensors], axis=0)
    winner = np.argmax(stacked, axis=0)  # first max = lowest index
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def make_vjp(i):
        mask = winner == i
        return lambda g: g * mask

    result = _record(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])
    return result, winner


def take_rows(x, idx):
    """Gather rows by index; backward scatter-adds into the source rows."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return gx

    return _record(x.data[idx], [(x, vjp)])


def take_columns(x, idx):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"take_columns expects a matrix, got shape {x.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx.T, idx, g.T)
        return gx

    return _record(x.data[:, idx], [(x, vjp)])


def gather_pairs(x, rows, cols):
    """Pick entries x[rows[i], cols[i]] as a vector; backward scatter-adds."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.data.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.add.at(gx, (rows, cols), g)
        return gx

    return _record(x.data[rows, cols], [(x, vjp)])


def pairwise_dist(a, b):
    """Euclidean distance matrix D[i, j] = ||a_i - b_j||.

    Coincident pairs (distance 0) get a zero subgradient.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(
            f"pairwise_dist: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    ad, bd = a.data, b.data
    sq = (
        (ad * ad).sum(axis=1)[:, None]
        + (bd * bd).sum(axis=1)[None, :]
        - 2.0 * (ad @ bd.T)
    )
    dist = np.sqrt(np.maximum(sq, 0.0))

    def vjp_a(g):
        w = np.where(dist > 0.0, g / np.where(dist > 0.0, dist, 1.0), 0.0)
        return w.sum(axis=1)[:, None] * ad - w @ bd

    def vjp_b(g):
        w = np.where(dist > 0.0, g / np.where(dist > 0.0, dist, 1.0), 0.0)
        return w.sum(axis=0)[:, None] * bd - w.T @ ad

    return _record(dist, [(a, vjp_a), (b, vjp_b)])


def avg_pool_2x2(x, h, w):
    """2x2 average pooling over a row-major (h*w, c) grid of features."""
    x = _as_tensor(x)
    if h % 2 or w % 2:
        raise UsageError(f"avg_pool_2x2 needs even grid dims, got {h}x{w}")
    c = x.data.shape[1]
    if x.data.shape[0] != h * w:
        raise ShapeError(f"grid says {h}x{w} but tensor has {x.data.shape[0]} rows")
    blocks = x.data.reshape(h // 2, 2, w // 2, 2, c)
    out = blocks.mean(axis=(1, 3)).reshape(-1, c)

    def vjp(g):
        gg = g.reshape(h // 2, w // 2, c)
        up = np.repeat(np.repeat(gg, 2, axis=0), 2, axis=1) * 0.25
        return up.reshape(h * w, c)

    return _record(out, [(x, vjp)])


def segment_mean(x, seg, n_seg):
    """Mean of rows per segment id; empty segments yield zero rows."""
    x = _as_tensor(x)
    seg = np.asarray(seg, dtype=np.intp)
    counts = np.bincount(seg, minlength=n_seg).astype(np.float64)
    sums = np.zeros((n_seg, x.data.shape[1]))
    np.add.at(sums, seg, x.data)
    denom = np.where(counts > 0, counts, 1.0)[:, None]
    out = sums / denom

    def vjp(g):
        return (g / denom)[seg]

    return _record(out, [(x, vjp)])


def segment_logsumexp(x, seg, n_seg):
    """Per-segment log-sum-exp of a vector; empty segments yield -inf.

    Backward distributes the segment gradient by in-segment softmax weights.
    """
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"segment_logsumexp expects a vector, got {x.data.shape}")
    seg = np.asarray(seg, dtype=np.intp)
    highs = np.full(n_seg, -np.inf)
    np.maximum.at(highs, seg, x.data)
    occupied = np.isfinite(highs)
    shift = np.where(occupied, highs, 0.0)
    e = np.exp(x.data - shift[seg])
    sums = np.zeros(n_seg)
    np.add.at(sums, seg, e)
    out = np.where(occupied, shift + np.log(np.where(sums > 0, sums, 1.0)), -np.inf)
    weights = e / np.where(sums[seg] > 0, sums[seg], 1.0)

    def vjp(g):
        return np.where(np.isfinite(g[seg]), g[seg], 0.0) * weights

    return _record(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# the two nonstandard gradient ops


def reparam_sample(mu, sigma, eps):
    """z = mu + eps * sigma, deterministic in the externally supplied noise.

    Gradients flow to ``mu`` (identity) and ``sigma`` (scaled by eps) only;
    the noise never receives gradient. ``sigma`` must be strictly positive.
    """
    mu, sigma = _as_tensor(mu), _as_tensor(sigma)
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if mu.data.shape != sigma.data.shape or mu.data.shape != eps.shape:
        raise ShapeError(
            f"reparam_sample: shapes differ: mu {mu.data.shape}, "
            f"sigma {sigma.data.shape}, eps {eps.shape}"
        )
    if np.any(sigma.data <= 0.0):
        raise DomainError("reparam_sample requires sigma > 0 elementwise")
    return _record(
        mu.data + eps * sigma.data,
        [(mu, lambda g: g), (sigma, lambda g: g * eps)],
    )


def grl(x, lam):
    """Gradient reversal: identity forward, gradient scaled by -lambda."""
    if lam <= 0.0:
        raise ConfigError(f"grl requires lambda > 0, got {lam}")
    x = _as_tensor(x)
    return _record(x.data, [(x, lambda g: -lam * g)])
