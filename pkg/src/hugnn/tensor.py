"""Dense 2-D float64 tensors with reverse-mode differentiation.

Every value is a (rows, cols) float64 array. Operations executed while a
``Tape`` is active are recorded in execution order; ``backward`` replays
the tape in reverse and accumulates gradients into every tensor that
``requires_grad``. With no active tape the same functions run as plain
numpy, which is what evaluation-mode code uses.

Gradient conventions match the textbook rules, e.g. for ``c = a @ b``:
``a.grad += g @ b.T`` and ``b.grad += a.T @ g``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .rng import Rng

_EPS_COSINE = 1e-12
_EPS_PROB_FLOOR = 1e-12


def _as_2d(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D; got array of shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A (rows, cols) float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_2d(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; floats are treated as constants
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward()."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, backward_fn))

    def clear(self) -> None:
        self._entries.clear()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_out(value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it when gradients are being traced."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(out, backward_fn(out))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every traced tensor.

    The tape is cleared afterwards; each recorded use contributes exactly
    once. Tensors on branches that never reach the loss keep grad None.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 scalar tensor, got shape {loss.shape}")
    loss.grad = np.ones((1, 1))
    for out, fn in reversed(tape._entries):
        if out.grad is not None:
            fn(out.grad)
    tape.clear()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to operand shape {shape}")
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for ax in (0, 1):
        da, db = a.shape[ax], b.shape[ax]
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    value = a.data @ b.data

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        return fn

    return _make_out(value, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g.T)
        return fn

    return _make_out(a.data.T, (a,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))
        return fn

    return _make_out(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g, b.shape))
        return fn

    return _make_out(a.data - b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * c)
        return fn

    return _make_out(a.data * c, (a,), bw)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "hadamard")
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))
        return fn

    return _make_out(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: denominator contains zeros")
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return fn

    return _make_out(a.data / b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * out.data)
        return fn

    return _make_out(value, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: inputs must be strictly positive")
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g / a.data)
        return fn

    return _make_out(np.log(a.data), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * mask)
        return fn

    return _make_out(a.data * mask, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    value = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * out.data * (1.0 - out.data))
        return fn

    return _make_out(value, (a,), bw)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the clamped region gets zero gradient."""
    mask = a.data > floor

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g * mask)
        return fn

    return _make_out(np.maximum(a.data, floor), (a,), bw)


# ---------------------------------------------------------------------------
# shape / reduction


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row counts disagree, {a.shape} vs {b.shape}")
    na = a.cols

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g[:, :na])
            if b.requires_grad:
                b.accumulate_grad(g[:, na:])
        return fn

    return _make_out(np.hstack([a.data, b.data]), (a, b), bw)


def row_sum(a: Tensor) -> Tensor:
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
        return fn

    return _make_out(a.data.sum(axis=1, keepdims=True), (a,), bw)


def row_mean(a: Tensor) -> Tensor:
    inv = 1.0 / a.cols

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(np.broadcast_to(g * inv, a.shape).copy())
        return fn

    return _make_out(a.data.mean(axis=1, keepdims=True), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(np.full(a.shape, g[0, 0]))
        return fn

    return _make_out(np.array([[a.data.sum()]]), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(np.full(a.shape, g[0, 0] * inv))
        return fn

    return _make_out(np.array([[a.data.mean()]]), (a,), bw)


def sq_norm_rows(a: Tensor) -> Tensor:
    """Per-row squared euclidean norm, shape (rows, 1)."""
    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(2.0 * a.data * g)
        return fn

    return _make_out((a.data * a.data).sum(axis=1, keepdims=True), (a,), bw)


def variance_rows(a: Tensor) -> Tensor:
    """Mean squared deviation of rows about the mean row, summed over columns.

    Returns a 1x1 scalar:  (1/m) * sum_i ||a_i - mean(a)||^2.
    """
    centered = a.data - a.data.mean(axis=0, keepdims=True)
    value = np.array([[(centered * centered).sum() / a.rows]])

    def bw(out):
        def fn(g):
            # rows of `centered` sum to zero, so the mean term drops out
            if a.requires_grad:
                a.accumulate_grad(g[0, 0] * (2.0 / a.rows) * centered)
        return fn

    return _make_out(value, (a,), bw)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity <a_i,b_i> / (|a_i||b_i| + 1e-12), shape (rows, 1).

    Rows where either operand is (numerically) the zero vector yield 0 with
    zero gradient, so isolated-node aggregates stay differentiable.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cosine_rows: shapes disagree, {a.shape} vs {b.shape}")
    dots = (a.data * b.data).sum(axis=1, keepdims=True)
    na = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=1, keepdims=True))
    denom = na * nb + _EPS_COSINE
    live = (na > _EPS_COSINE) & (nb > _EPS_COSINE)
    value = np.where(live, dots / denom, 0.0)

    def bw(out):
        def fn(g):
            gl = g * live
            if a.requires_grad:
                ga = gl * (b.data / denom - value * (nb / np.maximum(na, _EPS_COSINE)) * a.data / denom)
                a.accumulate_grad(np.where(live, ga, 0.0))
            if b.requires_grad:
                gb = gl * (a.data / denom - value * (na / np.maximum(nb, _EPS_COSINE)) * b.data / denom)
                b.accumulate_grad(np.where(live, gb, 0.0))
        return fn

    return _make_out(value, (a, b), bw)


def row_softmax(logits: Tensor) -> Tensor:
    """Row-stochastic softmax computed with per-row max subtraction."""
    if not np.all(np.isfinite(logits.data)):
        raise DomainError("row_softmax: logits must be finite")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def fn(g):
            if logits.requires_grad:
                y = out.data
                dot = (g * y).sum(axis=1, keepdims=True)
                logits.accumulate_grad(y * (g - dot))
        return fn

    return _make_out(value, (logits,), bw)


# ---------------------------------------------------------------------------
# indexing


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows a[idx]; the backward pass scatter-adds into those rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ContractError(f"take_rows: index out of range for {a.rows} rows")

    def bw(out):
        def fn(g):
            if a.requires_grad:
                acc = np.zeros(a.shape)
                np.add.at(acc, idx, g)
                a.accumulate_grad(acc)
        return fn

    return _make_out(a.data[idx], (a,), bw)


def segment_sum_rows(a: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of `a` into `num_segments` buckets given per-row segment ids."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (a.rows,):
        raise ShapeError(f"segment_sum_rows: need one segment id per row, got {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ContractError("segment_sum_rows: segment id out of range")
    value = np.zeros((num_segments, a.cols))
    np.add.at(value, seg, a.data)

    def bw(out):
        def fn(g):
            if a.requires_grad:
                a.accumulate_grad(g[seg])
        return fn

    return _make_out(value, (a,), bw)


def pick_cols(a: Tensor, cols) -> Tensor:
    """Select one entry per row, a[i, cols[i]], as a (rows, 1) tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (a.rows,):
        raise ShapeError("pick_cols: need one column id per row")
    if cols.size and (cols.min() < 0 or cols.max() >= a.cols):
        raise ContractError(f"pick_cols: column id out of range for {a.cols} columns")
    rows = np.arange(a.rows)
    value = a.data[rows, cols].reshape(-1, 1)

    def bw(out):
        def fn(g):
            if a.requires_grad:
                acc = np.zeros(a.shape)
                acc[rows, cols] = g[:, 0]
                a.accumulate_grad(acc)
        return fn

    return _make_out(value, (a,), bw)


# ---------------------------------------------------------------------------
# sampling


def gumbel_softmax_st(p: Tensor, temperature: float, rng: Rng | None,
                      train_mode: bool, noise: np.ndarray | None = None
                      ) -> tuple[Tensor, Tensor]:
    """Straight-through categorical sampling from probability rows.

    Returns (soft, hard). In train mode ``soft`` is the tempered softmax of
    (log p + gumbel noise) / temperature and ``hard`` carries the one-hot
    argmax forward while routing all gradient through ``soft``. In eval mode
    no noise is drawn and ``hard`` is the argmax of ``p`` itself, ties going
    to the lowest index. Zero probabilities are floored at 1e-12 before the
    log.
    """
    if temperature <= 0.0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if train_mode:
        if noise is None:
            if rng is None:
                raise ContractError("train-mode sampling needs an rng or explicit noise")
            noise = rng.gumbel(p.rows, p.cols)
        logits = scale(add(log(clamp_min(p, _EPS_PROB_FLOOR)), constant(noise)),
                       1.0 / temperature)
        soft = row_softmax(logits)
        hard_ids = np.argmax(soft.data, axis=1)
    else:
        soft = p
        hard_ids = np.argmax(p.data, axis=1)
    one_hot = np.zeros(p.shape)
    one_hot[np.arange(p.rows), hard_ids] = 1.0
    # forward value is the one-hot; gradient is exactly the soft path's
    hard = add(soft, constant(one_hot - soft.data))
    return soft, hard


def dropout_mask(shape: tuple[int, int], rate: float, rng: Rng) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability `rate`, survivors scaled."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.uniform(*shape) >= rate
    return keep / (1.0 - rate)
