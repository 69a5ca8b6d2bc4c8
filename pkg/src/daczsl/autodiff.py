"""Dense-tensor reverse-mode autodiff engine.

Holds exactly the operations the training pipeline needs: affine algebra,
LeakyReLU, L2 normalization, cosine similarity, stable log-softmax losses
and the gradient-reversal operation used for adversarial training. All
arithmetic is float64. Gradients are recorded on an explicit tape that is
rebuilt for every forward pass (define-by-run); backward walks the tape in
reverse execution order and accumulates additively.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

NORM_EPS = 1e-12

_node_counter = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(ValueError):
    """Input lies in a region where the operation is undefined (e.g. zero norm)."""


class Tensor:
    """A dense float64 array with an optional gradient accumulator.

    Tensors are created either as leaves (parameters or data) or as the
    output of a recorded operation. ``grad`` is populated by
    ``Tape.backward`` and accumulates additively across contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def detach(t: Tensor) -> Tensor:
    """Same values, cut off from the tape."""
    return Tensor(t.data.copy(), requires_grad=False)


class _OpRecord:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered record of differentiable operations.

    The record order is a topological order of the computation graph by
    construction; ``backward`` traverses it in reverse. A fresh tape is
    used per forward pass.
    """

    def __init__(self):
        self._records: list[_OpRecord] = []

    def __len__(self):
        return len(self._records)

    def __enter__(self) -> "Tape":
        push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        pop_tape(self)
        return False

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self._records.append(_OpRecord(tuple(inputs), output, backward_fn))

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients of ``root`` into every tensor on this tape."""
        if seed is None:
            seed = np.ones_like(root.data)
        root.accumulate_grad(np.asarray(seed, dtype=np.float64))
        for rec in reversed(self._records):
            g = rec.output.grad
            if g is None:
                continue
            parent_grads = rec.backward_fn(g)
            for parent, pg in zip(rec.inputs, parent_grads):
                if pg is not None and parent.requires_grad:
                    parent.accumulate_grad(pg)


_tape_stack: list[Tape] = []


def push_tape(tape: Tape) -> None:
    _tape_stack.append(tape)


def pop_tape(tape: Tape) -> None:
    if not _tape_stack or _tape_stack[-1] is not tape:
        raise RuntimeError("tape stack corrupted: popping a tape that is not active")
    _tape_stack.pop()


def active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _make_output(inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    requires = any(i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_output((a, b), data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_output((a, b), data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_output((a, b), data, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def backward(g):
        return (g * c,)

    return _make_output((a,), data, backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with 1-D operands promoted on their free side."""
    a_mat = a.data if a.ndim == 2 else a.data[None, :]
    b_mat = b.data if b.ndim == 2 else b.data[:, None]
    if a_mat.shape[1] != b_mat.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_mat = a_mat @ b_mat
    data = out_mat
    if a.ndim == 1:
        data = data[0]
    if b.ndim == 1:
        data = data[..., 0]

    def backward(g):
        g_mat = g.reshape(a_mat.shape[0], b_mat.shape[1])
        da = g_mat @ b_mat.T
        db = a_mat.T @ g_mat
        if a.ndim == 1:
            da = da[0]
        if b.ndim == 1:
            db = db[:, 0]
        return da, db

    return _make_output((a, b), data, backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    data = a.data.T.copy()

    def backward(g):
        return (g.T,)

    return _make_output((a,), data, backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    data = np.array(a.data @ b.data)

    def backward(g):
        return g * b.data, g * a.data

    return _make_output((a, b), data, backward)


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two (N, d) tensors, returning shape (N,)."""
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"rows_dot expects matching 2-D tensors, got {a.shape} and {b.shape}")
    data = np.einsum("nd,nd->n", a.data, b.data)

    def backward(g):
        return g[:, None] * b.data, g[:, None] * a.data

    return _make_output((a, b), data, backward)


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_all(a: Tensor) -> Tensor:
    data = np.array(a.data.sum())

    def backward(g):
        return (np.ones(a.shape) * g,)

    return _make_output((a,), data, backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.array(a.data.sum() / n)

    def backward(g):
        return (np.ones(a.shape) * (g / n),)

    return _make_output((a,), data, backward)


def mean_axis0(a: Tensor) -> Tensor:
    """Column means of a 2-D tensor: (L, d) -> (d,)."""
    if a.ndim != 2:
        raise ShapeError(f"mean_axis0 expects a 2-D tensor, got shape {a.shape}")
    rows = a.shape[0]
    data = a.data.sum(axis=0) / rows

    def backward(g):
        return (np.tile(g / rows, (rows, 1)),)

    return _make_output((a,), data, backward)


def vstack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors (and 2-D blocks) into one 2-D tensor."""
    if not tensors:
        raise ShapeError("vstack needs at least one tensor")
    blocks = [t.data if t.ndim == 2 else t.data[None, :] for t in tensors]
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ShapeError(f"vstack rows have mixed widths: {sorted(widths)}")
    data = np.vstack(blocks)
    row_counts = [b.shape[0] for b in blocks]

    def backward(g):
        grads = []
        offset = 0
        for t, rows in zip(tensors, row_counts):
            piece = g[offset:offset + rows]
            grads.append(piece[0] if t.ndim == 1 else piece)
            offset += rows
        return grads

    return _make_output(tuple(tensors), data, backward)


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-D tensor."""
    if a.ndim != 2:
        raise ShapeError(f"row_slice expects a 2-D tensor, got shape {a.shape}")
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"row_slice [{start}, {stop}) outside 0..{a.shape[0]}")
    data = a.data[start:stop].copy()

    def backward(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _make_output((a,), data, backward)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate in backward."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index outside [0, {a.shape[0]}) in {idx.tolist()}")
    data = a.data[idx].copy()

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make_output((a,), data, backward)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; 2-D inputs must share row count."""
    if a.ndim != b.ndim:
        raise ShapeError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat row mismatch: {a.shape} vs {b.shape}")
    data = np.concatenate([a.data, b.data], axis=-1)
    split = a.shape[-1]

    def backward(g):
        return g[..., :split], g[..., split:]

    return _make_output((a, b), data, backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """Elementwise max(x, slope*x); slope must lie in (0, 1)."""
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    positive = x.data >= 0
    data = np.where(positive, x.data, slope * x.data)

    def backward(g):
        return (g * np.where(positive, 1.0, slope),)

    return _make_output((x,), data, backward)


def _norms(data: np.ndarray) -> np.ndarray:
    if data.ndim == 1:
        return np.linalg.norm(data)
    return np.linalg.norm(data, axis=1)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    r = _norms(x.data)
    if np.any(np.asarray(r) <= NORM_EPS):
        raise DegenerateInputError(
            f"l2_normalize: norm {np.min(r):.3e} is at or below {NORM_EPS:.0e}")
    if x.ndim == 1:
        y = x.data / r

        def backward(g):
            return ((g - y * (y @ g)) / r,)
    else:
        y = x.data / r[:, None]

        def backward(g):
            proj = np.einsum("nd,nd->n", y, g)
            return ((g - y * proj[:, None]) / r[:, None],)

    return _make_output((x,), y, backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two nonzero vectors, in [-1, 1]."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(
            f"cosine_similarity expects equal-length vectors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateInputError(
            f"cosine_similarity: vector norm at or below {NORM_EPS:.0e}")
    c = float(a.data @ b.data) / (na * nb)
    data = np.array(c)

    def backward(g):
        da = g * (b.data / (na * nb) - c * a.data / (na * na))
        db = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return da, db

    return _make_output((a, b), data, backward)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity in the forward pass; backward multiplies the gradient by -lam."""
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"grad_reverse scale must be >= 0, got {lam}")
    data = x.data.copy()

    def backward(g):
        return (-lam * g,)

    return _make_output((x,), data, backward)


# ---------------------------------------------------------------------------
# softmax losses


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def log_softmax_nll(logits: Tensor, target: int) -> Tensor:
    """Negative log-softmax probability of ``target``, max-shifted for stability."""
    if logits.ndim != 1:
        raise ShapeError(f"log_softmax_nll expects 1-D logits, got shape {logits.shape}")
    n = logits.shape[0]
    target = int(target)
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    log_probs = _log_softmax(logits.data)
    data = np.array(-log_probs[target])
    softmax = np.exp(log_probs)

    def backward(g):
        grad = softmax.copy()
        grad[target] -= 1.0
        return (g * grad,)

    return _make_output((logits,), data, backward)


def softmax_cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Per-row negative log-softmax losses for a batch: (N, C) -> (N,)."""
    if logits.ndim != 2:
        raise ShapeError(f"expected 2-D logits, got shape {logits.shape}")
    n, c = logits.shape
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"expected {n} targets, got {idx.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= c:
        raise IndexError(f"target outside [0, {c}) in {idx.tolist()}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    data = -log_probs[np.arange(n), idx]
    softmax = np.exp(log_probs)

    def backward(g):
        grad = softmax.copy()
        grad[np.arange(n), idx] -= 1.0
        return (grad * g[:, None],)

    return _make_output((logits,), data, backward)
