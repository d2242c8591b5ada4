"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: just the primitives needed for a pre-LN transformer
encoder with a masked-LM head. Values are row-major numpy float64 arrays.
A Tape records ops in application order (which is therefore a topological
order) and ``backward`` replays it exactly once in reverse, accumulating
adjoints keyed by tensor id.

Tensors are treated as immutable values once created; ops never write into
their inputs, so they are safe to share read-only. A tape belongs to a
single execution context.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np
from scipy.special import erf

LAYERNORM_EPS = 1e-5

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes incompatible for an op (message names op and dims)."""


class Tensor:
    """Dense float64 array node; ``tid`` identifies it on tapes."""

    __slots__ = ("data", "tid", "requires_grad")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # keep the row-major contract
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.tid = next(Tensor._ids)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tid={self.tid})"


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of applied ops; application order is the replay order."""

    def __init__(self):
        self._records: list[tuple[int, Callable]] = []

    def record(self, out_tid: int, backward_fn: Callable) -> None:
        self._records.append((out_tid, backward_fn))

    def __len__(self) -> int:
        return len(self._records)


def _acc(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    prev = grads.get(t.tid)
    grads[t.tid] = g if prev is None else prev + g


def _emit(tape: Tape | None, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None and out.requires_grad:
        tape.record(out.tid, backward_fn)
    return out


def _reduce_to(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum away leading broadcast axes so the adjoint matches the operand.
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    if arr.shape != shape:
        raise ShapeError(f"cannot reduce adjoint {arr.shape} to operand {shape}")
    return arr


def _is_suffix(small: tuple, big: tuple) -> bool:
    if len(small) > len(big):
        return False
    return len(small) == 0 or big[len(big) - len(small):] == small


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(tape, a: Tensor, b: Tensor, transpose_a: bool = False,
           transpose_b: bool = False) -> Tensor:
    """Matrix product over the last two axes; leading axes must match
    (or one operand is 2-D and broadcasts)."""
    A = a.data.swapaxes(-1, -2) if transpose_a else a.data
    B = b.data.swapaxes(-1, -2) if transpose_b else b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} x {b.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims mismatch {a.shape} x {b.shape} "
            f"(transpose_a={transpose_a}, transpose_b={transpose_b})")
    if A.ndim > 2 and B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul: batch dims mismatch {a.shape} x {b.shape}")
    out = A @ B

    def bwd(g, grads):
        if a.requires_grad:
            dA = g @ B.swapaxes(-1, -2)
            if transpose_a:
                dA = dA.swapaxes(-1, -2)
            _acc(grads, a, _reduce_to(dA, a.data.shape))
        if b.requires_grad:
            dB = A.swapaxes(-1, -2) @ g
            if transpose_b:
                dB = dB.swapaxes(-1, -2)
            _acc(grads, b, _reduce_to(dB, b.data.shape))

    return _emit(tape, out, (a, b), bwd)


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; shapes must be equal or one a trailing suffix of the
    other (bias-add style broadcasting, nothing more)."""
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and not _is_suffix(sb, sa) and not _is_suffix(sa, sb):
        raise ShapeError(f"add: shapes {sa} and {sb} are not bias-compatible")
    out = a.data + b.data

    def bwd(g, grads):
        _acc(grads, a, _reduce_to(g, sa))
        _acc(grads, b, _reduce_to(g, sb))

    return _emit(tape, out, (a, b), bwd)


def scale(tape, a: Tensor, factor: float) -> Tensor:
    c = float(factor)
    out = a.data * c

    def bwd(g, grads):
        _acc(grads, a, g * c)

    return _emit(tape, out, (a,), bwd)


def permute(tape, a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Axis transposition (internal helper for attention head routing)."""
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bwd(g, grads):
        _acc(grads, a, np.transpose(g, inv))

    return _emit(tape, out, (a,), bwd)


def reshape(tape, a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g, grads):
        _acc(grads, a, g.reshape(orig))

    return _emit(tape, out, (a,), bwd)


def layernorm(tape, x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis: gain * (x - mu) / sqrt(var + eps) + bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g, grads):
        if gain.requires_grad:
            _acc(grads, gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _acc(grads, bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(grads, x, inv * (dxhat - m1 - xhat * m2))

    return _emit(tape, out, (x, gain, bias), bwd)


def softmax(tape, x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis (max subtraction)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=-1, keepdims=True)

    def bwd(g, grads):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _acc(grads, x, out * (g - dot))

    return _emit(tape, out, (x,), bwd)


def gelu(tape, x: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bwd(g, grads):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _acc(grads, x, g * (cdf + x.data * pdf))

    return _emit(tape, out, (x,), bwd)


def embed_lookup(tape, table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embed_lookup: ids must be integers, got dtype {ids.dtype}")
    if table.data.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    vocab, d = table.data.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(
            f"embed_lookup: ids in [{ids.min()}, {ids.max()}] out of range for vocab {vocab}")
    out = table.data[ids]

    def bwd(g, grads):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids.reshape(-1), g.reshape(-1, d))
            _acc(grads, table, dt)

    return _emit(tape, out, (table,), bwd)


def masked_cross_entropy(tape, logits: Tensor, targets, mask) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over masked positions.

    logits: [B, S, V]; targets: int [B, S]; mask: bool [B, S]. Returns the
    scalar loss (on tape) and, as an aux value, per-example mean losses over
    each sequence's masked positions (plain array, not differentiated).
    """
    targets = np.asarray(targets)
    maskf = np.asarray(mask, dtype=np.float64)
    if logits.data.ndim != 3:
        raise ShapeError(f"masked_cross_entropy: logits must be [B,S,V], got {logits.shape}")
    if targets.shape != logits.data.shape[:2] or maskf.shape != logits.data.shape[:2]:
        raise ShapeError(
            f"masked_cross_entropy: targets {targets.shape} / mask {np.asarray(mask).shape} "
            f"incompatible with logits {logits.shape}")
    n_masked = maskf.sum()
    if n_masked == 0:
        raise ValueError("masked_cross_entropy: batch has no masked positions")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = z - np.log(sez)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = (nll * maskf).sum() / n_masked
    per_example = (nll * maskf).sum(axis=1) / np.maximum(maskf.sum(axis=1), 1.0)

    def bwd(g, grads):
        if logits.requires_grad:
            dl = ez / sez
            idx = targets[..., None]
            np.put_along_axis(dl, idx, np.take_along_axis(dl, idx, axis=-1) - 1.0, axis=-1)
            _acc(grads, logits, dl * maskf[..., None] * (float(g) / n_masked))

    return _emit(tape, np.asarray(loss), (logits,), bwd), per_example


# ---------------------------------------------------------------------------
# dispatcher / backward / grad check
# ---------------------------------------------------------------------------

_OPS = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "layernorm": layernorm,
    "softmax": softmax,
    "gelu": gelu,
    "embed_lookup": embed_lookup,
    "reshape": reshape,
    "masked_cross_entropy": masked_cross_entropy,
}


def apply(tape, op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; the result is recorded on the tape.

    For masked_cross_entropy only the scalar loss tensor is returned (the
    per-example aux vector is available from the direct function call).
    """
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    out = fn(tape, *inputs, **kwargs)
    if op_kind == "masked_cross_entropy":
        return out[0]
    return out


def backward(tape: Tape, loss: Tensor, params) -> dict[int, np.ndarray]:
    """Reverse-replay the tape from a scalar loss.

    Returns a gradient map keyed by parameter tid; parameters not reached
    from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if len(tape) == 0:
        raise ValueError("backward: tape is empty")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for out_tid, bwd in reversed(tape._records):
        g = grads.pop(out_tid, None)
        if g is None:
            continue
        bwd(g, grads)
    return {p.tid: grads.get(p.tid, np.zeros_like(p.data)) for p in params}


def grad_check(fn, point: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``fn(tape, x) -> scalar Tensor`` must accept tape=None for plain forward
    evaluation. Relative error per coordinate is
    |auto - numeric| / max(|auto|, |numeric|, 1e-8).
    """
    p = Tensor(np.array(point.data, copy=True), requires_grad=True)
    tape = Tape()
    out = fn(tape, p)
    if len(tape):
        auto = backward(tape, out, [p])[p.tid]
    else:
        auto = np.zeros_like(p.data)

    numeric = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(fn(None, p).data)
        flat[i] = orig - epsilon
        fm = float(fn(None, p).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(auto - numeric) / denom))
