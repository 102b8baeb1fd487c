"""Dense float64 tensor primitives backed by numpy.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in C order.
Every matrix product goes through :func:`matmul` so that an active
:class:`MacCounter` sees the exact multiply-accumulate count.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "InvalidPermutationError",
    "NumericInputError",
    "MacCounter",
    "count_macs",
    "as_tensor",
    "permute",
    "inverse_permutation",
    "matmul",
    "softmax",
    "elementwise",
]


class ShapeError(ValueError):
    pass


class InvalidPermutationError(ValueError):
    pass


class NumericInputError(ValueError):
    pass


class MacCounter:
    """Accumulates multiply-accumulate counts reported by :func:`matmul`."""

    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


_ACTIVE_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "axial3d_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count MACs of every :func:`matmul` issued inside the block.

    The counter is bound to the current context, so concurrent evaluations
    in separate threads or tasks never share an accumulator.
    """
    counter = MacCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    t = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"axis lengths must be positive, got {shape}")
        if int(np.prod(shape)) != t.size:
            raise ShapeError(f"cannot view {t.size} elements as shape {shape}")
        t = t.reshape(shape)
    return t


def _check_permutation(perm: Sequence[int], rank: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if len(perm) != rank:
        raise InvalidPermutationError(
            f"permutation of length {len(perm)} does not match rank {rank}"
        )
    if sorted(perm) != list(range(rank)):
        raise InvalidPermutationError(f"{perm} is not a permutation of 0..{rank - 1}")
    return perm


def permute(t: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Reorder axes; output axis ``k`` is input axis ``perm[k]``."""
    perm = _check_permutation(perm, t.ndim)
    return np.ascontiguousarray(np.transpose(t, perm))


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    perm = _check_permutation(perm, len(perm))
    inv = [0] * len(perm)
    for k, p in enumerate(perm):
        inv[p] = k
    return tuple(inv)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of the two trailing axes, with stacked leading axes.

    Leading (stack) axes must match exactly; no broadcasting is done.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"stack axes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        stack = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
        counter.add(stack * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return np.matmul(a, b)


def softmax(t: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    if not np.all(np.isfinite(t)):
        raise NumericInputError("softmax input contains NaN or Inf")
    e = np.exp(t - t.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(t, u, kind: str) -> np.ndarray:
    """Pointwise add/sub/mul of equal-shape tensors, or tensor with scalar."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    t_scalar = np.ndim(t) == 0
    u_scalar = np.ndim(u) == 0
    if not (t_scalar or u_scalar) and np.shape(t) != np.shape(u):
        raise ShapeError(f"elementwise {kind} on shapes {np.shape(t)} and {np.shape(u)}")
    return op(np.asarray(t, dtype=np.float64), np.asarray(u, dtype=np.float64))
