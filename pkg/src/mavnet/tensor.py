"""Rank-4 (n, c, h, w) array helpers shared by every other module.

Tensors are plain C-contiguous numpy arrays. Training and inference run in
float32; float64 is used only for finite-difference gradient checks.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

DTYPE = np.float32
CHECK_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an operation would publish NaN or Inf values."""


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, x: np.ndarray) -> "Shape":
        if x.ndim != 4:
            raise ValueError(f"expected a rank-4 (n, c, h, w) array, got shape {x.shape}")
        return cls(*map(int, x.shape)).validated()

    def validated(self) -> "Shape":
        if min(self) < 1:
            raise ValueError(f"every dimension must be positive, got {tuple(self)}")
        return self

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def flat_index(self, n: int, c: int, h: int, w: int) -> int:
        return ((n * self.c + c) * self.h + h) * self.w + w

    def unravel(self, index: int) -> tuple[int, int, int, int]:
        if not 0 <= index < self.size:
            raise IndexError(f"flat index {index} out of range for {tuple(self)}")
        index, w = divmod(index, self.w)
        index, h = divmod(index, self.h)
        n, c = divmod(index, self.c)
        return n, c, h, w


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    x = np.ascontiguousarray(data, dtype=dtype)
    Shape.of(x)
    return check_finite(x)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteError(f"{what} holds a non-finite value at index {tuple(int(i) for i in bad)}")
    return x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax_over_channels(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] < 2:
        raise ValueError("softmax over channels needs at least 2 channels")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def argmax_over_channels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel class ids of shape (n, h, w); ties go to the lowest id."""
    if probs.shape[1] < 2:
        raise ValueError("argmax over channels needs at least 2 channels")
    # np.argmax returns the first maximal index, which is the tie rule we want
    return np.argmax(probs, axis=1).astype(np.int64)
