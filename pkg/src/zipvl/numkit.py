"""Minimal dense numerics shared by every other module.

Matrices are plain numpy float32 arrays in row-major order. Accumulations
(softmax, cumulative sums) run in float64 internally and results are cast
back to float32 where the value is part of model state; pure accounting
helpers keep float64.

Randomness comes from numpy's PCG64 bit generator. For a fixed seed and a
fixed numpy version the stream is bit-identical across platforms.

All functions here are pure; Rng instances must stay confined to a single
thread.
"""

from __future__ import annotations

import numpy as np

from .errors import BoundsError, DegenerateMaskError, DomainError, ShapeError

FLOAT = np.float32


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; same seed gives the same stream."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*parts: int) -> int:
    """Mix integer parts into a fresh 64-bit seed, deterministically.

    The part count is mixed in first so a trailing 0 changes the result
    (SeedSequence itself pads entropy with zero words).
    """
    ss = np.random.SeedSequence([len(parts)] + [int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def as_matrix(a) -> np.ndarray:
    """Coerce to a 2-D float32 array."""
    m = np.asarray(a, dtype=FLOAT)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product a @ b with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def causal_row_mask(row_positions: np.ndarray, n_cols: int) -> np.ndarray:
    """Boolean visibility mask: row r sees columns 0..row_positions[r]."""
    pos = np.asarray(row_positions, dtype=np.int64)
    return np.arange(n_cols)[None, :] <= pos[:, None]


def masked_softmax_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax restricted to visible columns.

    Masked entries come out exactly 0.0 and each row of visible entries sums
    to 1. Stabilized by subtracting the per-row max over visible columns;
    exp/sum run in float64, the result is float32.
    """
    logits = as_matrix(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    visible_per_row = mask.sum(axis=1)
    if np.any(visible_per_row == 0):
        bad = int(np.argmin(visible_per_row))
        raise DegenerateMaskError(f"row {bad} has no visible column")
    shifted = np.where(mask, logits.astype(np.float64), -np.inf)
    shifted -= shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(FLOAT)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, sorted ascending.

    Ties are broken toward the smaller index.
    """
    v = np.asarray(values)
    if v.ndim != 1:
        raise ShapeError("topk_indices expects a 1-D vector")
    if not 1 <= k <= v.size:
        raise BoundsError(f"k={k} out of range for length {v.size}")
    order = np.argsort(-v.astype(np.float64), kind="stable")
    return np.sort(order[:k])


def cumsum_desc(values: np.ndarray) -> np.ndarray:
    """Sort descending and return running cumulative sums (float64)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("cumsum_desc expects a 1-D vector")
    if np.any(v < 0):
        raise DomainError("cumsum_desc requires nonnegative values")
    return np.cumsum(np.sort(v)[::-1])
