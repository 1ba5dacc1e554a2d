"""Causal attention, probe-row score approximation and token importance stats.

Everything here is single-head: q, k, v are (n, d_head) float32 matrices.
Multi-head aggregation happens in the engine. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import BoundsError, DomainError, EmptySequenceError, ShapeError


@dataclass(frozen=True)
class AttentionScores:
    """A (possibly partial) row-stochastic causal score matrix.

    scores has one row per computed query position and n_total columns.
    row_positions holds the original position of each row, sorted ascending;
    entries at columns j > row_position are exactly zero. When rows cover
    every position this is the full attention matrix.
    """

    scores: np.ndarray
    row_positions: np.ndarray
    n_total: int

    @property
    def n_rows(self) -> int:
        return self.scores.shape[0]

    def is_full(self) -> bool:
        return self.n_rows == self.n_total


@dataclass(frozen=True)
class ProbeSet:
    """Query rows whose scores stand in for the full matrix.

    The last recent_count positions are always members; random_count extra
    positions are drawn without replacement from the remaining pool.
    """

    indices: np.ndarray
    recent_count: int
    random_count: int
    seed: int


@dataclass(frozen=True)
class ScoreStats:
    """Per-token importance statistics derived from an AttentionScores."""

    accumulated: np.ndarray
    normalized: np.ndarray
    mass_total: float


def compute_qkv(
    x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project the input into query, key and value states."""
    return numkit.matmul(x, wq), numkit.matmul(x, wk), numkit.matmul(x, wv)


def causal_scores(
    q: np.ndarray, k: np.ndarray, scale: float, row_positions: np.ndarray | None = None
) -> AttentionScores:
    """Masked softmax scores for the given query rows against all keys.

    row_positions=None means all rows. Rows are always gathered into a fresh
    contiguous array so full and subset calls share the exact same float path.
    """
    q = numkit.as_matrix(q)
    k = numkit.as_matrix(k)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q and k head dims differ: {q.shape} vs {k.shape}")
    n = k.shape[0]
    if row_positions is None:
        row_positions = np.arange(q.shape[0], dtype=np.int64)
    else:
        row_positions = np.asarray(row_positions, dtype=np.int64)
        if row_positions.size and row_positions.max() >= q.shape[0]:
            raise BoundsError("row position beyond query rows")
    q_rows = np.ascontiguousarray(q[row_positions])
    logits = (q_rows @ k.T) * numkit.FLOAT(scale)
    mask = numkit.causal_row_mask(row_positions, n)
    scores = numkit.masked_softmax_rows(logits, mask)
    return AttentionScores(scores=scores, row_positions=row_positions, n_total=n)


def dense_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float
) -> tuple[np.ndarray, AttentionScores]:
    """Full causal attention: returns the output and the score matrix."""
    if q.shape[0] != k.shape[0] or k.shape != v.shape:
        raise ShapeError(f"q/k/v shapes inconsistent: {q.shape}, {k.shape}, {v.shape}")
    scores = causal_scores(q, k, scale)
    return scores.scores @ numkit.as_matrix(v), scores


def restricted_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float, indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Causal attention computed only among the tokens in `indices`.

    Causality uses original positions: row i may attend to row j iff
    indices[j] <= indices[i]. With ascending indices that is a plain lower
    triangle, so no weight ever flows from a later position to an earlier
    one. Returns (outputs over the subset, weight matrix) in subset order.
    """
    idx = np.asarray(indices, dtype=np.int64)
    q_s = np.ascontiguousarray(numkit.as_matrix(q)[idx])
    k_s = np.ascontiguousarray(numkit.as_matrix(k)[idx])
    v_s = np.ascontiguousarray(numkit.as_matrix(v)[idx])
    logits = (q_s @ k_s.T) * numkit.FLOAT(scale)
    mask = np.tril(np.ones((idx.size, idx.size), dtype=bool))
    weights = numkit.masked_softmax_rows(logits, mask)
    return weights @ v_s, weights


def accumulated_scores(scores: AttentionScores) -> np.ndarray:
    """Total attention received per token: column sums over available rows."""
    return scores.scores.sum(axis=0, dtype=np.float64).astype(numkit.FLOAT)


def structural_nnz(scores: AttentionScores) -> np.ndarray:
    """Causally visible entries per column among the available rows.

    Counted structurally from row positions (row c sees column j iff
    row_position(c) >= j), not by testing floats against zero.
    """
    cols = np.arange(scores.n_total)
    return scores.n_rows - np.searchsorted(scores.row_positions, cols, side="left")


def normalized_scores(scores: AttentionScores) -> np.ndarray:
    """Accumulated score per token divided by its visible-entry count."""
    acc = accumulated_scores(scores)
    nnz = structural_nnz(scores)
    out = np.zeros(scores.n_total, dtype=numkit.FLOAT)
    seen = nnz > 0
    out[seen] = acc[seen] / nnz[seen]
    return out


def score_stats(scores: AttentionScores) -> ScoreStats:
    """Bundle accumulated and normalized statistics for one score matrix."""
    acc = accumulated_scores(scores)
    return ScoreStats(
        accumulated=acc,
        normalized=normalized_scores(scores),
        mass_total=float(acc.sum(dtype=np.float64)),
    )


def select_probe_set(n: int, recent: int, random: int, seed: int) -> ProbeSet:
    """Pick probe rows: the trailing `recent` positions plus `random` others.

    The random positions are drawn uniformly without replacement from the
    pool of non-recent positions; a pool smaller than `random` is taken
    whole. Result is sorted ascending.
    """
    if n == 0:
        raise EmptySequenceError("cannot select probes from an empty sequence")
    if recent < 1:
        raise DomainError("recent count must be >= 1")
    if random < 0:
        raise DomainError("random count must be >= 0")
    n_recent = min(recent, n)
    pool = n - n_recent
    take = min(random, pool)
    rng = numkit.make_rng(seed)
    drawn = rng.permutation(pool)[:take]
    indices = np.concatenate([np.sort(drawn), np.arange(pool, n)])
    return ProbeSet(
        indices=indices.astype(np.int64), recent_count=recent, random_count=random, seed=seed
    )


def probe_attention(
    q: np.ndarray, probe: ProbeSet, k: np.ndarray, scale: float
) -> AttentionScores:
    """Exact scores for the probe rows only; causality follows original positions."""
    return causal_scores(q, k, scale, row_positions=probe.indices)
