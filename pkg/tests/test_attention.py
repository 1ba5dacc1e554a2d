"""Tests for causal/restricted/probe attention and the score statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from zipvl import attention, numkit
from zipvl.errors import DomainError, EmptySequenceError, ShapeError


def random_qkv(n, d, seed=0):
    rng = numkit.make_rng(seed)
    return tuple(rng.normal(size=(n, d)).astype(np.float32) for _ in range(3))


class TestCausalScores:
    def test_matches_naive_attention(self):
        q, k, v = random_qkv(12, 5, seed=3)
        scale = 1.0 / np.sqrt(5)
        out, scores = attention.dense_attention(q, k, v, scale)
        ref_out, ref_w = oracles.naive_causal_attention(q, k, v, scale)
        assert np.max(np.abs(scores.scores - ref_w)) <= 1e-5
        assert np.max(np.abs(out - ref_out)) <= 1e-5

    def test_strict_upper_triangle_is_zero(self):
        q, k, _ = random_qkv(9, 4, seed=1)
        scores = attention.causal_scores(q, k, 0.5)
        assert np.all(scores.scores[np.triu_indices(9, k=1)] == 0.0)

    def test_row_subset_rows_equal_full_rows_bitwise(self):
        q, k, _ = random_qkv(16, 6, seed=2)
        full = attention.causal_scores(q, k, 0.4)
        rows = np.array([0, 3, 7, 15])
        sub = attention.causal_scores(q, k, 0.4, row_positions=rows)
        assert np.array_equal(sub.scores, full.scores[rows])

    def test_head_dim_mismatch(self):
        with pytest.raises(ShapeError):
            attention.causal_scores(np.zeros((3, 4)), np.zeros((3, 5)), 1.0)

    @given(st.integers(1, 24), st.integers(1, 8), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_property_rows_sum_to_one(self, n, d, seed):
        q, k, _ = random_qkv(n, d, seed)
        scores = attention.causal_scores(q, k, 1.0 / np.sqrt(d))
        sums = scores.scores.sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) <= 1e-6


class TestRestrictedAttention:
    def test_full_index_set_equals_dense(self):
        q, k, v = random_qkv(10, 4, seed=5)
        dense_out, _ = attention.dense_attention(q, k, v, 0.5)
        sub_out, _ = attention.restricted_attention(q, k, v, 0.5, np.arange(10))
        assert np.array_equal(sub_out, dense_out)

    def test_matches_naive_on_subset(self):
        q, k, v = random_qkv(14, 4, seed=6)
        idx = np.array([1, 2, 5, 9, 13])
        out, w = attention.restricted_attention(q, k, v, 0.5, idx)
        ref_out, ref_w = oracles.naive_restricted_attention(q, k, v, 0.5, idx)
        assert np.max(np.abs(out - ref_out)) <= 1e-5
        assert np.max(np.abs(w - ref_w)) <= 1e-5

    def test_no_weight_flows_backward(self):
        q, k, v = random_qkv(12, 4, seed=7)
        idx = np.array([0, 4, 8, 11])
        _, w = attention.restricted_attention(q, k, v, 0.5, idx)
        assert np.all(w[np.triu_indices(4, k=1)] == 0.0)
        assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-6


class TestScoreStats:
    def test_accumulated_matches_oracle(self):
        q, k, _ = random_qkv(11, 4, seed=8)
        scores = attention.causal_scores(q, k, 0.5)
        acc = attention.accumulated_scores(scores)
        ref = oracles.accumulated_oracle(scores.scores)
        assert np.max(np.abs(acc - ref)) <= 1e-6

    def test_total_mass_equals_row_count(self):
        q, k, _ = random_qkv(20, 4, seed=9)
        stats = attention.score_stats(attention.causal_scores(q, k, 0.5))
        assert abs(stats.mass_total - 20.0) <= 1e-3 * 20

    def test_structural_nnz_full_matrix(self):
        q, k, _ = random_qkv(6, 3, seed=10)
        scores = attention.causal_scores(q, k, 0.5)
        # column j is visible to rows j..n-1
        assert attention.structural_nnz(scores).tolist() == [6, 5, 4, 3, 2, 1]

    def test_structural_nnz_subset_rows(self):
        q, k, _ = random_qkv(8, 3, seed=11)
        scores = attention.causal_scores(q, k, 0.5, row_positions=np.array([2, 5]))
        assert attention.structural_nnz(scores).tolist() == [2, 2, 2, 1, 1, 1, 0, 0]

    def test_normalized_divides_by_nnz_and_zeroes_unseen(self):
        q, k, _ = random_qkv(8, 3, seed=12)
        scores = attention.causal_scores(q, k, 0.5, row_positions=np.array([2, 5]))
        acc = attention.accumulated_scores(scores)
        norm = attention.normalized_scores(scores)
        nnz = attention.structural_nnz(scores)
        assert np.all(norm[nnz == 0] == 0.0)
        seen = nnz > 0
        assert np.allclose(norm[seen], acc[seen] / nnz[seen], atol=1e-7)

    def test_normalization_corrects_late_token_rank(self):
        # token 3 is seen by one row only, so its accumulated score loses to
        # token 0 even though every row that sees it rates it highest
        w = np.array(
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.6, 0.4, 0.0, 0.0],
                [0.5, 0.3, 0.2, 0.0],
                [0.05, 0.03, 0.02, 0.9],
            ],
            dtype=np.float32,
        )
        scores = attention.AttentionScores(
            scores=w, row_positions=np.arange(4), n_total=4
        )
        acc = attention.accumulated_scores(scores)
        norm = attention.normalized_scores(scores)
        assert numkit.topk_indices(acc, 1).tolist() == [0]
        assert numkit.topk_indices(norm, 1).tolist() == [3]


class TestProbeSet:
    def test_recent_block_always_present(self):
        probe = attention.select_probe_set(100, recent=10, random=5, seed=1)
        assert set(range(90, 100)) <= set(probe.indices.tolist())
        assert probe.indices.size == 15
        assert np.all(np.diff(probe.indices) > 0)

    def test_covers_everything_when_counts_exceed_n(self):
        probe = attention.select_probe_set(8, recent=64, random=64, seed=1)
        assert probe.indices.tolist() == list(range(8))

    def test_recent_plus_random_covering_exactly(self):
        probe = attention.select_probe_set(128, recent=64, random=64, seed=9)
        assert probe.indices.tolist() == list(range(128))

    def test_deterministic_in_seed(self):
        a = attention.select_probe_set(50, 5, 10, seed=3)
        b = attention.select_probe_set(50, 5, 10, seed=3)
        c = attention.select_probe_set(50, 5, 10, seed=4)
        assert np.array_equal(a.indices, b.indices)
        assert not np.array_equal(a.indices, c.indices)

    def test_domain_errors(self):
        with pytest.raises(EmptySequenceError):
            attention.select_probe_set(0, 1, 0, seed=0)
        with pytest.raises(DomainError):
            attention.select_probe_set(5, 0, 0, seed=0)
        with pytest.raises(DomainError):
            attention.select_probe_set(5, 1, -1, seed=0)

    @given(
        st.integers(1, 200),
        st.integers(1, 80),
        st.integers(0, 80),
        st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=100, deadline=None)
    def test_property_sorted_unique_in_range(self, n, recent, random, seed):
        probe = attention.select_probe_set(n, recent, random, seed)
        idx = probe.indices
        assert idx.size == min(recent, n) + min(random, max(0, n - min(recent, n)))
        assert np.all(np.diff(idx) > 0)
        assert idx.min() >= 0 and idx.max() < n
        n_recent = min(recent, n)
        assert idx[-n_recent:].tolist() == list(range(n - n_recent, n))


class TestProbeAttention:
    def test_probe_rows_equal_dense_rows(self):
        q, k, _ = random_qkv(40, 8, seed=13)
        probe = attention.select_probe_set(40, recent=6, random=6, seed=2)
        ps = attention.probe_attention(q, probe, k, 1.0 / np.sqrt(8))
        full = attention.causal_scores(q, k, 1.0 / np.sqrt(8))
        assert np.array_equal(ps.scores, full.scores[probe.indices])

    def test_probe_mass_equals_probe_row_count(self):
        q, k, _ = random_qkv(30, 4, seed=14)
        probe = attention.select_probe_set(30, recent=4, random=8, seed=5)
        stats = attention.score_stats(attention.probe_attention(q, probe, k, 0.5))
        assert abs(stats.mass_total - probe.indices.size) <= 1e-3 * probe.indices.size
