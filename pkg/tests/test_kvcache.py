"""Tests for KV retention, append ordering, mixed quantization, snapshots."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from zipvl import kvcache, numkit
from zipvl.budget import TokenPartition, partition_tokens
from zipvl.errors import BoundsError, DomainError, FormatError, OrderingError, ShapeError


def filled_cache(layers=2, heads=2, t=10, d=4, seed=0):
    rng = numkit.make_rng(seed)
    cache = kvcache.KVCache(layers, heads, d)
    for layer in range(layers):
        cache.set_layer(
            layer,
            rng.normal(size=(heads, t, d)).astype(np.float32),
            rng.normal(size=(heads, t, d)).astype(np.float32),
            np.arange(t, dtype=np.int64),
        )
    return cache


def make_partition(t, important):
    imp = np.asarray(sorted(important), dtype=np.int64)
    unimp = np.setdiff1d(np.arange(t, dtype=np.int64), imp)
    return TokenPartition(important=imp, unimportant=unimp)


class TestRetention:
    def test_retain_keeps_exactly_the_partition(self):
        cache = filled_cache(t=10)
        before_k = cache.keys[0].copy()
        part = make_partition(10, [0, 3, 7])
        cache.retain(0, part)
        assert cache.rows(0) == 3
        assert cache.positions[0].tolist() == [0, 3, 7]
        assert np.array_equal(cache.keys[0], before_k[:, [0, 3, 7], :])
        # other layer untouched
        assert cache.rows(1) == 10

    def test_retain_of_unknown_position_raises(self):
        cache = filled_cache(t=5)
        part = make_partition(5, [1, 2])
        cache.retain(0, part)
        with pytest.raises(BoundsError):
            cache.retain(0, make_partition(5, [3]))

    def test_set_layer_shape_checks(self):
        cache = kvcache.KVCache(1, 2, 4)
        with pytest.raises(ShapeError):
            cache.set_layer(
                0,
                np.zeros((2, 3, 5), dtype=np.float32),
                np.zeros((2, 3, 5), dtype=np.float32),
                np.arange(3),
            )

    def test_layer_index_bounds(self):
        cache = filled_cache(layers=2)
        with pytest.raises(BoundsError):
            cache.rows(2)


class TestAppend:
    def test_append_extends_all_layers_one_by_one(self):
        cache = filled_cache(layers=2, heads=2, t=4, d=4)
        k = np.ones((2, 4), dtype=np.float32)
        v = 2 * np.ones((2, 4), dtype=np.float32)
        for layer in range(2):
            cache.append(layer, k, v, position=4)
        assert cache.rows(0) == 5 and cache.rows(1) == 5
        assert cache.positions[0][-1] == 4
        assert np.array_equal(cache.keys[0][:, -1, :], k)

    def test_append_after_eviction_keeps_gap(self):
        cache = filled_cache(layers=1, t=6)
        cache.retain(0, make_partition(6, [0, 5]))
        cache.append(0, np.zeros((2, 4), np.float32), np.zeros((2, 4), np.float32), 6)
        assert cache.positions[0].tolist() == [0, 5, 6]

    def test_append_position_must_advance(self):
        cache = filled_cache(layers=1, t=4)
        with pytest.raises(OrderingError):
            cache.append(0, np.zeros((2, 4), np.float32), np.zeros((2, 4), np.float32), 3)
        with pytest.raises(OrderingError):
            cache.append(0, np.zeros((2, 4), np.float32), np.zeros((2, 4), np.float32), 1)

    def test_appended_rows_never_evicted_by_later_retain(self):
        cache = filled_cache(layers=1, t=4)
        cache.append(0, np.ones((2, 4), np.float32), np.ones((2, 4), np.float32), 4)
        # retention is a prefill-time operation; decode rows stay unless the
        # partition explicitly includes their positions
        part = make_partition(5, [0, 4])
        cache.retain(0, part)
        assert cache.positions[0].tolist() == [0, 4]


class TestQuantization:
    def test_roundtrip_error_within_half_step(self):
        cache = filled_cache(layers=2, heads=2, t=16, d=8, seed=3)
        part = make_partition(16, range(8))
        group = 4
        q = kvcache.quantize_mixed(cache, part, group_size=group)
        restored = kvcache.dequantize(q)
        for layer in range(2):
            for name in ("keys", "values"):
                orig = getattr(cache, name)[layer]
                back = getattr(restored, name)[layer]
                imp_err = np.max(np.abs(orig[:, :8] - back[:, :8]))
                unimp_err = np.max(np.abs(orig[:, 8:] - back[:, 8:]))
                assert imp_err <= oracles.group_quantization_bound(orig[:, :8], 4, group) + 1e-6
                assert unimp_err <= oracles.group_quantization_bound(orig[:, 8:], 2, group) + 1e-6

    def test_important_rows_get_finer_grid(self):
        cache = filled_cache(layers=1, heads=1, t=32, d=16, seed=4)
        part = make_partition(32, range(16))
        q = kvcache.quantize_mixed(cache, part, group_size=16)
        restored = kvcache.dequantize(q)
        err = np.abs(cache.keys[0] - restored.keys[0])
        assert err[:, :16].max() < err[:, 16:].max()

    def test_bits_follow_partition(self):
        cache = filled_cache(layers=1, t=6)
        part = make_partition(6, [1, 4])
        q = kvcache.quantize_mixed(cache, part, group_size=4)
        assert q.layers[0].bits_per_row.tolist() == [2, 4, 2, 2, 4, 2]

    def test_constant_group_is_exact(self):
        cache = kvcache.KVCache(1, 1, 4)
        k = np.full((1, 3, 4), 7.5, dtype=np.float32)
        cache.set_layer(0, k, k.copy(), np.arange(3))
        q = kvcache.quantize_mixed(cache, make_partition(3, [0]), group_size=4)
        restored = kvcache.dequantize(q)
        assert np.array_equal(restored.keys[0], k)
        assert np.array_equal(restored.values[0], k)

    def test_group_size_validation(self):
        cache = filled_cache(layers=1)
        with pytest.raises(DomainError):
            kvcache.quantize_mixed(cache, make_partition(10, [0]), group_size=0)

    def test_memory_shrinks_and_is_positive(self):
        cache = filled_cache(layers=2, heads=2, t=64, d=32, seed=5)
        part = make_partition(64, range(16))
        q = kvcache.quantize_mixed(cache, part, group_size=32)
        dense_bytes = kvcache.memory_bytes(cache)
        q_bytes = kvcache.memory_bytes(q)
        assert 0 < q_bytes < dense_bytes
        assert q_bytes == sum(kvcache.layer_memory_bytes(q, i) for i in range(2))

    @given(
        st.integers(1, 3),
        st.integers(1, 24),
        st.integers(1, 12),
        st.integers(1, 16),
        st.integers(0, 2**32 - 1),
        st.data(),
    )
    @settings(max_examples=40, deadline=None)
    def test_property_bound_holds(self, heads, t, d, group, seed, data):
        rng = numkit.make_rng(seed)
        cache = kvcache.KVCache(1, heads, d)
        cache.set_layer(
            0,
            (rng.normal(size=(heads, t, d)) * 3).astype(np.float32),
            (rng.normal(size=(heads, t, d)) * 3).astype(np.float32),
            np.arange(t, dtype=np.int64),
        )
        p = data.draw(st.integers(1, t))
        part = make_partition(t, range(p))
        q = kvcache.quantize_mixed(cache, part, group_size=group)
        restored = kvcache.dequantize(q)
        g = min(group, d)
        for name in ("keys", "values"):
            orig = getattr(cache, name)[0]
            back = getattr(restored, name)[0]
            for rows, bits in ((range(p), 4), (range(p, t), 2)):
                rows = list(rows)
                if not rows:
                    continue
                err = np.max(np.abs(orig[:, rows] - back[:, rows]))
                assert err <= oracles.group_quantization_bound(orig[:, rows], bits, g) + 1e-6


class TestSnapshot:
    def test_roundtrip_bitwise(self, tmp_path):
        cache = filled_cache(layers=3, heads=2, t=12, d=8, seed=6)
        cache.retain(1, make_partition(12, [2, 5, 9]))
        path = tmp_path / "cache.bin"
        kvcache.save_snapshot(cache, path)
        back = kvcache.load_snapshot(path)
        assert back.num_layers == 3 and back.heads == 2 and back.d_head == 8
        for layer in range(3):
            assert np.array_equal(back.keys[layer], cache.keys[layer])
            assert np.array_equal(back.values[layer], cache.values[layer])
            assert np.array_equal(back.positions[layer], cache.positions[layer])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            kvcache.load_snapshot(path)

    def test_truncated(self, tmp_path):
        cache = filled_cache()
        path = tmp_path / "cache.bin"
        kvcache.save_snapshot(cache, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            kvcache.load_snapshot(path)

    def test_trailing_garbage(self, tmp_path):
        cache = filled_cache()
        path = tmp_path / "cache.bin"
        kvcache.save_snapshot(cache, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            kvcache.load_snapshot(path)
