import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tnllm import attention
from tnllm.attention import (BlockConfig, KernelStats, last_stats, lightning_backward,
                             lightning_forward, reference_backward, reference_forward,
                             right_product_forward, softmax_backward, softmax_forward)
from tnllm.numerics import MemoryTracker, ShapeError, make_rng


def scalar_attention(q, k, v, lam):
    n, d = q.shape
    out = np.zeros_like(v)
    for s in range(n):
        for t in range(s + 1):
            score = 0.0
            for i in range(d):
                score += q[s, i] * k[t, i]
            weight = score * lam ** (s - t)
            for j in range(v.shape[1]):
                out[s, j] += weight * v[t, j]
    return out


def qkv(seed, n, d, lead=()):
    rng = make_rng(seed)
    return tuple(rng.standard_normal(lead + (n, d)) for _ in range(3))


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestReference:
    def test_single_token(self):
        q, k, v = np.array([[2.0, 1.0]]), np.array([[0.5, 3.0]]), np.array([[1.0, -1.0]])
        assert_allclose(reference_forward(q, k, v, 0.3), [[4.0, -4.0]])

    def test_hand_two_by_two(self):
        ones = np.ones((2, 1))
        assert_allclose(reference_forward(ones, ones, ones, 1.0), [[1.0], [2.0]])

    def test_scalar_loop_oracle(self):
        q, k, v = qkv(0, 64, 4)
        assert rel(reference_forward(q, k, v, 0.9), scalar_attention(q, k, v, 0.9)) <= 1e-10

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            reference_forward(np.ones((3, 2)), np.ones((3, 3)), np.ones((3, 2)), 1.0)
        with pytest.raises(ShapeError):
            reference_backward(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)), 1.0, np.ones((2, 2)))

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            reference_forward(*qkv(0, 3, 2), 1.2)


class TestRightProduct:
    def test_equals_full_mask(self):
        q, k, v = qkv(1, 32, 8)
        assert_allclose(right_product_forward(q, k, v), (q @ k.T) @ v, rtol=1e-10)

    def test_single_token(self):
        q, k, v = qkv(2, 1, 3)
        assert_allclose(right_product_forward(q, k, v), reference_forward(q, k, v, 0.5), rtol=1e-14)


class TestLightningForward:
    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    def test_single_tile_matches_reference(self, schedule):
        q, k, v = qkv(3, 20, 4)
        out = lightning_forward(q, k, v, 0.9, BlockConfig(20, 20, schedule))
        assert rel(out, reference_forward(q, k, v, 0.9)) <= 1e-14

    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    def test_sixteen_tiles(self, schedule):
        q, k, v = qkv(4, 64, 16)
        out = lightning_forward(q, k, v, 0.9, BlockConfig(16, 16, schedule))
        assert rel(out, reference_forward(q, k, v, 0.9)) <= 1e-6

    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    def test_ragged_tail(self, schedule):
        q, k, v = qkv(5, 5, 3)
        out = lightning_forward(q, k, v, 0.7, BlockConfig(2, 2, schedule))
        assert rel(out, reference_forward(q, k, v, 0.7)) <= 1e-12

    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    @pytest.mark.parametrize("br,bc", [(1, 7), (7, 1), (3, 5), (8, 3), (64, 2)])
    def test_unequal_tiles(self, schedule, br, bc):
        q, k, v = qkv(6, 29, 4)
        out = lightning_forward(q, k, v, 0.8, BlockConfig(br, bc, schedule))
        assert rel(out, reference_forward(q, k, v, 0.8)) <= 1e-12

    def test_per_head_decay_and_batch(self):
        q, k, v = qkv(7, 19, 4, (2, 3))
        lam = np.array([1.0, 0.6, 0.1])
        ref = reference_forward(q, k, v, lam)
        for schedule in attention.SCHEDULES:
            assert rel(lightning_forward(q, k, v, lam, BlockConfig(4, 4, schedule)), ref) <= 1e-12

    def test_strong_decay_long_sequence_finite(self):
        q, k, v = qkv(8, 600, 2)
        out = lightning_forward(q, k, v, 0.05, BlockConfig(64, 64))
        assert np.all(np.isfinite(out))
        assert rel(out, reference_forward(q, k, v, 0.05)) <= 1e-12

    def test_bad_tiles(self):
        with pytest.raises(ValueError):
            BlockConfig(0, 4)
        with pytest.raises(ValueError):
            BlockConfig(4, 4, "diagonal")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 12), st.integers(1, 12),
           st.sampled_from([1.0, 0.95, 0.5, 0.1]), st.sampled_from(attention.SCHEDULES),
           st.integers(0, 2**31 - 1))
    def test_tiling_invariance(self, n, d, br, bc, lam, schedule, seed):
        q, k, v = qkv(seed, n, d)
        do = make_rng(seed + 1).standard_normal((n, d))
        cfg = BlockConfig(br, bc, schedule)
        ref = reference_forward(q, k, v, lam)
        assert rel(lightning_forward(q, k, v, lam, cfg), ref) <= 1e-6
        got = lightning_backward(q, k, v, lam, do, cfg)
        want = reference_backward(q, k, v, lam, do)
        for g, w in zip(got, want):
            assert rel(g, w) <= 1e-6

    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    def test_causality(self, schedule):
        q, k, v = qkv(9, 24, 4)
        cfg = BlockConfig(5, 5, schedule)
        base = lightning_forward(q, k, v, 0.9, cfg)
        t = 13
        k2, v2 = k.copy(), v.copy()
        k2[t] += 10.0
        v2[t] -= 7.0
        ref_out = reference_forward(q, k2, v2, 0.9)
        assert_array_equal(ref_out[:t], reference_forward(q, k, v, 0.9)[:t])
        out = lightning_forward(q, k2, v2, 0.9, cfg)
        assert np.max(np.abs(out[:t] - base[:t])) <= 1e-12
        assert np.max(np.abs(out[t:] - base[t:])) > 0

    @pytest.mark.parametrize("n,br,bc", [(10, 3, 3), (16, 4, 8), (17, 8, 4), (9, 2, 5)])
    def test_tiled_work_skipping(self, n, br, bc):
        q, k, v = qkv(10, n, 2)
        stats = KernelStats()
        lightning_forward(q, k, v, 0.9, BlockConfig(br, bc, "tiled"), stats=stats)
        touching = sum(1 for r0 in range(0, n, br) for c0 in range(0, n, bc)
                       if c0 <= min(r0 + br, n) - 1)
        assert stats.tiles_computed == touching
        assert stats.tiles_computed < math.ceil(n / br) * math.ceil(n / bc)
        full = KernelStats()
        lightning_forward(q, k, v, 0.9, BlockConfig(br, bc, "tiled", skip_upper=False), stats=full)
        assert full.tiles_computed == math.ceil(n / br) * math.ceil(n / bc)

    def test_state_schedule_only_diagonal_tiles(self):
        q, k, v = qkv(11, 64, 2)
        stats = KernelStats()
        lightning_forward(q, k, v, 0.9, BlockConfig(16, 16), stats=stats)
        assert stats.tiles_computed == 4
        assert stats.state_updates == 3

    def test_counters_and_last_stats(self):
        q, k, v = qkv(12, 32, 4)
        lightning_forward(q, k, v, 0.9, BlockConfig(8, 8))
        s = last_stats().as_dict()
        assert s["tiles_computed"] == 4
        assert s["bytes_staged"] == 3 * 32 * 4 * 8
        assert s["peak_scratch_bytes"] > 0 and s["scratch_bytes"] == 0

    def test_threaded_rows_bitwise_equal(self):
        q, k, v = qkv(13, 200, 8)
        cfg = BlockConfig(16, 16, "tiled")
        one = lightning_forward(q, k, v, 0.9, cfg, threads=1)
        four = lightning_forward(q, k, v, 0.9, cfg, threads=4)
        assert_array_equal(one, four)

    def test_memory_linear_vs_quadratic(self):
        peaks = {}
        for n in (256, 512):
            q, k, v = qkv(14, n, 8)
            for name, fn in (("ref", lambda t: reference_forward(q, k, v, 0.9, t)),
                             ("light", lambda t: lightning_forward(q, k, v, 0.9, BlockConfig(32, 32),
                                                                   tracker=t))):
                tr = MemoryTracker()
                fn(tr)
                peaks[name, n] = tr.peak
        assert peaks["ref", 512] / peaks["ref", 256] > 3.5
        assert peaks["light", 512] / peaks["light", 256] < 2.2


class TestLightningBackward:
    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    def test_zero_cotangent(self, schedule):
        q, k, v = qkv(15, 9, 3)
        grads = lightning_backward(q, k, v, 0.8, np.zeros((9, 3)), BlockConfig(4, 4, schedule))
        for g in grads:
            assert_array_equal(g, 0)

    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    def test_finite_differences(self, schedule):
        q, k, v = qkv(16, 8, 4)
        w = make_rng(17).standard_normal((8, 4))
        grads = lightning_backward(q, k, v, 0.9, w, BlockConfig(3, 3, schedule))
        h = 1e-6
        for x, g in zip((q, k, v), grads):
            fd = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                keep = x[idx]
                x[idx] = keep + h
                hi = np.sum(reference_forward(q, k, v, 0.9) * w)
                x[idx] = keep - h
                lo = np.sum(reference_forward(q, k, v, 0.9) * w)
                x[idx] = keep
                fd[idx] = (hi - lo) / (2 * h)
            assert rel(g, fd) <= 1e-5

    @pytest.mark.parametrize("schedule", attention.SCHEDULES)
    def test_single_tile_equals_unblocked(self, schedule):
        q, k, v = qkv(18, 12, 4)
        do = make_rng(19).standard_normal((12, 4))
        got = lightning_backward(q, k, v, 0.7, do, BlockConfig(12, 12, schedule))
        want = reference_backward(q, k, v, 0.7, do)
        for g, w in zip(got, want):
            assert rel(g, w) <= 1e-12

    def test_per_head(self):
        q, k, v = qkv(20, 21, 4, (3,))
        do = make_rng(21).standard_normal((3, 21, 4))
        lam = np.array([0.99, 0.5, 0.2])
        want = reference_backward(q, k, v, lam, do)
        for schedule in attention.SCHEDULES:
            got = lightning_backward(q, k, v, lam, do, BlockConfig(5, 3, schedule))
            for g, w in zip(got, want):
                assert rel(g, w) <= 1e-12

    def test_shape_mismatch(self):
        q, k, v = qkv(22, 4, 2)
        with pytest.raises(ShapeError):
            lightning_backward(q, k, v, 1.0, np.ones((4, 3)))


class TestSoftmax:
    def test_rows_sum_to_one_and_causal(self):
        q, k, v = qkv(23, 10, 4)
        out, probs = softmax_forward(q, k, v)
        assert_allclose(probs.sum(axis=-1), 1.0, rtol=1e-14)
        assert_array_equal(np.triu(probs, 1), 0)
        assert_allclose(out, probs @ v, rtol=1e-14)

    def test_backward_finite_differences(self):
        q, k, v = qkv(24, 6, 3)
        w = make_rng(25).standard_normal((6, 3))
        _, probs = softmax_forward(q, k, v)
        grads = softmax_backward(q, k, v, probs, w)
        h = 1e-6
        for x, g in zip((q, k, v), grads):
            fd = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                keep = x[idx]
                x[idx] = keep + h
                hi = np.sum(softmax_forward(q, k, v)[0] * w)
                x[idx] = keep - h
                lo = np.sum(softmax_forward(q, k, v)[0] * w)
                x[idx] = keep
                fd[idx] = (hi - lo) / (2 * h)
            assert rel(g, fd) <= 1e-5
