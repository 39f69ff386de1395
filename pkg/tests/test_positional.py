import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tnllm.numerics import ShapeError, make_rng
from tnllm.positional import (DecaySchedule, LrpeParams, apply_lrpe, build_decay_mask,
                              check_decay, decay_rate, decay_tile, init_theta, lrpe_backward)


def rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


class TestDecaySchedule:
    def test_last_layer_is_one(self):
        sched = DecaySchedule(8, 24)
        for h in range(1, 9):
            assert decay_rate(sched, h, 24) == 1.0

    def test_spot_values(self):
        sched = DecaySchedule(8, 24)
        assert_allclose(decay_rate(sched, 4, 12), math.exp(-2.0), rtol=1e-15)
        assert_allclose(decay_rate(sched, 8, 12), math.exp(-4.0), rtol=1e-15)
        assert abs(decay_rate(sched, 4, 12) - 0.135335) < 1e-6
        assert abs(decay_rate(sched, 8, 12) - 0.018316) < 1e-6

    def test_without_temperature(self):
        sched = DecaySchedule(4, 6, use_temperature=False)
        for l in range(1, 7):
            assert_allclose(decay_rate(sched, 2, l), math.exp(-4.0), rtol=1e-15)

    @pytest.mark.parametrize("h,l", [(0, 1), (9, 1), (1, 0), (1, 25)])
    def test_out_of_range(self, h, l):
        with pytest.raises(IndexError):
            decay_rate(DecaySchedule(8, 24), h, l)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            DecaySchedule(0, 3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 32))
    def test_monotonicity(self, heads, layers):
        sched = DecaySchedule(heads, layers)
        rates = np.array([[sched.rate(h, l) for l in range(1, layers + 1)]
                          for h in range(1, heads + 1)])
        assert np.all(rates > 0) and np.all(rates <= 1)
        assert np.all(np.diff(rates, axis=1) >= 0)
        if heads > 1:
            assert np.all(np.diff(rates[:, :-1], axis=0) < 0)

    def test_layer_rates(self):
        sched = DecaySchedule(4, 3)
        assert_array_equal(sched.layer_rates(2), [sched.rate(h, 2) for h in range(1, 5)])


class TestMask:
    def test_lambda_one(self):
        assert_array_equal(build_decay_mask(3, 1.0), np.tril(np.ones((3, 3))))

    def test_lambda_half(self):
        assert_allclose(build_decay_mask(3, 0.5), [[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]],
                        rtol=1e-15)

    def test_single(self):
        assert_array_equal(build_decay_mask(1, 0.3), [[1.0]])

    @pytest.mark.parametrize("lam", [0.0, -0.1, 1.5, float("nan")])
    def test_bad_lambda(self, lam):
        with pytest.raises(ValueError):
            build_decay_mask(4, lam)

    def test_bad_length(self):
        with pytest.raises(ValueError):
            build_decay_mask(0, 0.5)

    def test_separable(self):
        lam, n = 0.83, 9
        m = build_decay_mask(n, lam)
        for s in range(n):
            for t in range(s + 1):
                assert_allclose(m[s, t], lam**s * lam**(-t), rtol=1e-12)
            for t in range(s + 1, n):
                assert m[s, t] == 0

    def test_stacked_per_head(self):
        lam = np.array([1.0, 0.5, 0.25])
        m = build_decay_mask(5, lam)
        assert m.shape == (3, 5, 5)
        for i, l in enumerate(lam):
            assert_allclose(m[i], build_decay_mask(5, l), rtol=1e-15)

    def test_tiles_assemble_the_mask(self):
        lam, n = 0.7, 11
        full = build_decay_mask(n, lam)
        for r0 in range(0, n, 4):
            for c0 in range(0, n, 3):
                nr, nc = min(4, n - r0), min(3, n - c0)
                tile = decay_tile(r0, nr, c0, nc, math.log(lam))
                assert_allclose(tile, full[r0:r0 + nr, c0:c0 + nc], rtol=1e-14)

    def test_check_decay(self):
        assert check_decay(0.5) == 0.5
        with pytest.raises(ValueError):
            check_decay([0.5, 0.0])


class TestLrpe:
    def test_zero_theta_identity(self):
        x = make_rng(0).standard_normal((6, 8))
        assert_array_equal(apply_lrpe(x, np.zeros(4)), x)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 1000), st.integers(0, 2**31 - 1))
    def test_norm_preserved(self, n, pairs, offset, seed):
        rng = make_rng(seed)
        x = rng.standard_normal((n, 2 * pairs))
        y = apply_lrpe(x, rng.uniform(-3, 3, pairs), offset)
        assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)

    def test_quarter_turn(self):
        theta = np.array([math.pi / 2])
        q = apply_lrpe(np.array([[1.0, 0.0]]), theta, position_offset=1)
        k = apply_lrpe(np.array([[1.0, 0.0]]), theta, position_offset=0)
        assert abs(float(q[0] @ k[0])) < 1e-15

    def test_relative_position_exhaustive(self):
        rng = make_rng(1)
        theta = np.array([0.37])
        q, k = rng.standard_normal(2), rng.standard_normal(2)
        for s in range(8):
            for t in range(8):
                qs = apply_lrpe(q[None], theta, s)[0]
                kt = apply_lrpe(k[None], theta, t)[0]
                expected = q @ rotation(theta[0] * (s - t)).T @ k
                assert_allclose(qs @ kt, expected, rtol=1e-12, atol=1e-14)

    def test_rows_use_offset(self):
        rng = make_rng(2)
        x = rng.standard_normal((5, 4))
        theta = rng.uniform(0, 1, 2)
        full = apply_lrpe(x, theta, 3)
        for r in range(5):
            assert_allclose(full[r], apply_lrpe(x[r:r + 1], theta, 3 + r)[0], rtol=1e-14)

    def test_pair_rotation_oracle(self):
        x = np.array([[1.0, 2.0, 3.0, 4.0]] * 3)
        theta = np.array([0.2, 1.1])
        y = apply_lrpe(x, theta)
        for p in range(3):
            assert_allclose(y[p, :2], rotation(0.2 * p) @ x[p, :2], rtol=1e-14)
            assert_allclose(y[p, 2:], rotation(1.1 * p) @ x[p, 2:], rtol=1e-14)

    def test_per_head_theta_broadcast(self):
        rng = make_rng(3)
        x = rng.standard_normal((2, 3, 5, 4))
        theta = rng.uniform(0, 1, (3, 2))
        y = apply_lrpe(x, theta)
        for h in range(3):
            assert_allclose(y[:, h], apply_lrpe(x[:, h], theta[h]), rtol=1e-14)

    def test_odd_dim(self):
        with pytest.raises(ShapeError):
            apply_lrpe(np.ones((2, 3)), np.ones(1))

    def test_theta_size_mismatch(self):
        with pytest.raises(ShapeError):
            apply_lrpe(np.ones((2, 4)), np.ones(3))

    def test_init_ladder(self):
        theta = init_theta(8)
        assert_allclose(theta, [10000 ** (-2 * j / 8) for j in range(4)], rtol=1e-15)
        assert init_theta(8, 3).shape == (3, 4)
        assert LrpeParams.init(6).head_dim == 6
        with pytest.raises(ValueError):
            init_theta(5)

    def test_backward_finite_differences(self):
        rng = make_rng(4)
        x = rng.standard_normal((2, 6, 4))
        theta = rng.uniform(0, 1, (2, 2))
        w = rng.standard_normal((2, 6, 4))
        y = apply_lrpe(x, theta, 2)
        dx, dtheta = lrpe_backward(w, y, theta, 2)
        h = 1e-6
        for arr, grad in ((x, dx), (theta, dtheta)):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                hi = np.sum(apply_lrpe(x, theta, 2) * w)
                flat[i] = keep - h
                lo = np.sum(apply_lrpe(x, theta, 2) * w)
                flat[i] = keep
                assert_allclose(gflat[i], (hi - lo) / (2 * h), rtol=1e-5, atol=1e-7)
