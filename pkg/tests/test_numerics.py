import io
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tnllm.numerics import (MemoryTracker, ShapeError, decode_tensor, elementwise, elu,
                            encode_tensor, l2_norm_lastdim, load_tensor, make_rng, matmul, normal,
                            one_plus_elu, resolve_dtype, save_tensor, sigmoid, sum_to_shape, swish,
                            uniform)


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = make_rng(0).standard_normal((3, 3))
        assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_example(self):
        assert_array_equal(matmul(np.array([[1, 2], [3, 4]]), np.array([[1], [1]])), [[3], [7]])

    def test_against_triple_loop(self):
        rng = make_rng(1)
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        assert_allclose(matmul(a, b), triple_loop_matmul(a, b), rtol=1e-12, atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(np.ones((2, 3)), np.ones((4, 5)))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_vector_rejected(self):
        with pytest.raises(ShapeError):
            matmul(np.ones(3), np.ones((3, 1)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
           st.integers(0, 2**31 - 1))
    def test_associativity(self, m, k, n, p, seed):
        rng = make_rng(seed)
        a, b, c = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal((n, p))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-6 * max(1.0, np.max(np.abs(right)))

    def test_deterministic(self):
        rng = make_rng(2)
        a, b = rng.standard_normal((33, 17)).astype(np.float32), rng.standard_normal((17, 9)).astype(np.float32)
        assert_array_equal(matmul(a, b), matmul(a, b))


class TestElementwise:
    def test_one_plus_elu_at_zero(self):
        assert one_plus_elu(np.array(0.0)) == 1.0

    def test_one_plus_elu_negative_limit(self):
        val = one_plus_elu(np.array(-20.0))
        assert 0 < val < 1e-8

    def test_swish_at_one(self):
        assert_allclose(swish(np.array(1.0)), 1.0 / (1.0 + math.exp(-1.0)), rtol=1e-15)
        assert_allclose(swish(np.array(1.0)), 0.731059, atol=1e-6)

    def test_elu_pieces(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
        expected = [math.exp(-2.0) - 1, math.exp(-0.5) - 1, 0.0, 0.5, 3.0]
        assert_allclose(elu(x), expected, rtol=1e-15)

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert_array_equal(out, [0.0, 0.5, 1.0])

    @pytest.mark.parametrize("op", ["elu", "one_plus_elu", "swish", "sigmoid"])
    def test_unary_preserves_shape(self, op):
        x = make_rng(3).standard_normal((2, 3, 4))
        assert elementwise(op, x).shape == x.shape

    def test_binary_ops(self):
        a, b = np.arange(6.0).reshape(2, 3), np.ones((2, 3)) * 2
        assert_array_equal(elementwise("add", a, b), a + 2)
        assert_array_equal(elementwise("mul", a, b), a * 2)
        assert_array_equal(elementwise("scale", a, 0.5), a / 2)

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise("add", np.ones((2, 3)), np.ones((3, 2)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("tanh", np.ones(2))

    def test_scale_needs_scalar(self):
        with pytest.raises(ValueError):
            elementwise("scale", np.ones(2), np.ones(2))


class TestNorm:
    def test_ones(self):
        assert_array_equal(l2_norm_lastdim(np.ones(4)), [2.0])

    def test_pythagorean(self):
        assert_array_equal(l2_norm_lastdim(np.array([3.0, 4.0])), [5.0])

    def test_zero_vector(self):
        assert_array_equal(l2_norm_lastdim(np.zeros(5)), [0.0])

    def test_scalar_loop_oracle(self):
        x = make_rng(4).standard_normal(16)
        acc = 0.0
        for v in x:
            acc += v * v
        assert_allclose(l2_norm_lastdim(x)[0], math.sqrt(acc), rtol=1e-14)

    def test_keeps_axis(self):
        assert l2_norm_lastdim(np.ones((3, 5, 7))).shape == (3, 5, 1)

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            l2_norm_lastdim(np.ones((3, 0)))


def test_sum_to_shape():
    g = np.ones((2, 3, 4))
    assert_array_equal(sum_to_shape(g, (4,)), np.full(4, 6.0))
    assert_array_equal(sum_to_shape(g, (3, 1)), np.full((3, 1), 8.0))


class TestRandom:
    def test_seeded_normal_reproducible(self):
        a = normal(make_rng(5), (4, 4), 0.02)
        b = normal(make_rng(5), (4, 4), 0.02)
        assert_array_equal(a, b)

    def test_dtype_switch(self):
        assert normal(make_rng(0), (2,), dtype="float32").dtype == np.float32
        assert uniform(make_rng(0), (2,), dtype="float64").dtype == np.float64

    def test_uniform_bounds(self):
        u = uniform(make_rng(6), (1000,), -0.5, 0.25)
        assert u.min() >= -0.5 and u.max() < 0.25

    def test_resolve_dtype(self):
        assert resolve_dtype("float32") == np.float32
        with pytest.raises(ValueError):
            resolve_dtype("float16")


class TestTracker:
    def test_peak_and_current(self):
        tr = MemoryTracker()
        tr.alloc(100)
        tr.alloc(50)
        tr.free(100)
        tr.alloc(20)
        assert (tr.current, tr.peak) == (70, 150)
        tr.reset()
        assert (tr.current, tr.peak) == (0, 0)

    def test_track_returns_array(self):
        tr = MemoryTracker()
        arr = np.zeros(10)
        assert tr.track(arr) is arr
        assert tr.peak == 80

    def test_threaded_counts(self):
        tr = MemoryTracker()

        def work():
            for _ in range(1000):
                tr.alloc(3)

        threads = [threading.Thread(target=work) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert tr.current == 12000


class TestTensorFormat:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64, np.int32])
    def test_round_trip(self, dtype):
        arr = (make_rng(7).standard_normal((3, 4, 2)) * 100).astype(dtype)
        back, end = decode_tensor(encode_tensor(arr))
        assert back.dtype == arr.dtype
        assert_array_equal(back, arr)
        assert end == len(encode_tensor(arr))

    def test_layout(self):
        blob = encode_tensor(np.array([[1.0, 2.0]], dtype=np.float32))
        assert blob[:4] == b"TNSR"
        assert blob[4] == 1 and blob[5] == 2
        assert int.from_bytes(blob[6:14], "little") == 1
        assert int.from_bytes(blob[14:22], "little") == 2
        assert np.frombuffer(blob[22:], "<f4").tolist() == [1.0, 2.0]

    def test_scalar(self):
        back, _ = decode_tensor(encode_tensor(np.float64(2.5)))
        assert back.shape == () and back == 2.5

    def test_file_and_stream(self, tmp_path):
        arr = np.arange(12, dtype=np.int64).reshape(3, 4)
        save_tensor(tmp_path / "t.bin", arr)
        assert_array_equal(load_tensor(tmp_path / "t.bin"), arr)
        buf = io.BytesIO()
        save_tensor(buf, arr)
        buf.seek(0)
        assert_array_equal(load_tensor(buf), arr)

    def test_bad_magic(self):
        blob = bytearray(encode_tensor(np.ones(2)))
        blob[0:4] = b"XXXX"
        with pytest.raises(ValueError, match="magic"):
            decode_tensor(bytes(blob))

    def test_truncated(self):
        with pytest.raises(ValueError, match="truncated"):
            decode_tensor(encode_tensor(np.ones(8))[:-3])

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(encode_tensor(np.ones(2)) + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            load_tensor(tmp_path / "t.bin")

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            encode_tensor(np.ones(2, dtype=np.complex128))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
    def test_round_trip_property(self, shape, seed):
        arr = make_rng(seed).standard_normal(shape)
        back, _ = decode_tensor(encode_tensor(arr))
        assert_array_equal(back, arr)
        assert back.shape == tuple(shape)
