import io
import struct

import numpy as np
import pytest

from lsnn import tensor as T


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), [[3.0], [4.0]])
        np.testing.assert_array_equal(out, [[3.0], [4.0]])

    def test_projector(self):
        out = T.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(out, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        expected = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(T.matmul(a, b) - expected)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.normal(size=(4, 6))
            b = rng.normal(size=(6, 3))
            c = rng.normal(size=(3, 5))
            left = T.matmul(T.matmul(a, b), c)
            right = T.matmul(a, T.matmul(b, c))
            denom = np.maximum(np.abs(left), 1.0)
            assert np.max(np.abs(left - right) / denom) < 1e-9

    def test_inputs_unmodified(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(12.0).reshape(3, 4)
        ac, bc = a.copy(), b.copy()
        T.matmul(a, b)
        np.testing.assert_array_equal(a, ac)
        np.testing.assert_array_equal(b, bc)


class TestElementwise:
    def test_exp_of_zeros(self):
        np.testing.assert_array_equal(T.exp(np.zeros((2, 3))), np.ones((2, 3)))

    def test_add_zero(self):
        x = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(T.add(x, np.zeros((3, 3))), x)

    def test_mul_against_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        expected = np.array([[a[i, j] * b[i, j] for j in range(3)] for i in range(3)])
        np.testing.assert_array_equal(T.mul(a, b), expected)

    def test_scalar_broadcast(self):
        np.testing.assert_array_equal(T.add(np.ones(3), 2.0), np.full(3, 3.0))
        np.testing.assert_array_equal(T.scale(np.ones(3), -1.5), np.full(3, -1.5))

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(np.ones(3), np.ones(4))

    def test_exp_clamped(self):
        out = T.exp(np.array([1000.0, -1000.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == np.exp(700.0)
        assert out[1] == np.exp(-700.0)

    def test_nan_rejected(self):
        with pytest.raises(FloatingPointError):
            T.add(np.array([np.nan]), np.array([1.0]))


class TestReduce:
    def test_sum(self):
        assert T.reduce_sum(np.array([1.0, 2.0, 3.0])) == 6.0

    def test_argmax_tie_lowest(self):
        assert T.argmax(np.array([0.0, 5.0, 5.0])) == 1

    def test_sum_against_loop(self):
        rng = np.random.default_rng(2)
        t = rng.normal(size=(4, 4))
        expected = [sum(t[i, j] for i in range(4)) for j in range(4)]
        np.testing.assert_allclose(T.reduce_sum(t, axis=0), expected, rtol=1e-15)

    def test_max_axis(self):
        t = np.array([[1.0, 9.0], [3.0, 2.0]])
        np.testing.assert_array_equal(T.reduce_max(t, axis=1), [9.0, 3.0])

    def test_empty_axis(self):
        with pytest.raises(ValueError):
            T.reduce_sum(np.zeros((0,)), axis=0)

    def test_bad_axis(self):
        with pytest.raises(T.ShapeError):
            T.reduce_sum(np.zeros((2, 2)), axis=5)


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for shape in [(4,), (2, 3), (2, 3, 4), (1, 1)]:
            t = rng.normal(size=shape)
            buf = io.BytesIO()
            T.write_tensor(buf, t)
            buf.seek(0)
            back = T.read_tensor(buf)
            assert back.shape == t.shape
            np.testing.assert_array_equal(back, np.asarray(t))

    def test_exact_byte_layout(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.array([[1.0, 2.0]]))
        raw = buf.getvalue()
        assert raw[:4] == b"LSTN"
        assert raw[4] == 2  # rank
        assert struct.unpack("<II", raw[5:13]) == (1, 2)
        assert struct.unpack("<dd", raw[13:]) == (1.0, 2.0)

    def test_streaming_multiple(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.ones(2))
        T.write_tensor(buf, np.zeros((2, 2)))
        buf.seek(0)
        assert T.read_tensor(buf).shape == (2,)
        assert T.read_tensor(buf).shape == (2, 2)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            T.read_tensor(io.BytesIO(b"XXXX" + b"\x00" * 16))

    def test_truncated(self):
        buf = io.BytesIO()
        T.write_tensor(buf, np.ones(10))
        data = buf.getvalue()[:-4]
        with pytest.raises(ValueError, match="truncated"):
            T.read_tensor(io.BytesIO(data))


class TestRng:
    def test_equal_seeds_equal_streams(self):
        a = T.Rng(1234).integers(0, 2 ** 62, 1_000_000)
        b = T.Rng(1234).integers(0, 2 ** 62, 1_000_000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = T.Rng(1).random(100)
        b = T.Rng(2).random(100)
        assert not np.array_equal(a, b)

    def test_children_independent_of_creation_order(self):
        r = T.Rng(7)
        c2_first = r.child(2).random(10)
        r = T.Rng(7)
        _ = r.child(1).random(10)
        c2_second = r.child(2).random(10)
        np.testing.assert_array_equal(c2_first, c2_second)

    def test_string_keys(self):
        a = T.Rng(7).child("dropout", 3).random(5)
        b = T.Rng(7).child("dropout", 3).random(5)
        c = T.Rng(7).child("shuffle", 3).random(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
