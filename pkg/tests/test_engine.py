import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from crossview.engine import (
    NonFiniteError,
    Tensor,
    avg_pool2d,
    backward,
    bilinear_sample2d,
    check_gradients,
    cast,
    concat,
    conv2d,
    conv3d,
    matmul,
    no_grad,
    softmax,
    trilinear_sample3d,
)
from conftest import rng
from gradcases import build_cases


class TestBackwardBasics:
    def test_sum_grad_is_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(w.sum())
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_hand_differentiated_quadratic(self):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        backward((w * w).sum())
        np.testing.assert_allclose(w.grad, [2.0, -4.0], rtol=0, atol=0)

    def test_matmul_hand_oracle(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(matmul(a, b).data, [[3.0], [7.0]])

    def test_matmul_grad_vs_fd(self):
        g = rng(3)
        a, b = g.normal(size=(3, 4)), g.normal(size=(4, 2))
        check_gradients(lambda x, y: matmul(x, y).sum(), [a, b])

    def test_repeated_backward_accumulates(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        loss = (w * w).sum()
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(w.grad, [8.0])

    def test_backward_requires_scalar(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            backward(w * 2.0)

    def test_no_grad_suppresses_graph(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (w * w).sum()
        assert not out.requires_grad


class TestGradientSuite:
    @pytest.mark.parametrize("seed", range(5))
    def test_all_ops_match_finite_differences(self, seed):
        for name, fn, arrays_ in build_cases(seed):
            err = check_gradients(fn, arrays_)
            assert err <= 1e-4, name


class TestClosedFormOps:
    def test_softmax_matches_extended_precision(self):
        import mpmath

        mpmath.mp.dps = 50
        xs = [1.0, 2.0, 3.0]
        exps = [mpmath.e**x for x in xs]
        total = sum(exps)
        expected = np.array([float(e / total) for e in exps])
        got = softmax(Tensor(np.array(xs)), axis=-1).data
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)

    @given(
        arrays(
            np.float64,
            array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=5),
            elements=st.floats(-30, 30),
        )
    )
    def test_softmax_rows_sum_to_one(self, x):
        out = softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_conv2d_matches_naive_loops(self):
        g = rng(11)
        x = g.normal(size=(2, 2, 6, 5))
        k = g.normal(size=(3, 2, 3, 3))
        bias = g.normal(size=(3,))
        got = conv2d(Tensor(x), Tensor(k), Tensor(bias)).data
        b, cin, h, w = x.shape
        cout, _, kh, kw = k.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        want = np.zeros((b, cout, h, w))
        for bi in range(b):
            for co in range(cout):
                for i in range(h):
                    for j in range(w):
                        acc = bias[co]
                        for ci in range(cin):
                            for u in range(kh):
                                for v in range(kw):
                                    acc += xp[bi, ci, i + u, j + v] * k[co, ci, u, v]
                        want[bi, co, i, j] = acc
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_conv3d_identity_kernel(self):
        g = rng(5)
        x = g.normal(size=(1, 1, 3, 4, 5))
        k = np.ones((1, 1, 1, 1, 1))
        np.testing.assert_array_equal(conv3d(Tensor(x), Tensor(k)).data, x)

    def test_conv3d_ones_kernel_constant_interior(self):
        c = 0.75
        x = np.full((1, 1, 5, 5, 5), c)
        k = np.ones((1, 1, 3, 3, 3))
        out = conv3d(Tensor(x), Tensor(k)).data
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1, 1:-1], 27 * c, rtol=0, atol=1e-12)

    def test_avg_pool_and_upsample_shapes(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        pooled = avg_pool2d(x, 2)
        assert pooled.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(pooled.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
        up = np.asarray([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        from crossview.engine import upsample_nearest2d

        got = upsample_nearest2d(Tensor(up), 2).data
        np.testing.assert_array_equal(got[0, 0, :2, :2], 1.0)


class TestSamplers:
    def test_bilinear_integer_coords_return_stored_values(self):
        g = rng(7)
        m = g.normal(size=(3, 4, 5))
        coords = np.array([[0.0, 0.0], [2.0, 3.0], [3.0, 4.0]])
        out, valid = bilinear_sample2d(Tensor(m), coords)
        assert valid.all()
        for row, (r, c) in enumerate(coords.astype(int)):
            np.testing.assert_array_equal(out.data[row], m[:, r, c])

    def test_bilinear_cell_center_is_corner_mean(self):
        g = rng(8)
        m = g.normal(size=(2, 3, 3))
        out, _ = bilinear_sample2d(Tensor(m), np.array([[0.5, 1.5]]))
        want = 0.25 * (m[:, 0, 1] + m[:, 0, 2] + m[:, 1, 1] + m[:, 1, 2])
        np.testing.assert_allclose(out.data[0], want, atol=1e-12)

    def test_bilinear_constant_map_everywhere(self):
        m = np.full((2, 4, 4), 3.25)
        g = rng(9)
        coords = g.uniform(0.0, 3.0, size=(20, 2))
        out, valid = bilinear_sample2d(Tensor(m), coords)
        assert valid.all()
        np.testing.assert_allclose(out.data, 3.25, atol=1e-12)

    def test_bilinear_out_of_bounds_zero_and_invalid(self):
        m = np.ones((1, 4, 4))
        out, valid = bilinear_sample2d(Tensor(m), np.array([[-0.01, 1.0], [1.0, 3.01]]))
        assert not valid.any()
        np.testing.assert_array_equal(out.data, 0.0)

    def test_trilinear_lattice_points_and_cell_center(self):
        g = rng(10)
        v = g.normal(size=(2, 3, 3, 3))
        out, valid = trilinear_sample3d(Tensor(v), np.array([[1.0, 2.0, 0.0]]))
        assert valid.all()
        np.testing.assert_array_equal(out.data[0], v[:, 1, 2, 0])
        out, _ = trilinear_sample3d(Tensor(v), np.array([[0.5, 0.5, 0.5]]))
        want = v[:, :2, :2, :2].mean(axis=(1, 2, 3))
        np.testing.assert_allclose(out.data[0], want, atol=1e-12)

    def test_trilinear_constant_volume(self):
        v = np.full((1, 4, 4, 4), -1.5)
        g = rng(12)
        coords = g.uniform(0.0, 3.0, size=(30, 3))
        out, valid = trilinear_sample3d(Tensor(v), coords)
        assert valid.all()
        np.testing.assert_allclose(out.data, -1.5, atol=1e-12)


class TestNonFiniteChecks:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflowing_exp_raises_with_op_name(self):
        with pytest.raises(NonFiniteError, match="exp"):
            Tensor(np.array([1000.0])).exp()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divide_by_zero_raises(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


class TestBroadcastGradients:
    @given(
        st.integers(1, 4),
        st.integers(1, 4),
        st.integers(0, 2**31 - 1),
    )
    def test_broadcast_add_grad_matches_fd(self, n, m, seed):
        g = rng(seed)
        a = g.normal(size=(n, m))
        b = g.normal(size=(m,))
        w = g.normal(size=(n, m))
        check_gradients(lambda x, y: ((x + y) * w).sum(), [a, b])

    def test_concat_backward_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 3)), requires_grad=True)
        out = concat([a, b], axis=1)
        backward((out * np.arange(10.0).reshape(2, 5)).sum())
        np.testing.assert_array_equal(a.grad, [[0.0, 1.0], [5.0, 6.0]])
        np.testing.assert_array_equal(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])

    def test_cast_forward_and_grad_dtypes(self):
        x = Tensor(rng(12).normal(size=(3, 2)), requires_grad=True)
        w = rng(13).normal(size=(3, 2)).astype(np.float32)
        y = cast(x, np.float32)
        assert y.dtype == np.float32
        np.testing.assert_array_equal(y.data, x.data.astype(np.float32))
        backward((y * w).sum())
        assert x.grad.dtype == np.float64
        np.testing.assert_allclose(x.grad, w.astype(np.float64), rtol=0, atol=0)

    def test_cast_same_dtype_grad_matches_fd(self):
        g = rng(14)
        a = g.normal(size=(4,))
        w = g.normal(size=(4,))
        check_gradients(lambda x: (cast(x, np.float64) * w).sum(), [a])
