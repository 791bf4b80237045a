"""Kernel correctness against the naive-loop oracles."""

import math

import numpy as np
import pytest

from rtb.tensor import (
    CostMeter,
    Tensor,
    activation,
    affine_channel,
    bilinear_sample,
    bilinear_sample_many,
    conv2d,
    conv3d,
    deconv3d_2x,
    dense_exact,
    global_avg_pool,
    quantize_half,
    softmax_axis,
)
from rtb.errors import ShapeError

from oracles import (
    bilinear_ref,
    conv2d_ref,
    conv3d_ref,
    deconv3d_2x_ref,
    round_binary16_ref,
)


def rel_err(a, b):
    denom = max(np.abs(b).max(), 1e-30)
    return np.abs(a - b).max() / denom


class TestConv2d:
    def test_scalar_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.array([[[[2.0]]]]))
        out = conv2d(x, w)
        assert np.array_equal(out.data, [[[[2.0, 4.0], [6.0, 8.0]]]])

    def test_zero_weight_annihilates(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        out = conv2d(x, w, pad=1)
        assert np.all(out.data == 0.0)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(1)
        for case in range(110):
            N = int(rng.integers(1, 3))
            groups = int(rng.choice([1, 1, 1, 2]))
            cg = int(rng.integers(1, 4))
            cin = cg * groups
            cout = groups * int(rng.integers(1, 4))
            kh = int(rng.integers(1, 4))
            kw = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            H = kh + stride * int(rng.integers(0, 4)) - 2 * pad
            W = kw + stride * int(rng.integers(0, 4)) - 2 * pad
            if H < 1 or W < 1:
                continue
            x = rng.standard_normal((N, cin, H, W))
            w = rng.standard_normal((cout, cg, kh, kw))
            bias = rng.standard_normal(cout) if rng.random() < 0.5 else None
            ref, mults = conv2d_ref(x, w, bias, stride, pad, groups)
            meter = CostMeter()
            out = conv2d(Tensor(x), Tensor(w),
                         Tensor(bias) if bias is not None else None,
                         stride, pad, groups, meter)
            assert rel_err(out.data, ref) <= 1e-6
            assert meter.flops == 2 * mults

    def test_depthwise(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 4, 6, 6))
        w = rng.standard_normal((4, 1, 3, 3))
        ref, _ = conv2d_ref(x, w, stride=1, pad=1, groups=4)
        out = conv2d(Tensor(x), Tensor(w), None, 1, 1, 4)
        assert rel_err(out.data, ref) <= 1e-6

    def test_shape_errors(self):
        x = Tensor(np.zeros((1, 3, 5, 5)))
        with pytest.raises(ShapeError):
            conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))  # wrong cin
        x6 = Tensor(np.zeros((1, 3, 6, 6)))
        with pytest.raises(ShapeError):
            conv2d(x6, Tensor(np.zeros((2, 3, 3, 3))), stride=2)  # non-integral out

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 3, 8, 8))
        w = rng.standard_normal((5, 3, 3, 3))
        a = conv2d(Tensor(x), Tensor(w), pad=1).data
        b = conv2d(Tensor(x), Tensor(w), pad=1).data
        assert np.array_equal(a, b)


class TestConv3d:
    def test_ones_cube_scalar_kernel(self):
        x = Tensor(np.ones((1, 1, 2, 2, 2)))
        w = Tensor(np.full((1, 1, 1, 1, 1), 3.0))
        out = conv3d(x, w)
        assert np.all(out.data == 3.0)

    def test_identity_kernel(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 1, 3, 4, 4))
        w = Tensor(np.ones((1, 1, 1, 1, 1)))
        out = conv3d(Tensor(x), w)
        assert np.array_equal(out.data, x)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(5)
        for case in range(105):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            dims = [k + stride * int(rng.integers(0, 3)) - 2 * pad for _ in range(3)]
            if min(dims) < 1:
                continue
            x = rng.standard_normal((1, cin, *dims))
            w = rng.standard_normal((cout, cin, k, k, k))
            bias = rng.standard_normal(cout) if rng.random() < 0.5 else None
            ref, mults = conv3d_ref(x, w, bias, stride, pad)
            meter = CostMeter()
            out = conv3d(Tensor(x), Tensor(w),
                         Tensor(bias) if bias is not None else None,
                         stride, pad, meter)
            assert rel_err(out.data, ref) <= 1e-6
            assert meter.flops == 2 * mults


class TestDeconv3d:
    def test_zero_input(self):
        x = Tensor(np.zeros((1, 2, 2, 2, 2)))
        w = Tensor(np.ones((2, 3, 4, 4, 4)))
        out = deconv3d_2x(x, w)
        assert out.shape == (1, 3, 4, 4, 4)
        assert np.all(out.data == 0.0)

    def test_single_cell_uniform_kernel(self):
        v = 0.7
        x = np.zeros((1, 1, 1, 1, 1))
        x[0, 0, 0, 0, 0] = 1.0
        w = np.full((1, 1, 4, 4, 4), v)
        ref = deconv3d_2x_ref(x, w)
        out = deconv3d_2x(Tensor(x), Tensor(w))
        assert rel_err(out.data, ref) <= 1e-12
        # every cell of the 2x2x2 output receives exactly one tap
        assert set(np.unique(out.data)) <= {0.0, v}
        assert abs(out.data.sum() - ref.sum()) <= 1e-12

    def test_matches_scatter_oracle(self):
        rng = np.random.default_rng(6)
        for case in range(40):
            cin = int(rng.integers(1, 3))
            cout = int(rng.integers(1, 3))
            dims = [int(rng.integers(1, 4)) for _ in range(3)]
            x = rng.standard_normal((1, cin, *dims))
            w = rng.standard_normal((cin, cout, 4, 4, 4))
            ref = deconv3d_2x_ref(x, w)
            out = deconv3d_2x(Tensor(x), Tensor(w))
            assert rel_err(out.data, ref) <= 1e-6

    def test_adjoint_identity(self):
        rng = np.random.default_rng(7)
        for case in range(30):
            cin = int(rng.integers(1, 3))
            cout = int(rng.integers(1, 3))
            dims = [int(rng.integers(1, 4)) for _ in range(3)]
            x = rng.standard_normal((1, cin, *dims))
            w = rng.standard_normal((cin, cout, 4, 4, 4))
            y = rng.standard_normal((1, cout, 2 * dims[0], 2 * dims[1], 2 * dims[2]))
            lhs = float(np.sum(deconv3d_2x(Tensor(x), Tensor(w)).data * y))
            # conv3d with the same weight viewed as [cout_of_conv=cin, cin_of_conv=cout]
            conv_y, _ = conv3d_ref(y, w.transpose(0, 1, 2, 3, 4), stride=2, pad=1)
            rhs = float(np.sum(x * conv_y))
            assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs), 1.0)

    def test_flop_rule(self):
        meter = CostMeter()
        x = Tensor(np.zeros((1, 3, 2, 3, 4)))
        w = Tensor(np.zeros((3, 5, 4, 4, 4)))
        deconv3d_2x(x, w, meter=meter)
        assert meter.flops == 2 * 1 * 5 * 3 * 64 * 4 * 6 * 8

    def test_bad_weight_shape(self):
        x = Tensor(np.zeros((1, 2, 2, 2, 2)))
        with pytest.raises(ShapeError):
            deconv3d_2x(x, Tensor(np.zeros((2, 3, 3, 3, 3))))


class TestAffine:
    def test_identity(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 4, 4))
        out = affine_channel(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_constant(self):
        x = Tensor(np.random.default_rng(9).standard_normal((1, 2, 3, 3)))
        out = affine_channel(x, Tensor(np.zeros(2)), Tensor(np.full(2, 7.0)))
        assert np.all(out.data == 7.0)

    def test_matches_elementwise(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 4, 3, 5))
        scale = rng.standard_normal(4)
        shift = rng.standard_normal(4)
        out = affine_channel(Tensor(x), Tensor(scale), Tensor(shift))
        ref = np.empty_like(x)
        for n in range(2):
            for c in range(4):
                for i in range(3):
                    for j in range(5):
                        ref[n, c, i, j] = scale[c] * x[n, c, i, j] + shift[c]
        assert np.array_equal(out.data, ref)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            affine_channel(Tensor(np.zeros((1, 3, 2, 2))),
                           Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestActivation:
    def test_relu(self):
        out = activation(Tensor(np.array([-1.0, 0.0, 2.0])), "relu")
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_midpoint(self):
        assert activation(Tensor(np.array([0.0])), "sigmoid").data[0] == 0.5

    def test_sigmoid_saturation(self):
        import mpmath
        out = activation(Tensor(np.array([30.0, -30.0])), "sigmoid")
        hi = float(1 / (1 + mpmath.e ** mpmath.mpf(-30)))
        lo = float(1 / (1 + mpmath.e ** mpmath.mpf(30)))
        assert abs(out.data[0] - hi) <= 1e-9 and abs(out.data[0] - 1.0) <= 1e-9
        assert abs(out.data[1] - lo) <= 1e-9 and abs(out.data[1]) <= 1e-9


class TestSoftmax:
    def test_uniform(self):
        out = softmax_axis(Tensor(np.zeros(3)), 0)
        assert np.allclose(out.data, 1 / 3, atol=1e-12)

    def test_analytic(self):
        out = softmax_axis(Tensor(np.array([math.log(2.0), 0.0])), 0)
        assert abs(out.data[0] - 2 / 3) <= 1e-12
        assert abs(out.data[1] - 1 / 3) <= 1e-12

    def test_no_overflow(self):
        out = softmax_axis(Tensor(np.array([1000.0, 0.0])), 0)
        assert abs(out.data[0] - 1.0) <= 1e-12
        assert abs(out.data[1]) <= 1e-12

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(11)
        for axis in range(3):
            x = rng.uniform(-1e3, 1e3, size=(4, 5, 6))
            out = softmax_axis(Tensor(x), axis)
            sums = out.data.sum(axis=axis)
            assert np.abs(sums - 1.0).max() <= 1e-6
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestBilinear:
    def test_grid_points_exact(self):
        rng = np.random.default_rng(12)
        f = rng.standard_normal((3, 4, 5))
        for y in range(4):
            for x in range(5):
                vec, ok = bilinear_sample(Tensor(f), float(x), float(y))
                assert ok
                assert np.array_equal(vec, f[:, y, x])

    def test_midpoint(self):
        f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        vec, ok = bilinear_sample(f, 0.5, 0.5)
        assert ok and abs(vec[0] - 2.5) <= 1e-12

    def test_out_of_view(self):
        f = Tensor(np.ones((2, 3, 3)))
        vec, ok = bilinear_sample(f, -0.5, 1.0)
        assert not ok and np.all(vec == 0.0)
        vec, ok = bilinear_sample(f, 2.5, 1.0)
        assert not ok and np.all(vec == 0.0)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(13)
        f = rng.standard_normal((4, 6, 7))
        for case in range(120):
            u = float(rng.uniform(-1, 7))
            v = float(rng.uniform(-1, 6))
            ref, ok_ref = bilinear_ref(f, u, v)
            vec, ok = bilinear_sample(Tensor(f), u, v)
            assert ok == ok_ref
            assert np.abs(vec - ref).max() <= 1e-6

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(14)
        f = Tensor(rng.standard_normal((3, 5, 5)))
        us = rng.uniform(-1, 5, 50)
        vs = rng.uniform(-1, 5, 50)
        vals, flags = bilinear_sample_many(f, us, vs)
        for i in range(50):
            vec, ok = bilinear_sample(f, us[i], vs[i])
            assert ok == flags[i]
            assert np.array_equal(vals[i], vec)


class TestGlobalAvgPool:
    def test_constant(self):
        out = global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5)))
        assert out.shape == (2, 3)
        assert np.all(out.data == 2.5)

    def test_two_values(self):
        x = Tensor(np.array([[[1.0, 3.0]]]))
        assert global_avg_pool(x).data[0, 0] == 2.0

    def test_matches_mean(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((2, 4, 3, 3, 2))
        out = global_avg_pool(Tensor(x))
        for n in range(2):
            for c in range(4):
                ref = x[n, c].sum() / x[n, c].size
                assert abs(out.data[n, c] - ref) <= 1e-9


class TestQuantizeHalf:
    def test_exact_values(self):
        out = quantize_half(Tensor(np.array([1.0, 0.0, -2.0, 0.5])))
        assert np.array_equal(out.data, [1.0, 0.0, -2.0, 0.5])
        assert out.precision == "half-emulated"

    def test_rounding_at_2048(self):
        # binary16 spacing is 2 at magnitude 2^11; 2049 ties to even 2048
        out = quantize_half(Tensor(np.array([2049.0])))
        assert out.data[0] == 2048.0
        assert round_binary16_ref(2049.0) == 2048.0

    def test_overflow_to_inf(self):
        out = quantize_half(Tensor(np.array([1e6, -1e6])))
        assert out.data[0] == math.inf and out.data[1] == -math.inf

    def test_matches_reference_rounding(self):
        rng = np.random.default_rng(16)
        vals = np.concatenate([
            rng.uniform(-70000, 70000, 300),
            rng.uniform(-1e-4, 1e-4, 200),
            rng.standard_normal(300),
            np.array([65504.0, 65519.9, 65520.0, 2 ** -24, 2 ** -25, 3 * 2 ** -25]),
        ])
        out = quantize_half(Tensor(vals)).data
        for x, got in zip(vals, out):
            assert got == round_binary16_ref(float(x)), f"mismatch at {x!r}"


class TestDenseExact:
    def test_matches_matmul(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((3, 8))
        w = rng.standard_normal((5, 8))
        b = rng.standard_normal(5)
        out = dense_exact(x, w, b)
        assert np.abs(out - (x @ w.T + b)).max() <= 1e-9


class TestCostMeter:
    def test_monotone_and_breakdown(self):
        m = CostMeter()
        m.add("conv2d", 10)
        m.add("affine", 4)
        m.add("conv2d", 6)
        assert m.flops == 20
        assert m.per_op_breakdown == {"conv2d": 16, "affine": 4}
        m.reset()
        assert m.flops == 0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            CostMeter().add("conv2d", -1)
