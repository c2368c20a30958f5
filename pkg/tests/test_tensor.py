import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import mpmath

from iiao.tensor import (ShapeError, Tensor, channel_softmax, combine, conv2d, grad_check, grad_check_detail,
                         pointwise, record_decisions, reduce, resample, scale)
from iiao.verify import primitive_checks

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv2d ------------------------------------------------------------------------

def test_conv_scalar_kernel_scales():
    out = conv2d(t(np.ones((1, 1, 3, 3))), t([[[[2.0]]]]), t([0.0]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_full_window_sum():
    out = conv2d(t([[[[1, 2], [3, 4]]]]), t(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


def test_conv_output_shape_with_stride_and_padding():
    out = conv2d(t(np.zeros((2, 3, 9, 7))), t(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 5, 5, 4)


def test_conv_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    x, k, b = t(rng.standard_normal((1, 3, 8, 8))), t(rng.standard_normal((4, 3, 3, 3))), t(rng.standard_normal(4))
    err = grad_check(lambda: reduce(conv2d(x, k, b), "sum_all"), [x, k, b], eps=1e-5)
    assert err < 1e-6


def test_conv_rejects_bad_shapes():
    with pytest.raises(ShapeError, match="C=3.*expects 2"):
        conv2d(t(np.zeros((1, 3, 4, 4))), t(np.zeros((1, 2, 1, 1))))
    with pytest.raises(ValueError, match="stride"):
        conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 1, 1))), stride=0)


@given(st.integers(1, 4), st.data())
@settings(max_examples=25, deadline=None)
def test_one_hot_1x1_conv_selects_channel(c, data):
    pick = data.draw(st.integers(0, c - 1))
    x = data.draw(arrays(np.float64, (2, c, 3, 4), elements=finite))
    kern = np.zeros((1, c, 1, 1))
    kern[0, pick] = 1.0
    out = conv2d(t(x), t(kern))
    np.testing.assert_array_equal(out.data[:, 0], x[:, pick])


# -- pointwise ----------------------------------------------------------------------

def test_sigmoid_at_zero():
    assert pointwise(t([0.0]), "sigmoid").data[0] == 0.5


def test_silu_plus_identity_zero_and_square():
    y = pointwise(t([0.0]), "silu_plus_identity")
    assert y.data[0] == 0.0
    assert pointwise(y, "square").data[0] == 0.0


def test_silu_plus_identity_matches_high_precision():
    mpmath.mp.dps = 40
    ref = 2 * (1 / (1 + mpmath.e ** -2)) + 2
    got = pointwise(t([2.0]), "silu_plus_identity").data[0]
    assert abs(got - float(ref)) < 1e-15
    assert got == pytest.approx(3.76159, abs=1e-5)


def test_unknown_pointwise_rejected():
    with pytest.raises(ValueError, match="unknown pointwise"):
        pointwise(t([1.0]), "tanh")


def test_abs_and_relu_subgradient_at_zero_is_zero():
    for fn in ("abs", "relu"):
        x = t([0.0, 1.0, -1.0], grad=True)
        reduce(pointwise(x, fn), "sum_all").backward()
        assert x.grad[0] == 0.0


def test_sigmoid_is_stable_for_large_inputs():
    y = pointwise(t([-800.0, 800.0]), "sigmoid").data
    assert np.all(np.isfinite(y))
    np.testing.assert_array_equal(y, [0.0, 1.0])


@pytest.mark.parametrize("fn", ["relu", "sigmoid", "abs", "square", "silu_plus_identity"])
def test_pointwise_gradient_on_100_elements(fn):
    rng = np.random.default_rng(3)
    x = t(rng.choice([-1, 1], 100) * rng.uniform(0.1, 3, 100))
    assert grad_check(lambda: reduce(pointwise(pointwise(x, fn), "square"), "sum_all"), [x]) < 1e-5


# -- channel softmax ------------------------------------------------------------------

def test_softmax_equal_inputs_split_evenly():
    out = channel_softmax(t(np.full((1, 2, 1, 1), 3.7)))
    np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5])


def test_softmax_single_channel_is_one():
    out = channel_softmax(t(np.random.default_rng(0).standard_normal((2, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, 1.0)


def test_softmax_matches_arbitrary_precision():
    mpmath.mp.dps = 40
    ex = [mpmath.e ** v for v in (1, 2, 3)]
    ref = [float(e / sum(ex)) for e in ex]
    got = channel_softmax(t(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))).data.ravel()
    np.testing.assert_allclose(got, ref, atol=1e-15)
    np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=1e-5)


@given(arrays(np.float64, (1, 5, 2, 3), elements=st.floats(-700, 700)))
@settings(max_examples=50, deadline=None)
def test_softmax_sums_to_one(x):
    out = channel_softmax(t(x)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


# -- resample -------------------------------------------------------------------------

def test_sumpool_and_maxpool_examples():
    x = t([[[[1, 2], [3, 4]]]])
    assert resample(x, "sumpool", 2).data.item() == 10.0
    assert resample(x, "maxpool2").data.item() == 4.0


def test_bilinear_up2_of_constant_is_constant():
    out = resample(t(np.full((1, 2, 3, 5), 1.25)), "bilinear_up2")
    assert out.shape == (1, 2, 6, 10)
    np.testing.assert_allclose(out.data, 1.25, rtol=0, atol=1e-15)


def test_bilinear_up2_half_pixel_convention():
    # interior samples sit at 1/4 and 3/4 between source pixels
    out = resample(t(np.array([0.0, 4.0]).reshape(1, 1, 1, 2)), "bilinear_up2").data[0, 0, 0]
    np.testing.assert_allclose(out, [0.0, 1.0, 3.0, 4.0])


def test_pooling_rejects_indivisible():
    with pytest.raises(ShapeError):
        resample(t(np.zeros((1, 1, 3, 4))), "maxpool2")
    with pytest.raises(ShapeError):
        resample(t(np.zeros((1, 1, 8, 9))), "sumpool", 3)


def test_maxpool_tie_routes_gradient_to_first_index():
    x = t(np.ones((1, 1, 2, 2)), grad=True)
    reduce(resample(x, "maxpool2"), "sum_all").backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
@settings(max_examples=30, deadline=None)
def test_sumpool_preserves_total(f, hb, wb, data):
    x = data.draw(arrays(np.float64, (1, 2, f * hb, f * wb), elements=st.integers(0, 10**6).map(float)))
    assert resample(t(x), "sumpool", f).data.sum() == x.sum()


# -- combine / reduce -------------------------------------------------------------------

def test_sum_channels_counts_channels():
    out = reduce(t(np.ones((2, 3, 4, 5))), "sum_channels")
    assert out.shape == (2, 1, 4, 5)
    np.testing.assert_array_equal(out.data, 3.0)


def test_mul_by_ones_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(combine(t(x), t(np.ones_like(x)), "mul").data, x)


def test_concat_block_layout():
    a = np.arange(2 * 2 * 2 * 3, dtype=float).reshape(2, 2, 2, 3)
    b = -np.arange(2 * 3 * 2 * 3, dtype=float).reshape(2, 3, 2, 3) - 1
    out = combine(t(a), t(b), "concat_channels").data
    assert out.shape == (2, 5, 2, 3)
    for n in range(2):
        for c in range(5):
            for i in range(2):
                for j in range(3):
                    expected = a[n, c, i, j] if c < 2 else b[n, c - 2, i, j]
                    assert out[n, c, i, j] == expected


def test_combine_rejects_mismatch():
    with pytest.raises(ShapeError):
        combine(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 2, 3))), "add")
    with pytest.raises(ShapeError):
        combine(t(np.zeros((1, 1, 2, 2))), t(np.zeros((2, 1, 2, 2))), "concat_channels")


def test_sum_all_is_scalar():
    out = reduce(t(np.ones((2, 3, 4, 5))), "sum_all")
    assert out.shape == ()
    assert out.item() == 120.0


# -- autodiff machinery ------------------------------------------------------------------

def test_reused_input_accumulates_gradient():
    x = t([1.0, 2.0, 3.0], grad=True)
    y = reduce(combine(x, x, "mul"), "sum_all")
    y.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar_without_seed():
    x = t([1.0, 2.0], grad=True)
    with pytest.raises(ShapeError):
        scale(x, 2.0).backward()


def test_float32_is_preserved():
    x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32), requires_grad=True)
    k = Tensor(np.ones((1, 2, 3, 3), dtype=np.float32))
    out = conv2d(x, k, padding=1)
    assert out.dtype == np.float32
    reduce(out, "sum_all").backward()
    assert x.grad.dtype == np.float32


# -- grad_check ----------------------------------------------------------------------------

def test_grad_check_linear_map_is_exact():
    x = t(np.random.default_rng(1).standard_normal(20))
    assert grad_check(lambda: reduce(scale(x, 2.0), "sum_all"), [x]) < 1e-9


def test_grad_check_eps_range():
    x = t([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: reduce(x, "sum_all"), [x], eps=1e-2)


def test_kink_straddling_element_is_skipped():
    # relu at 0: the +-eps stencil sees slopes 1 and 0, so the quotient is 0.5
    x = t([0.0, 1.0, -2.0])
    fn = lambda: reduce(pointwise(x, "relu"), "sum_all")
    assert grad_check(fn, [x]) == pytest.approx(1.0)
    res = grad_check_detail(fn, [x], skip_kinks=True)
    assert (res.checked, res.skipped) == (2, 1)
    assert res.worst < 1e-9


def test_decisions_recorded_only_inside_context():
    x = t(np.arange(16.0).reshape(1, 1, 4, 4))
    with record_decisions() as rec:
        resample(pointwise(x, "relu"), "maxpool2")
    assert len(rec) == 2
    resample(x, "maxpool2")
    assert len(rec) == 2


@pytest.mark.parametrize("name,fn,inputs", primitive_checks(seed=5), ids=lambda v: v if isinstance(v, str) else "")
def test_every_primitive_gradient(name, fn, inputs):
    assert grad_check(fn, inputs, eps=1e-5) < 1e-5
