import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manetpp import layers as L
from manetpp.gradcheck import gradcheck, numerical_gradient
from oracles import conv_loop, lrn_loop, matmul_loop, maxpool_loop, roialign_loop


# -- conv2d -----------------------------------------------------------------

def test_conv_zero_input_gives_zero():
    out, _ = L.conv2d(np.zeros((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1), L.LayerAttrs())
    assert np.all(out == 0)


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out, _ = L.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1), L.LayerAttrs())
    np.testing.assert_array_equal(out, x)


def test_conv_dilated_matches_loop(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out, _ = L.conv2d(x, w, b, L.LayerAttrs(dilation=3, padding=3))
    np.testing.assert_allclose(out, conv_loop(x, w, b, 1, 3, 3), atol=1e-10, rtol=0)


@pytest.mark.parametrize("stride,padding,dilation", [(2, 0, 1), (2, 1, 2), (3, 2, 1)])
def test_conv_strided_matches_loop(rng, stride, padding, dilation):
    x = rng.standard_normal((1, 2, 9, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, _ = L.conv2d(x, w, b, L.LayerAttrs(stride=stride, padding=padding, dilation=dilation))
    np.testing.assert_allclose(out, conv_loop(x, w, b, stride, padding, dilation), atol=1e-10)


@pytest.mark.parametrize("k,d", [(3, 1), (3, 2), (5, 3)])
def test_conv_same_padding_keeps_size(rng, k, d):
    x = rng.standard_normal((1, 1, 11, 11))
    out, _ = L.conv2d(x, rng.standard_normal((2, 1, k, k)), np.zeros(2),
                      L.LayerAttrs(dilation=d, padding=d * (k - 1) // 2))
    assert out.shape[2:] == (11, 11)


def test_conv_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        L.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1), L.LayerAttrs())
    with pytest.raises(ValueError, match="empty"):
        L.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1), L.LayerAttrs())


def test_conv_gradcheck_below_1e6(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    attrs = L.LayerAttrs(stride=1, padding=1, dilation=2)
    r = rng.standard_normal(L.conv2d(x, w, b, attrs)[0].shape)
    _, cache = L.conv2d(x, w, b, attrs)
    dx, dw, db = L.conv2d_backward(r, cache)
    rep = gradcheck(lambda: float((L.conv2d(x, w, b, attrs)[0] * r).sum()),
                    {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, "conv", 1e-6)
    assert rep.passed, rep


def test_conv_backward_skips_dx(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    _, cache = L.conv2d(x, rng.standard_normal((1, 1, 3, 3)), np.zeros(1), L.LayerAttrs())
    dx, dw, _ = L.conv2d_backward(np.ones((1, 1, 2, 2)), cache, need_dx=False)
    assert dx is None and dw.shape == (1, 1, 3, 3)


# -- fully connected / relu / softmax -----------------------------------------

def test_fc_identity_and_bias(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(L.fully_connected(x, np.eye(4), np.zeros(4))[0], x)
    b = rng.standard_normal(2)
    out = L.fully_connected(x, np.zeros((4, 2)), b)[0]
    assert np.all(out == b)


def test_fc_matches_loop(rng):
    x, w = rng.standard_normal((4, 6)), rng.standard_normal((6, 2))
    np.testing.assert_allclose(L.fully_connected(x, w, np.zeros(2))[0], matmul_loop(x, w), atol=1e-12)


def test_fc_dim_mismatch():
    with pytest.raises(ValueError):
        L.fully_connected(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


def test_relu_values_and_gradient(rng):
    np.testing.assert_array_equal(L.relu(np.array([-1.0, 0.0, 2.0]))[0], [0, 0, 2])
    x = rng.standard_normal(20)
    x = x[np.abs(x) > 1e-3]
    np.testing.assert_array_equal(L.relu(np.abs(x))[0], np.abs(x))
    num, _ = numerical_gradient(lambda: float(L.relu(x)[0].sum()), x)
    np.testing.assert_allclose(L.relu_backward(np.ones_like(x), x), num, atol=1e-6)


def test_softmax_rows():
    p, _ = L.softmax2(np.array([[0.0, 0.0], [1000.0, 0.0]]))
    np.testing.assert_allclose(p[0], [0.5, 0.5])
    assert np.all(np.isfinite(p)) and p[1, 0] == pytest.approx(1.0) and p[1, 1] < 1e-300 + 1e-12


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40).filter(lambda v: len(v) % 2 == 0))
def test_softmax_rows_sum_to_one(vals):
    p, _ = L.softmax2(np.array(vals).reshape(-1, 2))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((p >= 0) & (p <= 1))


# -- LRN --------------------------------------------------------------------

def test_lrn_single_channel_no_alpha(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    out, _ = L.lrn(x, L.LayerAttrs(lrn_params=(5, 2.0, 0.0, 0.75)))
    np.testing.assert_allclose(out, x / 2.0 ** 0.75)


def test_lrn_zero_input():
    assert np.all(L.lrn(np.zeros((1, 4, 2, 2)), L.LayerAttrs())[0] == 0)


@pytest.mark.parametrize("scale", [1.0, 30.0])
def test_lrn_matches_formula(rng, scale):
    x = rng.standard_normal((1, 8, 2, 2)) * scale
    out, _ = L.lrn(x, L.LayerAttrs())
    np.testing.assert_allclose(out, lrn_loop(x, *L.LRN_DEFAULTS), atol=1e-10, rtol=0)


def test_lrn_rejects_bad_k():
    with pytest.raises(ValueError):
        L.lrn(np.ones((1, 2, 1, 1)), L.LayerAttrs(lrn_params=(5, 0.0, 1e-4, 0.75)))


# -- IC layer ---------------------------------------------------------------

def test_ic_inference_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    st_ = L.BatchNormState.identity(3, np.float64)
    out, _ = L.ic_layer(x, st_, L.LayerAttrs(bn_params=(0.1, 0.0)))
    np.testing.assert_allclose(out, x)


def test_ic_training_normalizes(rng):
    x = rng.standard_normal((6, 3, 4, 4)) * 3 + 2
    st_ = L.BatchNormState.identity(3, np.float64)
    st_.gamma.value[:] = [1.0, 2.0, 0.5]
    st_.beta.value[:] = [0.0, -1.0, 3.0]
    out, _ = L.ic_layer(x, st_, L.LayerAttrs(training_mode=True, dropout_rate=0.0))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), st_.beta.value, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), st_.gamma.value, atol=1e-5)
    # running statistics moved towards the batch statistics by the momentum
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))


def test_ic_dropout_only_in_training(rng):
    x = np.ones((4, 2, 3, 3))
    st_ = L.BatchNormState.identity(2, np.float64)
    out, _ = L.ic_layer(x, st_, L.LayerAttrs(dropout_rate=0.5))
    assert np.all(out == out.flat[0])


# -- maxpool ----------------------------------------------------------------

def test_maxpool_small_cases():
    a = L.LayerAttrs(stride=1, pool_window=2)
    np.testing.assert_array_equal(L.maxpool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), a)[0], [[[[4.0]]]])
    out = L.maxpool(np.full((1, 2, 5, 5), 7.0), L.LayerAttrs(stride=2))[0]
    assert np.all(out == 7.0)


@pytest.mark.parametrize("k,s", [(3, 2), (2, 2), (3, 1)])
def test_maxpool_matches_loop(rng, k, s):
    x = rng.standard_normal((2, 3, 9, 8))
    out, _ = L.maxpool(x, L.LayerAttrs(stride=s, pool_window=k))
    np.testing.assert_array_equal(out, maxpool_loop(x, k, s))


def test_maxpool_ties_route_to_first():
    x = np.ones((1, 1, 3, 3))
    out, cache = L.maxpool(x, L.LayerAttrs(stride=1, pool_window=3))
    dx = L.maxpool_backward(np.ones_like(out), cache)
    expected = np.zeros((1, 1, 3, 3))
    expected[0, 0, 0, 0] = 1
    np.testing.assert_array_equal(dx, expected)


def test_maxpool_backward_conserves_mass(rng):
    x = rng.standard_normal((1, 2, 7, 7))
    out, cache = L.maxpool(x, L.LayerAttrs(stride=2))
    d = rng.standard_normal(out.shape)
    dx = L.maxpool_backward(d, cache)
    assert dx.sum() == pytest.approx(d.sum())
    assert np.all(dx[x < out.min()] == 0)


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        L.maxpool(np.zeros((1, 1, 2, 2)), L.LayerAttrs(pool_window=3))


# -- RoIAlign ---------------------------------------------------------------

def test_roialign_constant_map():
    f = np.full((2, 10, 10), 3.5)
    out, _ = L.roialign(f, np.array([[1.3, 2.2, 20.0, 17.0]]), 0.5)
    np.testing.assert_allclose(out, 3.5)


def test_roialign_exact_grid_crop(rng):
    # one sample per bin lands on the pixel centre
    f = rng.standard_normal((3, 12, 12))
    out, _ = L.roialign(f, np.array([[2.0, 4.0, 7.0, 7.0]]), 1.0, sampling=1)
    np.testing.assert_allclose(out[0], f[:, 4:11, 2:9], atol=1e-12)


def test_roialign_exact_grid_crop_affine_map():
    # 2x2 samples sit symmetrically around each centre, exact for affine maps
    i, j = np.mgrid[0:12, 0:12].astype(np.float64)
    f = np.stack([0.3 * i - 1.7 * j + 2.0, i + j])
    out, _ = L.roialign(f, np.array([[2.0, 4.0, 7.0, 7.0]]), 1.0)
    np.testing.assert_allclose(out[0], f[:, 4:11, 2:9], atol=1e-12)


def test_roialign_matches_bilinear_oracle(rng):
    f = rng.standard_normal((2, 9, 11))
    for _ in range(10):
        box = np.concatenate([rng.uniform(-20, 60, 2), rng.uniform(4, 70, 2)])
        scale = rng.choice([0.25, 0.125, 1.0])
        out, _ = L.roialign(f, box[None], scale)
        np.testing.assert_allclose(out[0], roialign_loop(f, box, scale), atol=1e-8)


def test_roialign_outside_gives_zero(caplog):
    out, _ = L.roialign(np.ones((1, 5, 5)), np.array([[500.0, 500.0, 10.0, 10.0]]), 1.0)
    assert np.all(out == 0)


def test_roialign_affine(rng):
    f = rng.standard_normal((2, 8, 8))
    box = np.array([[1.0, 2.0, 5.0, 4.0]])
    a, _ = L.roialign(f, box, 1.0)
    b, _ = L.roialign(f + 2.0, box, 1.0)
    np.testing.assert_allclose(b, a + 2.0, atol=1e-12)


def test_roialign_rejects_degenerate_box():
    with pytest.raises(ValueError):
        L.roialign(np.ones((1, 5, 5)), np.array([[0.0, 0.0, 0.0, 3.0]]), 1.0)


# -- optimizers -------------------------------------------------------------

def test_sgd_step_basics(rng):
    p = L.ParamBlock(rng.standard_normal(4))
    before = p.value.copy()
    L.sgd_step([p], 0.1, 0.0)
    np.testing.assert_array_equal(p.value, before)
    g = rng.standard_normal(4)
    p.grad[:] = g
    L.sgd_step([p], 1.0, 0.0)
    np.testing.assert_allclose(p.value, before - g)
    assert np.all(p.grad == 0)


def test_sgd_quadratic_bowl_shrinks(rng):
    p = L.ParamBlock(rng.standard_normal(5))
    norms = []
    for _ in range(100):
        p.grad[:] = 2 * p.value
        L.sgd_step([p], 0.1)
        norms.append(np.linalg.norm(p.value))
    assert np.all(np.diff(norms) < 0)


def test_sgd_weight_decay_flag():
    p = L.ParamBlock(np.ones(2), weight_decay_enabled=False)
    L.sgd_step([p], 1.0, 0.5)
    np.testing.assert_array_equal(p.value, 1.0)


def test_momentum_zero_equals_sgd(rng):
    a = L.ParamBlock(rng.standard_normal(3))
    b = L.ParamBlock(a.value.copy())
    opt = L.Momentum(0.0)
    for _ in range(3):
        g = rng.standard_normal(3)
        a.grad[:] = g
        b.grad[:] = g
        opt.step([a], 0.1, 5e-4)
        L.sgd_step([b], 0.1, 5e-4)
    np.testing.assert_array_equal(a.value, b.value)


def test_momentum_accumulates():
    p = L.ParamBlock(np.zeros(1), weight_decay_enabled=False)
    opt = L.Momentum(0.5)
    for _ in range(2):
        p.grad[:] = 1.0
        opt.step([p], 1.0)
    # v1 = 1, v2 = 1.5
    np.testing.assert_allclose(p.value, [-2.5])


# -- gradcheck harness --------------------------------------------------------

def test_gradcheck_linear_op_exact(rng):
    a = rng.standard_normal(6)
    x = rng.standard_normal(6)
    rep = gradcheck(lambda: float(a @ x), {"x": x}, {"x": a}, "linear")
    assert rep.passed and rep.max_rel_error < 1e-9


def test_gradcheck_detects_corruption(rng):
    a = rng.standard_normal(6)
    x = rng.standard_normal(6)
    rep = gradcheck(lambda: float(a @ x), {"x": x}, {"x": -a}, "linear")
    assert not rep.passed


def test_gradcheck_excludes_kinks():
    x = np.array([0.0, 1.0, -1.0])
    rep = gradcheck(lambda: float(L.relu(x)[0].sum()), {"x": x},
                    {"x": L.relu_backward(np.ones(3), x)}, "relu")
    assert rep.passed and len(rep.excluded) >= 1


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(5, 8), st.integers(1, 2), st.integers(1, 3))
def test_conv_gradient_property(c, size, stride, dilation):
    r = np.random.default_rng(c * 100 + size)
    x = r.standard_normal((1, c, size, size))
    w = r.standard_normal((2, c, 2, 2))
    b = r.standard_normal(2)
    attrs = L.LayerAttrs(stride=stride, dilation=dilation)
    out, cache = L.conv2d(x, w, b, attrs)
    d = r.standard_normal(out.shape)
    dx, dw, db = L.conv2d_backward(d, cache)
    rep = gradcheck(lambda: float((L.conv2d(x, w, b, attrs)[0] * d).sum()),
                    {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, "conv")
    assert rep.passed, rep
