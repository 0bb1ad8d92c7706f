import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsf.layers import (
    BatchNorm,
    BatchStatsError,
    BinaryActivation,
    BinaryConv2d,
    ConfigurationError,
    MaxPool2x2,
    MODE_FULL,
    MODE_SEP1,
    MODE_SEP2,
    square_hinge_loss,
)
from bsf.sepfilter import build_lut, decode_separable
from bsf.svdgrad import JacobianTable, build_jacobian_table, collect_gradient


@pytest.fixture(scope="module")
def lut3():
    return build_lut(3)


@pytest.fixture(scope="module")
def table3():
    return build_jacobian_table(3)


def rng_of(seed=0):
    return np.random.default_rng(seed)


def fd_check_params(forward_loss, params_and_grads, rng, h=1e-6, floor=1e-6, samples=6):
    worst = 0.0
    for value, grad in params_and_grads:
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        for k in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + h
            lp = forward_loss()
            flat[k] = old - h
            lm = forward_loss()
            flat[k] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), floor))
    return worst


# --- convolution layer ------------------------------------------------------------


def test_conv_identity_stencil():
    # a 1x1 image touches only the filter's center tap under zero padding
    rng = rng_of(1)
    conv = BinaryConv2d(1, 1, 3, rng=rng)
    conv.shadow[0, 0] = np.array([[0.3, -0.5, 0.1], [0.7, 0.9, -0.2], [0.4, 0.2, -0.8]])
    x = np.array([[[[0.63]]]]).transpose(0, 2, 3, 1)  # (N, H, W, C)
    out = conv.forward(x, training=True)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(0.63)  # center weight binarizes to +1


def test_conv_all_ones_filter_is_window_sum():
    rng = rng_of(2)
    conv = BinaryConv2d(1, 1, 3, rng=rng)
    conv.shadow[...] = 0.5  # binarizes to all +1
    x = rng.normal(size=(2, 6, 6, 1))
    out = conv.forward(x, training=True)
    xp = np.pad(x[:, :, :, 0], ((0, 0), (1, 1), (1, 1)))
    expected = sum(
        xp[:, r : r + 6, s : s + 6] for r in range(3) for s in range(3)
    )
    assert np.allclose(out[:, :, :, 0], expected, atol=1e-6)


def test_conv_channel_mismatch():
    conv = BinaryConv2d(3, 4, 3, rng=rng_of(3))
    with pytest.raises(ValueError):
        conv.forward(np.zeros((1, 8, 8, 2)), training=True)


def test_conv_separable_requires_tables(lut3):
    with pytest.raises(ConfigurationError):
        BinaryConv2d(1, 1, 3, MODE_SEP1, rng=rng_of(4))
    with pytest.raises(ConfigurationError):
        BinaryConv2d(1, 1, 3, MODE_SEP2, lut=lut3, rng=rng_of(4))
    with pytest.raises(ConfigurationError):
        BinaryConv2d(1, 1, 4, rng=rng_of(4))  # even side


def test_conv_separable_equals_full_on_rank1_shadows(lut3):
    rng = rng_of(5)
    full = BinaryConv2d(2, 3, 3, MODE_FULL, rng=rng_of(7))
    sep = BinaryConv2d(2, 3, 3, MODE_SEP1, lut=lut3, rng=rng_of(7))
    # shadow weights whose signs are already rank-1 outer products
    for m in range(3):
        for c in range(2):
            code = int(rng.integers(0, 32))
            outer = decode_separable(code, 3).outer().astype(np.float64)
            full.shadow[m, c] = outer * 0.7
            sep.shadow[m, c] = outer * 0.7
    x = rng.normal(size=(2, 8, 8, 2))
    assert np.array_equal(full.forward(x, True), sep.forward(x, True))


def test_conv_separable_uses_only_table_filters(lut3):
    from bsf.sepfilter import batch_filter_keys

    conv = BinaryConv2d(3, 4, 3, MODE_SEP1, lut=lut3, rng=rng_of(6))
    w_eff, keys = conv.effective_weights()
    assert keys is not None
    # every effective filter is its own table entry (fixed point of the map)
    eff_keys = batch_filter_keys(w_eff.astype(np.int8)).reshape(-1)
    assert np.array_equal(lut3.codes[eff_keys], lut3.codes[keys])
    outers = lut3.outer_products()[lut3.codes[eff_keys]]
    assert np.array_equal(outers.reshape(w_eff.shape), w_eff.astype(np.int8))


def test_conv_backward_before_forward_errors():
    conv = BinaryConv2d(1, 1, 3, rng=rng_of(8))
    with pytest.raises(RuntimeError, match="cache"):
        conv.backward(np.zeros((1, 4, 4, 1)))
    conv.forward(np.zeros((1, 4, 4, 1)), training=True)
    conv.backward(np.zeros((1, 4, 4, 1)))
    with pytest.raises(RuntimeError, match="cache"):
        conv.backward(np.zeros((1, 4, 4, 1)))


def test_conv_method1_gates_by_shadow():
    conv = BinaryConv2d(1, 1, 3, rng=rng_of(9))
    conv.shadow[0, 0] = 0.0
    conv.shadow[0, 0, 0, 0] = 0.5   # inside the gate
    conv.shadow[0, 0, 0, 1] = -1.2  # outside the gate
    x = rng_of(10).normal(size=(2, 5, 5, 1))
    conv.forward(x, training=True)
    conv.backward(np.ones((2, 5, 5, 1)))
    assert conv.g_shadow[0, 0, 0, 0] != 0.0
    assert conv.g_shadow[0, 0, 0, 1] == 0.0


def test_conv_method2_all_degenerate_matches_method1(lut3):
    ident = JacobianTable.identity(3)
    m1 = BinaryConv2d(2, 3, 3, MODE_SEP1, lut=lut3, rng=rng_of(11))
    m2 = BinaryConv2d(2, 3, 3, MODE_SEP2, lut=lut3, jacobian_table=ident, rng=rng_of(11))
    x = rng_of(12).normal(size=(2, 6, 6, 2))
    up = rng_of(13).normal(size=(2, 6, 6, 3))
    g1 = (m1.forward(x, True), m1.backward(up))[1]
    g2 = (m2.forward(x, True), m2.backward(up))[1]
    assert np.array_equal(g1, g2)
    assert np.array_equal(m1.g_shadow, m2.g_shadow)


def test_conv_method2_matches_dense_jacobian_multiply(lut3, table3):
    conv = BinaryConv2d(1, 1, 3, MODE_SEP2, lut=lut3, jacobian_table=table3, rng=rng_of(14))
    # pick a shadow whose binarization has a non-degenerate jacobian
    from bsf.sepfilter import key_to_filter

    live_key = int(np.nonzero(~table3.degenerate)[0][0])
    conv.shadow[0, 0] = key_to_filter(live_key, 3) * 0.5
    x = rng_of(15).normal(size=(1, 5, 5, 1))
    up = rng_of(16).normal(size=(1, 5, 5, 1))
    conv.forward(x, training=True)
    conv.backward(up)

    # oracle: raw effective-filter gradient pulled through collect_gradient
    ref = BinaryConv2d(1, 1, 3, MODE_SEP1, lut=lut3, rng=rng_of(14))
    ref.shadow[...] = conv.shadow
    ref.forward(x, training=True)
    ref.backward(up)
    raw = ref.g_shadow  # method-1 gate passes everywhere here (|shadow| = 0.5)
    expected = collect_gradient(raw[0, 0], table3.get(live_key))
    assert np.allclose(conv.g_shadow[0, 0], expected, atol=1e-12)


def test_conv_method2_finite_over_all_512_filters(lut3, table3):
    from bsf.sepfilter import key_to_filter

    conv = BinaryConv2d(1, 512, 3, MODE_SEP2, lut=lut3, jacobian_table=table3, rng=rng_of(17))
    for key in range(512):
        conv.shadow[key, 0] = key_to_filter(key, 3) * 0.5
    x = rng_of(18).normal(size=(1, 4, 4, 1))
    up = rng_of(19).normal(size=(1, 4, 4, 512))
    conv.forward(x, training=True)
    conv.backward(up)
    assert np.all(np.isfinite(conv.g_shadow))


def test_conv_input_grad_matches_fd_with_identity_surrogates():
    rng = rng_of(20)
    conv = BinaryConv2d(2, 3, 3, rng=rng, surrogate=True)
    x = rng.normal(size=(2, 5, 5, 2))
    target = rng.normal(size=(2, 5, 5, 3))

    def loss_of(xv):
        out = conv.forward(xv, training=True)
        return 0.5 * float(((out - target) ** 2).sum())

    out = conv.forward(x, training=True)
    g_x = conv.backward(out - target)
    h = 1e-6
    for _ in range(12):
        n, i, j, c = rng.integers(0, [2, 5, 5, 2])
        xp = x.copy()
        xp[n, i, j, c] += h
        xm = x.copy()
        xm[n, i, j, c] -= h
        fd = (loss_of(xp) - loss_of(xm)) / (2 * h)
        assert abs(fd - g_x[n, i, j, c]) / max(abs(fd), 1e-6) < 1e-4


def test_conv_weight_grad_matches_fd_in_surrogate_mode():
    rng = rng_of(21)
    conv = BinaryConv2d(2, 2, 3, rng=rng, surrogate=True)
    x = rng.normal(size=(2, 4, 4, 2))
    target = rng.normal(size=(2, 4, 4, 2))

    def loss_of():
        out = conv.forward(x, training=True)
        return 0.5 * float(((out - target) ** 2).sum())

    out = conv.forward(x, training=True)
    conv.backward(out - target)
    worst = fd_check_params(loss_of, [(conv.shadow, conv.g_shadow)], rng)
    assert worst < 1e-4


# --- batch norm -------------------------------------------------------------------


def test_bn_identity_on_standardized_batch():
    rng = rng_of(22)
    bn = BatchNorm(4)
    x = rng.normal(size=(512, 4))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    out = bn.forward(x, training=True)
    assert np.allclose(out, x, atol=1e-3)  # eps keeps it from being exact


def test_bn_beta_shifts_mean():
    bn = BatchNorm(3)
    bn.beta[...] = 5.0
    out = bn.forward(rng_of(23).normal(size=(256, 3)), training=True)
    assert np.allclose(out.mean(axis=0), 5.0, atol=1e-10)


def test_bn_small_batch_rejected():
    bn = BatchNorm(3)
    with pytest.raises(BatchStatsError):
        bn.forward(np.zeros((1, 3)), training=True)


def test_bn_inference_uses_running_stats():
    bn = BatchNorm(2)
    rng = rng_of(24)
    for _ in range(200):
        bn.forward(rng.normal(loc=3.0, scale=2.0, size=(64, 2)), training=True)
    out = bn.forward(np.full((4, 2), 3.0), training=False)
    assert np.allclose(out, 0.0, atol=0.2)


def test_bn_backward_matches_fd():
    rng = rng_of(25)
    bn = BatchNorm(3)
    bn.gamma[...] = rng.normal(size=3)
    bn.beta[...] = rng.normal(size=3)
    x = rng.normal(size=(16, 3))
    target = rng.normal(size=(16, 3))

    def loss_of():
        out = bn.forward(x, training=True)
        return 0.5 * float(((out - target) ** 2).sum())

    out = bn.forward(x, training=True)
    g_x = bn.backward(out - target)
    worst = fd_check_params(
        loss_of, [(bn.gamma, bn.g_gamma), (bn.beta, bn.g_beta)], rng, floor=1e-5
    )
    assert worst < 1e-5
    h = 1e-6
    for _ in range(10):
        n, f = rng.integers(0, [16, 3])
        old = x[n, f]
        x[n, f] = old + h
        lp = loss_of()
        x[n, f] = old - h
        lm = loss_of()
        x[n, f] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g_x[n, f]) / max(abs(fd), abs(g_x[n, f]), 1e-5) < 1e-5


# --- pooling ----------------------------------------------------------------------


def test_pool_constant_routes_to_first_in_scan_order():
    pool = MaxPool2x2()
    x = np.ones((1, 4, 4, 1))
    out = pool.forward(x, training=True)
    assert np.array_equal(out, np.ones((1, 2, 2, 1)))
    g = pool.backward(np.ones((1, 2, 2, 1)))
    expected = np.zeros((1, 4, 4, 1))
    expected[0, 0::2, 0::2, 0] = 1.0
    assert np.array_equal(g, expected)


def test_pool_routes_to_unique_max():
    pool = MaxPool2x2()
    x = np.zeros((1, 2, 2, 1))
    x[0, 1, 0, 0] = 3.0
    out = pool.forward(x, training=True)
    assert out[0, 0, 0, 0] == 3.0
    g = pool.backward(np.full((1, 1, 1, 1), 7.0))
    assert g[0, 1, 0, 0] == 7.0
    assert g.sum() == 7.0


def test_pool_odd_dims_rejected():
    with pytest.raises(ValueError):
        MaxPool2x2().forward(np.zeros((1, 5, 4, 1)), training=True)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_pool_negation_duality(seed):
    # max pooling of -x equals the negated min pooling of x
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 6, 4, 3))
    pool = MaxPool2x2()
    maxed = pool.forward(-x, training=True)
    windows = x.reshape(2, 3, 2, 2, 2, 3).min(axis=(2, 4))
    assert np.allclose(maxed, -windows, atol=0)


# --- activation --------------------------------------------------------------------


def test_binact_forward_and_gate():
    act = BinaryActivation()
    x = np.array([[0.5, -0.2, 1.7, -3.0]])
    out = act.forward(x, training=True)
    assert out.tolist() == [[1.0, -1.0, 1.0, -1.0]]
    g = act.backward(np.ones_like(x))
    assert g.tolist() == [[1.0, 1.0, 0.0, 0.0]]


# --- hinge loss --------------------------------------------------------------------


def test_hinge_zero_when_margins_met():
    loss, grad = square_hinge_loss(np.array([2.0, -2.0, -2.0]), 0)
    assert loss == 0.0
    assert np.array_equal(grad, np.zeros(3))


def test_hinge_all_zero_scores():
    loss, _ = square_hinge_loss(np.zeros(10), 3)
    assert loss == 1.0


def test_hinge_target_out_of_range():
    with pytest.raises(ValueError):
        square_hinge_loss(np.zeros(3), 5)
    with pytest.raises(ValueError):
        square_hinge_loss(np.zeros((2, 4)), np.array([0, 4]))


def test_hinge_gradient_matches_fd():
    rng = rng_of(26)
    scores = rng.normal(size=(5, 4))
    targets = rng.integers(0, 4, size=5)
    _, grad = square_hinge_loss(scores, targets)
    h = 1e-7
    for _ in range(15):
        n, k = rng.integers(0, [5, 4])
        sp = scores.copy()
        sp[n, k] += h
        sm = scores.copy()
        sm[n, k] -= h
        fd = (square_hinge_loss(sp, targets)[0] - square_hinge_loss(sm, targets)[0]) / (2 * h)
        assert abs(fd - grad[n, k]) / max(abs(fd), abs(grad[n, k]), 1e-6) < 1e-6


def test_hinge_loss_nonnegative_and_zero_iff_margins():
    rng = rng_of(27)
    for _ in range(30):
        scores = rng.normal(size=(3, 5)) * 2
        targets = rng.integers(0, 5, size=3)
        loss, _ = square_hinge_loss(scores, targets)
        assert loss >= 0.0
        t = -np.ones_like(scores)
        t[np.arange(3), targets] = 1.0
        assert (loss == 0.0) == bool(np.all(t * scores >= 1.0))
