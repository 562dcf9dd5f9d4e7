"""Forward kernels against naive oracles; backward against central
finite differences in float64."""

import numpy as np
import pytest

from dbe import autodiff as ad
from dbe.autodiff import Tensor, Tape, backward, finite_diff_check
from dbe.errors import ConfigurationError, DimensionError, UsageError

RNG = np.random.default_rng(1234)


def rand64(*shape):
    return RNG.standard_normal(shape)


def taped_loss(f, *tensors):
    tape = Tape()
    ad.zero_grad(tensors)
    with tape:
        loss = f(*tensors)
    backward(tape, loss)
    return loss


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = ad.matmul(a, b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_zero_upstream_gives_zero_grads():
    a = Tensor(np.eye(2), requires_grad=True)
    b = Tensor(rand64(2, 2), requires_grad=True)
    tape = Tape()
    with tape:
        out = ad.matmul(a, b)
        loss = ad.mul_scalar(ad.sum_all(out), 0.0)
    backward(tape, loss)
    assert np.all(a.grad == 0)
    assert np.all(b.grad == 0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        ad.matmul(Tensor(rand64(3, 4)), Tensor(rand64(3, 2)))


def test_matmul_gradients_match_finite_differences():
    b_fixed = Tensor(rand64(4, 2))
    a = Tensor(rand64(3, 4), requires_grad=True)
    r = rand64(3, 2)  # random projection makes the scalar sensitive everywhere

    def f(t):
        return ad.sum_all(ad.mul(ad.matmul(t, b_fixed), Tensor(r)))

    assert finite_diff_check(f, a) < 1e-3

    a_fixed = Tensor(rand64(3, 4))
    b = Tensor(rand64(4, 2), requires_grad=True)

    def g(t):
        return ad.sum_all(ad.mul(ad.matmul(a_fixed, t), Tensor(r)))

    assert finite_diff_check(g, b) < 1e-3


# ---------------------------------------------------------------------------
# conv2d


def conv2d_loop(x, w, b, stride=1, padding=0):
    """Six-nested-loop cross-correlation oracle."""
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, K, Ho, Wo), dtype=x.dtype)
    for n in range(B):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[k]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    w[k, c, u, v]
                                    * xp[n, c, i * stride + u, j * stride + v]
                                )
                    out[n, k, i, j] = acc
    return out


def test_conv2d_identity_kernel():
    x = Tensor(rand64(2, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(x, Tensor(w), Tensor(np.zeros(1)), stride=1, padding=1)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_conv2d_zero_kernels_give_bias_output():
    x = Tensor(rand64(2, 3, 6, 6))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
    out = ad.conv2d(x, w, b, padding=1)
    expect = np.broadcast_to(b.data[None, :, None, None], out.data.shape)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_conv2d_bad_geometry():
    x = Tensor(rand64(1, 1, 2, 2))
    w = Tensor(rand64(1, 1, 3, 3))
    with pytest.raises(ConfigurationError):
        ad.conv2d(x, w, Tensor(np.zeros(1)), stride=1, padding=0)


def test_conv2d_matches_loop_oracle_forward_and_backward():
    x = rand64(2, 3, 8, 8)
    w = rand64(4, 3, 3, 3)
    b = rand64(4)
    for stride, padding in [(1, 0), (1, 1), (2, 1)]:
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        bt = Tensor(b, requires_grad=True)
        tape = Tape()
        with tape:
            out = ad.conv2d(xt, wt, bt, stride=stride, padding=padding)
        ref = conv2d_loop(x, w, b, stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, ref, rtol=1e-5)

        g = rand64(*out.data.shape)
        loss_tape = Tape()
        ad.zero_grad([xt, wt, bt])
        with loss_tape:
            out2 = ad.conv2d(xt, wt, bt, stride=stride, padding=padding)
            loss = ad.sum_all(ad.mul(out2, Tensor(g)))
        backward(loss_tape, loss)

        # oracle gradients by direct accumulation from the loop definition
        B, C, H, W = x.shape
        K, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        db = g.sum(axis=(0, 2, 3))
        Ho, Wo = out.data.shape[2:]
        for n in range(B):
            for k in range(K):
                for i in range(Ho):
                    for j in range(Wo):
                        for c in range(C):
                            for u in range(kh):
                                for v in range(kw):
                                    dw[k, c, u, v] += (
                                        g[n, k, i, j]
                                        * xp[n, c, i * stride + u, j * stride + v]
                                    )
                                    dxp[n, c, i * stride + u, j * stride + v] += (
                                        g[n, k, i, j] * w[k, c, u, v]
                                    )
        dx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        np.testing.assert_allclose(xt.grad, dx, rtol=1e-5)
        np.testing.assert_allclose(wt.grad, dw, rtol=1e-5)
        np.testing.assert_allclose(bt.grad, db, rtol=1e-5)


# ---------------------------------------------------------------------------
# maxpool


def test_maxpool_single_window():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ad.maxpool2x2(x)
    assert out.data.reshape(()) == 4.0


def test_maxpool_tie_routes_to_first_element():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    tape = Tape()
    with tape:
        loss = ad.sum_all(ad.maxpool2x2(x))
    backward(tape, loss)
    expect = np.zeros((1, 1, 4, 4))
    expect[0, 0, ::2, ::2] = 1.0  # first element of each window
    np.testing.assert_array_equal(x.grad, expect)


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ConfigurationError):
        ad.maxpool2x2(Tensor(rand64(1, 1, 5, 4)))


def test_maxpool_matches_loop_oracle():
    x = rand64(1, 1, 6, 6)
    out = ad.maxpool2x2(Tensor(x))
    ref = np.zeros((1, 1, 3, 3))
    for i in range(3):
        for j in range(3):
            ref[0, 0, i, j] = x[0, 0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    np.testing.assert_array_equal(out.data, ref)


# ---------------------------------------------------------------------------
# activations


def test_relu_basic():
    out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_all_negative_zero_grad():
    x = Tensor(-np.abs(rand64(5)) - 0.1, requires_grad=True)
    tape = Tape()
    with tape:
        loss = ad.sum_all(ad.relu(x))
    backward(tape, loss)
    assert np.all(x.grad == 0)


def test_relu_gradient_away_from_kink():
    x = rand64(40)
    x = np.where(np.abs(x) > 1e-3, x, x + 0.5)
    xt = Tensor(x, requires_grad=True)
    r = rand64(40)

    def f(t):
        return ad.sum_all(ad.mul(ad.relu(t), Tensor(r)))

    assert finite_diff_check(f, xt) < 1e-3


def test_tanh_odd_symmetry_and_gradient():
    pts = rand64(20)
    out_pos = ad.tanh_act(Tensor(pts))
    out_neg = ad.tanh_act(Tensor(-pts))
    np.testing.assert_allclose(out_pos.data, -out_neg.data, atol=1e-12)
    assert ad.tanh_act(Tensor(np.zeros(1))).data[0] == 0.0

    xt = Tensor(rand64(30), requires_grad=True)
    r = rand64(30)

    def f(t):
        return ad.sum_all(ad.mul(ad.tanh_act(t), Tensor(r)))

    assert finite_diff_check(f, xt) < 1e-3


# ---------------------------------------------------------------------------
# batchnorm


def test_batchnorm_normalizes_batch():
    x = Tensor(rand64(32, 16) * 3.0 + 5.0)
    gamma = Tensor(np.ones(16))
    beta = Tensor(np.zeros(16))
    out = ad.batchnorm(x, gamma, beta, np.zeros(16), np.ones(16), training=True)
    assert np.abs(out.data.mean(axis=0)).max() < 1e-5
    assert np.abs(out.data.var(axis=0) - 1.0).max() < 1e-3


def test_batchnorm_zero_gamma_gives_beta():
    x = Tensor(rand64(8, 4))
    beta = Tensor(np.array([1.0, -1.0, 0.5, 2.0]))
    out = ad.batchnorm(
        x, Tensor(np.zeros(4)), beta, np.zeros(4), np.ones(4), training=True
    )
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (8, 4)))


def test_batchnorm_batch_of_one_rejected():
    with pytest.raises(ConfigurationError):
        ad.batchnorm(
            Tensor(rand64(1, 4)),
            Tensor(np.ones(4)),
            Tensor(np.zeros(4)),
            np.zeros(4),
            np.ones(4),
            training=True,
        )


def test_batchnorm_gradients_match_finite_differences():
    x = rand64(32, 16)
    gamma = rand64(16) * 0.5 + 1.0
    beta = rand64(16) * 0.1
    r = rand64(32, 16)

    def run(xv, gv, bv):
        return ad.sum_all(
            ad.mul(
                ad.batchnorm(
                    xv, gv, bv, np.zeros(16), np.ones(16), training=True
                ),
                Tensor(r),
            )
        )

    xt = Tensor(x, requires_grad=True)
    gt = Tensor(gamma)
    bt = Tensor(beta)
    assert finite_diff_check(lambda t: run(t, gt, bt), xt) < 1e-3

    xt2 = Tensor(x)
    gt2 = Tensor(gamma, requires_grad=True)
    assert finite_diff_check(lambda t: run(xt2, t, bt), gt2) < 1e-3

    bt2 = Tensor(beta, requires_grad=True)
    assert finite_diff_check(lambda t: run(xt2, gt2, t), bt2) < 1e-3


def test_batchnorm_4d_spatial_statistics():
    x = rand64(4, 3, 6, 6)
    out = ad.batchnorm(
        Tensor(x),
        Tensor(np.ones(3)),
        Tensor(np.zeros(3)),
        np.zeros(3),
        np.ones(3),
        training=True,
    )
    per_channel_mean = out.data.mean(axis=(0, 2, 3))
    assert np.abs(per_channel_mean).max() < 1e-10

    xt = Tensor(x, requires_grad=True)
    r = rand64(4, 3, 6, 6)

    def f(t):
        return ad.sum_all(
            ad.mul(
                ad.batchnorm(
                    t,
                    Tensor(np.ones(3)),
                    Tensor(np.zeros(3)),
                    np.zeros(3),
                    np.ones(3),
                    training=True,
                ),
                Tensor(r),
            )
        )

    assert finite_diff_check(f, xt) < 1e-3


def test_batchnorm_infer_uses_running_stats():
    x = rand64(6, 4)
    rm = rand64(4)
    rv = np.abs(rand64(4)) + 0.5
    out = ad.batchnorm(
        Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, training=False
    )
    expect = (x - rm) / np.sqrt(rv + 1e-5)
    np.testing.assert_allclose(out.data, expect, rtol=1e-6)


# ---------------------------------------------------------------------------
# backward plumbing


def test_backward_sum_gives_ones():
    w = Tensor(rand64(3, 4), requires_grad=True)
    taped_loss(ad.sum_all, w)
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_backward_detached_parameter_gets_no_grad():
    w = Tensor(rand64(3), requires_grad=True)
    other = Tensor(rand64(3), requires_grad=True)
    tape = Tape()
    with tape:
        loss = ad.sum_all(other)
    backward(tape, loss)
    assert w.grad is None


def test_backward_rejects_nonscalar_loss():
    w = Tensor(rand64(3), requires_grad=True)
    tape = Tape()
    with tape:
        out = ad.relu(w)
    with pytest.raises(UsageError):
        backward(tape, out)


def test_backward_accumulates_across_calls():
    w = Tensor(rand64(3), requires_grad=True)
    tape = Tape()
    with tape:
        loss = ad.sum_all(w)
    backward(tape, loss)
    backward(tape, loss)
    np.testing.assert_array_equal(w.grad, 2.0 * np.ones(3))


# ---------------------------------------------------------------------------
# finite_diff_check harness itself


def test_fd_check_on_half_norm_squared():
    x = Tensor(rand64(10), requires_grad=True)

    def f(t):
        return ad.mul_scalar(ad.sum_all(ad.mul(t, t)), 0.5)

    assert finite_diff_check(f, x) < 1e-6


def test_fd_check_on_constant_function():
    x = Tensor(rand64(5), requires_grad=True)
    c = Tensor(np.array(3.0))

    def f(t):
        return ad.mul_scalar(ad.mul(ad.sum_all(t), Tensor(np.array(0.0))), 1.0)

    assert finite_diff_check(f, x) == 0.0


def test_fd_check_rejects_bad_step():
    x = Tensor(rand64(3), requires_grad=True)
    with pytest.raises(UsageError):
        finite_diff_check(lambda t: ad.sum_all(t), x, h=0.0)


# ---------------------------------------------------------------------------
# invariants


def test_forward_kernels_finite_on_finite_input():
    x = rand64(4, 3, 8, 8) * 50.0
    out = ad.conv2d(Tensor(x), Tensor(rand64(2, 3, 3, 3)), Tensor(rand64(2)))
    assert np.isfinite(out.data).all()
    assert np.isfinite(ad.tanh_act(Tensor(x * 100)).data).all()
    assert np.isfinite(ad.relu(Tensor(x)).data).all()


def test_forward_determinism_same_seed():
    def build(seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.standard_normal((2, 1, 8, 8), dtype=np.float32))
        w = Tensor(r.standard_normal((3, 1, 3, 3), dtype=np.float32))
        b = Tensor(r.standard_normal(3, dtype=np.float32))
        return ad.conv2d(x, w, b, padding=1).data

    a = build(99)
    b = build(99)
    assert (a == b).all()


def test_gradient_checks_many_random_instances():
    # twenty fresh instances through a mixed composition
    for trial in range(20):
        r = np.random.default_rng(5000 + trial)
        x = Tensor(r.standard_normal((4, 6)), requires_grad=True)
        w = Tensor(r.standard_normal((6, 3)))
        proj = Tensor(r.standard_normal((4, 3)))

        def f(t):
            return ad.sum_all(ad.mul(ad.tanh_act(ad.matmul(t, w)), proj))

        assert finite_diff_check(f, x) < 1e-3
