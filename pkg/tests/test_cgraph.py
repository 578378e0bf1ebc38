import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import dualpnn.cgraph as cg
from dualpnn.cgraph import (
    Tape, Parameter, backward, value_of, finite_difference_check,
    add, sub, mul, neg, scale, reshape, exp_j, sigmoid, abs2, square,
    sum_all, matmul, fft2, ifft2, pad_center, crop_center,
    complex_from_parts, crelu, conv2d, conv_transpose2d,
    softmax, cross_entropy_logits, region_sum, gather_ports,
    fuse_field, fused_intensity,
)

from conftest import directional_fd


def grad_of(f, params):
    cg.zero_grads(params)
    with Tape() as t:
        backward(t, f())
    return [p.grad.copy() for p in params]


def assert_directional(f, params, rng, tol=2e-5):
    """Tape gradient agrees with a central difference along a random direction."""
    grads = grad_of(f, params)
    vs = []
    for p in params:
        v = rng.standard_normal(p.value.shape)
        if np.iscomplexobj(p.value):
            v = v + 1j * rng.standard_normal(p.value.shape)
        v /= np.linalg.norm(v.ravel()) + 1e-300
        vs.append(v)
    analytic = sum(np.real(np.conj(g).ravel() @ v.ravel()) for g, v in zip(grads, vs))
    fd = directional_fd(f, params, vs)
    assert abs(analytic - fd) / (abs(fd) + 1e-9) < tol


# ---------------------------------------------------------------- basics


def test_abs2_value():
    assert np.allclose(value_of(abs2(np.array([1 + 1j]))), [2.0])


def test_matmul_scalar_product():
    out = matmul(np.array([[2j]]), np.array([3.0 + 0j]))
    assert np.allclose(value_of(out), [6j])


def test_fft_ifft_roundtrip(rng):
    for n in (8, 256):
        x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        back = value_of(ifft2(fft2(x)))
        assert np.max(np.abs(back - x)) < 1e-12


def test_softmax_normalized(rng):
    x = rng.standard_normal((5, 10)) * 8
    s = value_of(softmax(x))
    assert np.all(s > 0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_quadratic_fd_exact():
    theta = Parameter(np.array(3.0))
    err = finite_difference_check(lambda: square(theta), [theta], step=1e-5)
    assert err < 1e-9


def test_constant_loss_zero_grad():
    a = Parameter(np.ones(4))
    b = Parameter(np.ones(4))
    g = grad_of(lambda: sum_all(square(a)), [a, b])
    assert np.all(g[1] == 0.0)


def test_double_backward_doubles():
    a = Parameter(np.array([2.0]))
    with Tape() as t:
        loss = sum_all(square(a))
        backward(t, loss)
        g1 = a.grad.copy()
        backward(t, loss)
    assert np.allclose(a.grad, 2 * g1)


def test_backward_rejects_nonscalar_and_complex():
    a = Parameter(np.ones(3))
    with Tape() as t:
        y = square(a)
        with pytest.raises(ValueError, match="scalar"):
            backward(t, y)
    c = Parameter(np.array([1.0 + 0j]))
    with Tape() as t:
        y = reshape(mul(c, c), ())
        with pytest.raises(ValueError, match="real"):
            backward(t, y)


def test_shape_mismatch_diagnostics():
    with pytest.raises(ValueError, match="matmul"):
        matmul(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ValueError, match="conv2d"):
        conv2d(np.ones((1, 2, 4, 4), dtype=complex), np.ones((3, 1, 3, 3), dtype=complex))
    with pytest.raises(ValueError, match="fuse_field"):
        fuse_field(np.ones((2, 2)), np.ones((3, 3), dtype=complex))


def test_untracked_returns_ndarray():
    # frozen parameters and no-tape evaluation both skip recording
    p = Parameter(np.ones(3), requires_grad=False)
    with Tape():
        out = square(p)
    assert isinstance(out, np.ndarray)
    out2 = square(Parameter(np.ones(3)))
    assert isinstance(out2, np.ndarray)


# ------------------------------------------------- directional identities


def test_directional_elementwise_chain(rng):
    raw = Parameter(rng.standard_normal((6, 6)))
    field = rng.standard_normal((3, 6, 6)) + 1j * rng.standard_normal((3, 6, 6))

    def f():
        phase = scale(sigmoid(raw), 2 * np.pi)
        u = mul(field, exp_j(phase))          # broadcast over the batch axis
        return sum_all(abs2(u))

    assert_directional(f, [raw], rng)


def test_directional_add_sub_neg_square(rng):
    a = Parameter(rng.standard_normal((4, 4)))
    b = Parameter(rng.standard_normal((4, 4)))

    def f():
        return sum_all(square(sub(add(a, neg(b)), scale(b, 0.5))))

    assert_directional(f, [a, b], rng)


def test_directional_matmul(rng):
    ar = Parameter(rng.standard_normal((3, 3)))
    ai = Parameter(rng.standard_normal((3, 3)))
    x = rng.standard_normal(3) + 1j * rng.standard_normal(3)

    def f():
        A = complex_from_parts(ar, ai)
        return sum_all(abs2(matmul(A, x)))

    assert_directional(f, [ar, ai], rng)


def test_directional_fft_pad_crop(rng):
    re = Parameter(rng.standard_normal((2, 8, 8)))
    im = Parameter(rng.standard_normal((2, 8, 8)))

    def f():
        u = complex_from_parts(re, im)
        u = pad_center(u, 16)
        u = ifft2(mul(fft2(u), np.exp(1j * rng2_phase)))
        u = crop_center(u, 8)
        return sum_all(abs2(u))

    rng2_phase = np.random.default_rng(7).standard_normal((16, 16))
    assert_directional(f, [re, im], rng)


@settings(deadline=None, max_examples=8)
@given(st.sampled_from([(1, 1), (1, 2), (2, 2)]),
       st.sampled_from([3, 5]),
       st.integers(0, 2 ** 31 - 1))
def test_directional_conv2d(stride, k, seed):
    r = np.random.default_rng(seed)
    H = 8
    wr = Parameter(0.3 * r.standard_normal((3, 2, k, k)))
    wi = Parameter(0.3 * r.standard_normal((3, 2, k, k)))
    x = r.standard_normal((2, 2, H, H)) + 1j * r.standard_normal((2, 2, H, H))

    def f():
        y = conv2d(x, complex_from_parts(wr, wi), stride=stride)
        return sum_all(abs2(crelu(y)))

    assert_directional(f, [wr, wi], r)


@settings(deadline=None, max_examples=8)
@given(st.sampled_from([(1, 1), (2, 2), (1, 2)]),
       st.sampled_from([3, 5]),
       st.integers(0, 2 ** 31 - 1))
def test_directional_conv_transpose2d(stride, k, seed):
    r = np.random.default_rng(seed)
    wr = Parameter(0.3 * r.standard_normal((2, 3, k, k)))
    wi = Parameter(0.3 * r.standard_normal((2, 3, k, k)))
    x = r.standard_normal((2, 2, 4, 4)) + 1j * r.standard_normal((2, 2, 4, 4))

    def f():
        y = conv_transpose2d(x, complex_from_parts(wr, wi), stride=stride)
        return sum_all(abs2(y))

    assert_directional(f, [wr, wi], r)


def test_directional_conv_input_path(rng):
    re = Parameter(rng.standard_normal((2, 1, 8, 8)))
    im = Parameter(rng.standard_normal((2, 1, 8, 8)))
    w = 0.3 * (rng.standard_normal((4, 1, 3, 3)) + 1j * rng.standard_normal((4, 1, 3, 3)))

    def f():
        y = conv2d(complex_from_parts(re, im), w, stride=(2, 2))
        return sum_all(abs2(y))

    assert_directional(f, [re, im], rng)


def test_directional_readout_losses(rng):
    x = Parameter(rng.standard_normal((4, 12, 12)) ** 2)
    labels = np.array([0, 3, 9, 1])
    anchors = [(r, c) for r in (1, 7) for c in (0, 2, 4, 6, 8)]

    def f():
        logits = region_sum(x, anchors, 2)
        return cross_entropy_logits(logits, labels)

    assert_directional(f, [x], rng)


def test_directional_gather(rng):
    x = Parameter(rng.standard_normal((3, 16)))
    labels = np.array([1, 0, 2])

    def f():
        return cross_entropy_logits(gather_ports(x, np.arange(10)), labels)

    assert_directional(f, [x], rng)


# ------------------------------------------------------------ conv semantics


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 5, 5)) + 1j * rng.standard_normal((1, 1, 5, 5))
    w = np.zeros((1, 1, 1, 1), dtype=complex)
    w[0, 0, 0, 0] = 1.0
    assert np.allclose(value_of(conv2d(x, w)), x)


def test_conv_real_input_imag_kernel(rng):
    x = rng.standard_normal((1, 1, 6, 6)).astype(complex)
    w = 1j * rng.standard_normal((2, 1, 3, 3))
    y = value_of(conv2d(x, w.astype(complex)))
    assert np.allclose(y.real, 0.0)


def test_conv_extent_roundtrip(rng):
    x = rng.standard_normal((1, 1, 8, 8)).astype(complex)
    down = conv2d(x, rng.standard_normal((4, 1, 3, 3)).astype(complex), stride=(2, 2))
    assert value_of(down).shape == (1, 4, 4, 4)
    up = conv_transpose2d(down, rng.standard_normal((4, 1, 3, 3)).astype(complex), stride=(2, 2))
    assert value_of(up).shape == (1, 1, 8, 8)


def test_conv_rejects_odd_extent_stride2():
    x = np.ones((1, 1, 7, 7), dtype=complex)
    w = np.ones((1, 1, 3, 3), dtype=complex)
    with pytest.raises(ValueError, match="divisible"):
        conv2d(x, w, stride=(2, 2))


def test_conv_row_maps_on_height_one(rng):
    # 1 x L maps: only the middle kernel row touches data
    x = rng.standard_normal((1, 1, 1, 8)) + 0j
    w = rng.standard_normal((1, 1, 3, 3)) + 0j
    y = value_of(conv2d(x, w, stride=(1, 2)))
    assert y.shape == (1, 1, 1, 4)
    mid = w[:, :, 1:2, :]
    ref = value_of(conv2d(x, np.pad(mid, ((0, 0), (0, 0), (1, 1), (0, 0))), stride=(1, 2)))
    assert np.allclose(y, ref)


# ------------------------------------------------------------------ fusion


def test_fuse_matches_definitions(rng):
    s = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    p = np.abs(s) ** 2
    assert np.allclose(value_of(fuse_field(p, s)), s, atol=1e-12)
    s_pos = np.abs(s).astype(complex)
    assert np.allclose(value_of(fuse_field(4 * np.abs(s_pos) ** 2, s_pos)), 2 * s_pos)
    p2 = rng.random((4, 4))
    assert np.array_equal(value_of(fused_intensity(p2, s)), p2)  # exact replacement


def test_fuse_rejects_negative_intensity(rng):
    s = rng.standard_normal((2, 2)) + 0j
    p = np.array([[1.0, -0.1], [0.0, 2.0]])
    with pytest.raises(ValueError, match="negative"):
        fuse_field(p, s)


def test_fuse_straight_through_gradient(rng):
    # with p = |s|^2 the fused pipeline backpropagates like the plain one
    raw = Parameter(rng.standard_normal((4, 4)))
    x = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))

    def plain():
        u = mul(x, exp_j(raw))
        return sum_all(square(abs2(u)))

    u0 = x * np.exp(1j * raw.value)
    p = np.abs(u0) ** 2

    def fused():
        u = mul(x, exp_j(raw))
        return sum_all(square(fused_intensity(p, u)))

    g_plain = grad_of(plain, [raw])[0]
    g_fused = grad_of(fused, [raw])[0]
    assert np.allclose(g_plain, g_fused, atol=1e-10)


def test_fused_intensity_gradient_at_fused_point(rng):
    # cotangent into s is the |.|^2 adjoint evaluated at the fused field
    s = Parameter(rng.standard_normal((3,)) + 1j * rng.standard_normal((3,)))
    p = rng.random(3)

    def f():
        return sum_all(fused_intensity(p, s))

    g = grad_of(f, [s])[0]
    fusedv = np.sqrt(p) * s.value / np.abs(s.value)
    assert np.allclose(g, 2 * fusedv)


# ------------------------------------------------------- fd oracle behavior


def test_fd_check_composite(rng):
    w = Parameter(rng.standard_normal((2, 2)))
    x = rng.standard_normal((1, 2, 2)) + 1j * rng.standard_normal((1, 2, 2))

    ref = rng.standard_normal((1, 2, 2)) + 1j * rng.standard_normal((1, 2, 2))

    def f():
        u = sub(mul(x, exp_j(w)), ref)
        return sum_all(abs2(u))

    assert finite_difference_check(f, [w], step=1e-5) < 1e-6


def test_fd_check_rejects_bad_step():
    p = Parameter(np.array(1.0))
    with pytest.raises(ValueError):
        finite_difference_check(lambda: square(p), [p], step=0.0)
