"""Residual error-prediction network: wiring, counts, gradients."""

import numpy as np
import pytest

from dualpnn import cgraph as cg
from dualpnn.sepn import Sepn, SepnConfig, implemented_param_count, paper_param_count


def cfg(h=8, w=8, f=(2, 3, 4), k=3):
    return SepnConfig(f1=f[0], f2=f[1], f3=f[2], k=k, height=h, width=w)


def rand_input(rng, n, h, w):
    return rng.standard_normal((n, 1, h, w)) + 1j * rng.standard_normal((n, 1, h, w))


def test_crelu_examples():
    x = np.array([1 - 2j, -1 - 1j, 3 + 4j])
    out = cg.value_of(cg.crelu(x))
    assert np.allclose(out, [1 + 0j, 0 + 0j, 3 + 4j])


def test_zero_weights_zero_output():
    net = Sepn(cfg(), init="zeros")
    rng = np.random.default_rng(0)
    out = cg.value_of(net.forward(rand_input(rng, 2, 8, 8)))
    assert np.all(out == 0)
    assert out.shape == (2, 1, 8, 8)


@pytest.mark.parametrize("extent", [8, 64, 200])
def test_shape_contract(extent):
    net = Sepn(cfg(h=extent, w=extent), seed=extent)
    rng = np.random.default_rng(extent)
    out = cg.value_of(net.forward(rand_input(rng, 1, extent, extent)))
    assert out.shape == (1, 1, extent, extent)
    assert out.dtype == np.complex128


def test_extent_mismatch_rejected():
    net = Sepn(cfg(h=8, w=8))
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 8, 12), dtype=np.complex128))


def test_config_validation():
    with pytest.raises(ValueError):
        SepnConfig(f1=2, f2=3, f3=4, k=4, height=8, width=8)   # even kernel
    with pytest.raises(ValueError):
        SepnConfig(f1=2, f2=3, f3=4, k=3, height=10, width=8)  # 10 % 4 != 0
    # height 1 (port vectors) skips the height divisibility rule
    c = SepnConfig(f1=2, f2=3, f3=4, k=3, height=1, width=16)
    assert c.strides == (1, 2)


def test_linear_when_activations_bypassed():
    net = Sepn(cfg(), seed=7)
    rng = np.random.default_rng(7)
    x = rand_input(rng, 1, 8, 8)
    y = rand_input(rng, 1, 8, 8)
    a, b = 0.7 - 0.2j, -1.1 + 0.4j

    def f(v):
        return cg.value_of(net.forward(v, activations=False))

    lhs = f(a * x + b * y)
    rhs = a * f(x) + b * f(y)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_paper_param_count_values():
    assert paper_param_count(4, 8, 16, 5) == 26_800
    assert paper_param_count(4, 6, 8, 3) == 3_960
    assert paper_param_count(4, 8, 16, 3) == 9_648


def test_implemented_count_matches_introspection():
    for f1, f2, f3, k in [(4, 8, 16, 5), (4, 6, 8, 3), (2, 3, 4, 3)]:
        net = Sepn(SepnConfig(f1=f1, f2=f2, f3=f3, k=k, height=8, width=8))
        assert net.param_count() == implemented_param_count(f1, f2, f3, k)
    assert implemented_param_count(4, 8, 16, 5) == 29_200


def test_weight_gradients_match_finite_difference():
    net = Sepn(cfg(), seed=3)
    rng = np.random.default_rng(3)
    # deployment-scale init (0.02) leaves the loss too small to resolve
    # with finite differences, so probe at O(0.3) weights instead
    for p in net.parameters():
        p.value[...] = 0.3 * rng.standard_normal(p.shape)
    x = rand_input(rng, 1, 8, 8)

    def loss():
        return cg.sum_all(cg.abs2(net.forward(x)))

    worst = cg.finite_difference_check(loss, net.parameters(),
                                       max_entries=4, seed=1)
    assert worst < 1e-4


def test_forward_field_and_ports_round_shapes():
    net = Sepn(cfg(h=8, w=8), seed=1)
    rng = np.random.default_rng(1)
    u = rng.standard_normal((3, 8, 8)) + 1j * rng.standard_normal((3, 8, 8))
    out = cg.value_of(net.forward_field(u))
    assert out.shape == (3, 8, 8)

    pnet = Sepn(cfg(h=1, w=16), seed=2)
    z = rng.standard_normal((5, 16)) + 1j * rng.standard_normal((5, 16))
    pout = cg.value_of(pnet.forward_ports(z))
    assert pout.shape == (5, 16)


def test_initialization_scale_and_determinism():
    net1 = Sepn(cfg(), seed=11)
    net2 = Sepn(cfg(), seed=11)
    net3 = Sepn(cfg(), seed=12)
    for p1, p2 in zip(net1.parameters(), net2.parameters()):
        assert np.array_equal(p1.value, p2.value)
    assert any(not np.array_equal(p1.value, p3.value)
               for p1, p3 in zip(net1.parameters(), net3.parameters()))
    allw = np.concatenate([p.value.ravel() for p in net1.parameters()])
    assert 0.01 < np.std(allw) < 0.03
