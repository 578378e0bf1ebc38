"""Free-space propagation, phase modulation, geometry transforms,
detector readout, and the diffractive network forwards."""

import numpy as np
import pytest
from types import SimpleNamespace

from dualpnn import cgraph as cg
from dualpnn.optics import (
    BlockGeometry, DetectorLayout, DpnnModel, DpnnTopology, PhaseLayer,
    dpnn_forward_physical, modulate, propagate, rotate_pattern,
    sample_through_transform, shift_pattern, transform_pattern,
)

PITCH = 17e-6
WL = 1.55e-6


def gaussian(grid, waist_px, dtype=np.complex128):
    c = (grid - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(grid) - c, np.arange(grid) - c, indexing="ij")
    return np.exp(-(rr**2 + cc**2) / waist_px**2).astype(dtype)


def zero_realization(blocks):
    return SimpleNamespace(z_shift=0.0, x_shift=0, rotation=0.0,
                           phase_offsets={b: (0.0, 0.0) for b in blocks})


# ---------------------------------------------------------------------------
# propagate
# ---------------------------------------------------------------------------

def test_propagate_zero_field():
    u = np.zeros((64, 64), dtype=np.complex128)
    out = propagate(u, PITCH, WL, 0.3)
    assert np.all(out == 0)


def test_propagate_zero_distance_identity():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    out = propagate(u, PITCH, WL, 0.0)
    assert np.max(np.abs(out - u)) < 1e-10


def test_propagate_gaussian_round_trip_and_energy():
    # 34 um pitch keeps the 10 px waist inside a 256 grid over 30 cm
    g, pitch = 256, 34e-6
    u = gaussian(g, 10)
    fwd = propagate(u, pitch, WL, 0.30)
    # energy conserved inside the window for a contained beam
    ratio = np.sum(np.abs(fwd) ** 2) / np.sum(np.abs(u) ** 2)
    assert abs(ratio - 1.0) < 1e-6
    # conjugate-transfer backward pass undoes the forward pass
    h = np.conj(_transfer_for(g, pitch, 0.30))
    back = _apply(fwd, h)
    assert np.max(np.abs(back - u)) < 1e-8


def _transfer_for(grid, pitch, z):
    from dualpnn.optics import _transfer
    return _transfer(2 * grid, pitch, WL, z)


def _apply(u, h):
    from dualpnn.optics import _asm_apply
    return _asm_apply(u, h)


def test_propagate_rejects_negative_distance():
    u = np.zeros((8, 8), dtype=np.complex128)
    with pytest.raises(ValueError):
        propagate(u, PITCH, WL, -0.1)
    with pytest.raises(ValueError):
        propagate(u, 0.0, WL, 0.1)


def test_propagate_batched_matches_loop():
    rng = np.random.default_rng(1)
    u = rng.standard_normal((3, 32, 32)) + 1j * rng.standard_normal((3, 32, 32))
    out = propagate(u, PITCH, WL, 0.05)
    for i in range(3):
        single = propagate(u[i], PITCH, WL, 0.05)
        assert np.allclose(out[i], single, atol=1e-14)


def test_propagate_no_nan_on_fine_grids():
    # pitch below half a wavelength creates an evanescent band; it is
    # cut, not amplified
    u = np.zeros((32, 32), dtype=np.complex128)
    u[16, 16] = 1.0
    out = propagate(u, 0.5e-6, WL, 0.01)
    assert np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# modulate
# ---------------------------------------------------------------------------

def test_modulate_sigmoid_midpoint_negates():
    layer = PhaseLayer(np.zeros((16, 16)))
    u = gaussian(16, 4)
    out = modulate(u, layer)
    assert np.allclose(out, -u, atol=1e-12)


def test_modulate_unit_modulus():
    rng = np.random.default_rng(2)
    layer = PhaseLayer(rng.standard_normal((16, 16)) * 3)
    u = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    out = modulate(u, layer)
    assert np.max(np.abs(np.abs(out) - np.abs(u))) < 1e-14


def test_modulate_offset_pi_cancels_midpoint():
    layer = PhaseLayer(np.zeros((8, 8)))
    eps = np.zeros((8, 8))
    eps[3, 5] = np.pi
    u = np.ones((8, 8), dtype=np.complex128)
    out = modulate(u, layer, eps=eps)
    assert abs(out[3, 5] - 1.0) < 1e-12          # e^{j(pi+pi)} = +1
    assert abs(out[0, 0] + 1.0) < 1e-12          # elsewhere still -1


def test_modulate_shape_mismatch_rejected():
    layer = PhaseLayer(np.zeros((8, 8)))
    with pytest.raises(ValueError):
        modulate(np.ones((9, 9), dtype=np.complex128), layer)


# ---------------------------------------------------------------------------
# pattern transforms
# ---------------------------------------------------------------------------

def test_shift_pattern_semantics():
    a = np.arange(16.0).reshape(4, 4)
    s = shift_pattern(a, 1)
    assert np.all(s[:, 0] == 0)
    assert np.array_equal(s[:, 1:], a[:, :-1])
    assert np.array_equal(shift_pattern(s, -1)[:, :-1], a[:, :-1])


def test_rotate_pattern_quarter_turn():
    a = np.zeros((9, 9))
    a[4, 7] = 1.0  # on the +column axis
    r = rotate_pattern(a, 90.0)
    # +column rotates toward -row (counterclockwise on screen)
    assert r[1, 4] == pytest.approx(1.0, abs=1e-12)
    assert r[4, 7] == pytest.approx(0.0, abs=1e-12)


def test_rotate_pattern_inverse_pair():
    # smooth pattern: two opposite bilinear rotations nearly cancel
    a = gaussian(32, 6).real
    r = rotate_pattern(rotate_pattern(a, 7.0), -7.0)
    assert np.max(np.abs(r - a)) < 0.02
    assert abs(np.sum(r) - np.sum(a)) / np.sum(a) < 0.01
    # rotating an isotropic pattern changes nothing measurable
    assert np.max(np.abs(rotate_pattern(a, 90.0) - a)) < 1e-12


def test_sample_through_transform_inverts_shift():
    rng = np.random.default_rng(4)
    a = rng.random((16, 16))
    moved = transform_pattern(a, 3, 0.0)
    back = sample_through_transform(moved, 3, 0.0)
    assert np.array_equal(back[:, :-3], a[:, :-3])


# ---------------------------------------------------------------------------
# detector layout
# ---------------------------------------------------------------------------

def test_detector_uniform_layout_200():
    lay = DetectorLayout.uniform(200)
    assert lay.size == 22
    sums = lay.readout(np.ones((200, 200)))
    assert sums.shape == (10,)
    assert np.allclose(sums, 484.0)


def test_detector_zero_and_single_pixel():
    lay = DetectorLayout.uniform(200)
    assert np.all(lay.readout(np.zeros((200, 200))) == 0)
    m = np.zeros((200, 200))
    r, c = lay.anchors[3]
    m[r + 5, c + 5] = 2.5
    out = lay.readout(m)
    assert out[3] == pytest.approx(2.5)
    assert np.sum(out != 0) == 1


def test_detector_rejects_overlap_and_outside():
    with pytest.raises(ValueError):
        DetectorLayout(grid=50, size=10, anchors=tuple((0, 0) for _ in range(10)))
    anchors = tuple((45, 5 * i) for i in range(10))
    with pytest.raises(ValueError):
        DetectorLayout(grid=50, size=10, anchors=anchors)


def test_detector_argmax_scale_invariant():
    rng = np.random.default_rng(5)
    lay = DetectorLayout.uniform(64)
    m = rng.random((64, 64))
    a = lay.readout(m)
    b = lay.readout(3.7 * m)
    assert np.argmax(a) == np.argmax(b)


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

def test_topology_chain_and_funnel():
    assert DpnnTopology.chain(1).blocks == ("b1",)
    f = DpnnTopology.funnel7()
    assert len(f.blocks) == 7
    assert f.sink == "out"
    assert f.stage("a3") == 1 and f.stage("m2") == 2 and f.stage("out") == 3
    assert set(f.entries) == {"a1", "a2", "a3", "a4"}


def test_topology_rejects_cycle_and_multi_sink():
    with pytest.raises(ValueError):
        DpnnTopology(blocks=("a", "b"), edges=(("a", "b"), ("b", "a")))
    with pytest.raises(ValueError):
        DpnnTopology(blocks=("a", "b", "c"), edges=(("a", "b"),))
    with pytest.raises(ValueError):
        DpnnTopology(blocks=("a",), edges=(("a", "x"),))


# ---------------------------------------------------------------------------
# diffractive model
# ---------------------------------------------------------------------------

def small_model(grid=32, blocks=1, distance=0.05, seed=0):
    topo = DpnnTopology.chain(blocks) if blocks != 7 else DpnnTopology.funnel7()
    geo = BlockGeometry(grid=grid, pitch=PITCH * 200 / grid, wavelength=WL,
                        distance=distance)
    det = DetectorLayout.uniform(grid)
    return DpnnModel(topo, geo, det, seed=seed)


def test_block_compositional_oracle():
    model = small_model(grid=32)
    for layer in model.layers["b1"]:
        layer.raw.value[...] = 0.0
    x = np.zeros((32, 32))
    x[16, 16] = 1.0
    got = dpnn_forward_physical(model, zero_realization(["b1"]), x)["b1"]

    geo = model.geometry
    u = propagate(x, geo.pitch, geo.wavelength, geo.distance)
    u = modulate(u, model.layers["b1"][0])
    u = propagate(u, geo.pitch, geo.wavelength, geo.distance)
    u = modulate(u, model.layers["b1"][1])
    u = propagate(u, geo.pitch, geo.wavelength, geo.distance)
    want = np.abs(cg.value_of(u)) ** 2
    assert np.max(np.abs(got - want)) < 1e-14


def test_block_zero_input():
    model = small_model(grid=16)
    out = dpnn_forward_physical(model, zero_realization(["b1"]),
                                np.zeros((16, 16)))
    assert np.all(out["b1"] == 0)


def test_shift_error_translates_output_for_uniform_layers():
    # with near-zero uniform phases the patterns are shift-invariant, so
    # a 1 px per-layer misalignment shows up purely as a 3 px sensor
    # offset at the block output
    model = small_model(grid=64, distance=0.01)
    for layer in model.layers["b1"]:
        layer.raw.value[...] = -30.0
    x = gaussian(64, 6).real
    ideal = dpnn_forward_physical(model, zero_realization(["b1"]), x)["b1"]
    real = SimpleNamespace(z_shift=0.0, x_shift=1, rotation=0.0,
                           phase_offsets={"b1": (0.0, 0.0)})
    shifted = dpnn_forward_physical(model, real, x)["b1"]
    assert np.max(np.abs(shifted - shift_pattern(ideal, -3))) < 1e-12


def test_funnel_symmetry():
    model = small_model(grid=32, blocks=7)
    src1, src2 = model.layers["a1"]
    for b in model.topology.blocks:
        l1, l2 = model.layers[b]
        l1.raw.value[...] = src1.raw.value
        l2.raw.value[...] = src2.raw.value
    x = gaussian(32, 5).real
    out = dpnn_forward_physical(model, zero_realization(model.topology.blocks), x)
    for b in ("a2", "a3", "a4"):
        assert np.max(np.abs(out[b] - out["a1"])) < 1e-12
    assert np.max(np.abs(out["m2"] - out["m1"])) < 1e-12
    assert "out" in out


def test_numerical_equals_physical_without_errors():
    model = small_model(grid=32, blocks=7)
    x = gaussian(32, 5).real[None]
    phys = dpnn_forward_physical(model, zero_realization(model.topology.blocks), x)
    states, outputs = model.forward_numerical(x)
    for b in model.topology.blocks:
        assert np.max(np.abs(cg.value_of(outputs[b]) - phys[b])) < 1e-10
        s = cg.value_of(states[b])
        assert np.max(np.abs(np.abs(s) ** 2 - cg.value_of(outputs[b]))) < 1e-14


def test_single_block_forward_matches_block_call():
    model = small_model(grid=16)
    x = gaussian(16, 3).real[None]
    states, outputs = model.forward_numerical(x)
    direct = model.block_forward_numerical(x, "b1")
    assert np.array_equal(cg.value_of(states["b1"]), cg.value_of(direct))


def test_element_offset_steps():
    model = small_model(grid=16, blocks=7)
    assert model.element_offset_steps("a1", 1) == 1
    assert model.element_offset_steps("a1", 3) == 3
    assert model.element_offset_steps("m1", 2) == 5
    assert model.element_offset_steps("out", 3) == 9


def test_phase_gradients_match_finite_difference():
    model = small_model(grid=16)
    # uniform illumination keeps every phase pixel influential
    x = np.full((1, 16, 16), 0.5)

    def loss():
        _, outputs = model.forward_numerical(x)
        return cg.sum_all(outputs["b1"])

    worst = cg.finite_difference_check(loss, model.parameters(),
                                       max_entries=8, seed=0)
    assert worst < 1e-4


def test_forward_numerical_offset_mode_requires_offsets():
    model = small_model(grid=16)
    x = gaussian(16, 3).real[None]
    with pytest.raises(ValueError):
        model.forward_numerical(x, measured={"b1": np.ones((1, 16, 16))},
                                fusion="offset")


def test_geometry_validation():
    with pytest.raises(ValueError):
        BlockGeometry(grid=15, pitch=PITCH, wavelength=WL, distance=0.1)
    with pytest.raises(ValueError):
        BlockGeometry(grid=16, pitch=-1.0, wavelength=WL, distance=0.1)
