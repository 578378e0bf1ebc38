"""Free-space diffractive optics: angular-spectrum propagation, phase
modulation layers, detector readout, and the diffractive network forward
models (emulated-hardware and differentiable-numerical variants).

Conventions pinned here:

* Fields are (..., G, G) complex arrays on a square grid with uniform
  pixel pitch; a leading batch axis is always allowed.
* propagate() zero-pads to twice the linear extent, applies the
  angular-spectrum transfer function with a hard band limit (evanescent
  components zeroed), and crops back.  z >= 0 only; backward transfer is
  the adjoint (conjugate kernel), which the tape uses automatically.
* Geometric imperfections act on the hardware side only: each phase
  pattern is redrawn at its cumulative offset (rotate about the grid
  centre, then shift columns with zero fill), and intensities are read
  through the inverse transform of the misaligned sensor plane.  Offsets
  grow by one step per element: within a block the two modulation layers
  and the output plane sit at steps 1, 2, 3 past the block's entry, and
  cascaded blocks keep counting.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.fft
from scipy.special import expit

from . import cgraph as cg
from .cgraph import Parameter, value_of

TWO_PI = 2.0 * np.pi
_FFT_WORKERS = min(8, os.cpu_count() or 1)

__all__ = [
    "propagate", "PhaseLayer", "modulate", "DetectorLayout",
    "shift_pattern", "rotate_pattern", "transform_pattern", "sample_through_transform",
    "DpnnTopology", "DpnnModel", "BlockGeometry", "dpnn_forward_physical",
]


# ---------------------------------------------------------------------------
# angular spectrum propagation
# ---------------------------------------------------------------------------

_transfer_cache: dict = {}


def _transfer(big: int, pitch: float, wavelength: float, z: float) -> np.ndarray:
    key = (big, float(pitch), float(wavelength), float(z))
    h = _transfer_cache.get(key)
    if h is None:
        f = scipy.fft.fftfreq(big, d=pitch)
        fx2 = (wavelength * f[None, :]) ** 2
        fy2 = (wavelength * f[:, None]) ** 2
        arg = 1.0 - fx2 - fy2
        prop = arg > 0
        h = np.where(prop, np.exp(1j * TWO_PI * (z / wavelength) * np.sqrt(np.maximum(arg, 0.0))), 0.0)
        _transfer_cache[key] = h
    return h


def _asm_apply(u: np.ndarray, h: np.ndarray) -> np.ndarray:
    g = u.shape[-1]
    big = h.shape[-1]
    r0 = (big - g) // 2
    up = np.zeros(u.shape[:-2] + (big, big), dtype=np.complex128)
    up[..., r0:r0 + g, r0:r0 + g] = u
    spec = scipy.fft.fft2(up, workers=_FFT_WORKERS)
    spec *= h
    out = scipy.fft.ifft2(spec, workers=_FFT_WORKERS)
    return np.ascontiguousarray(out[..., r0:r0 + g, r0:r0 + g])


def propagate(u, pitch: float, wavelength: float, z: float):
    """Free-space transfer over distance z (meters), tape-aware.

    The adjoint of this linear map is the same pipeline with the
    conjugate transfer kernel, i.e. propagation back over -z restricted
    to the propagating band.
    """
    if pitch <= 0 or wavelength <= 0:
        raise ValueError("propagate: pitch and wavelength must be positive")
    if z < 0:
        raise ValueError(f"propagate: distance must be >= 0, got {z}")
    uv = value_of(u)
    if uv.shape[-1] != uv.shape[-2]:
        raise ValueError(f"propagate: square grids only, got {uv.shape}")
    h = _transfer(2 * uv.shape[-1], pitch, wavelength, z)
    out = _asm_apply(uv, h)
    hc = np.conj(h)
    return cg.record("propagate", out, [(u, lambda g: _asm_apply(g, hc))])


# ---------------------------------------------------------------------------
# phase layers
# ---------------------------------------------------------------------------

class PhaseLayer:
    """Learnable phase pattern with modulation bounded to (0, 2*pi).

    The raw values pass through a sigmoid, so phase = 2*pi*sigmoid(raw);
    the hardware variant adds a per-pixel phase-shift offset in radians.
    """

    def __init__(self, raw: np.ndarray, name: str = "phase"):
        self.raw = Parameter(np.asarray(raw, dtype=np.float64), name=name)

    @property
    def grid(self) -> int:
        return self.raw.shape[-1]

    def ideal_phase(self):
        return cg.scale(cg.sigmoid(self.raw), TWO_PI)

    def physical_phase(self, eps: np.ndarray | float = 0.0) -> np.ndarray:
        return TWO_PI * expit(self.raw.value) + eps


def modulate(field, layer: PhaseLayer, eps: np.ndarray | None = None):
    """Multiply a field by the layer's unit-modulus modulation.

    eps (radians) switches to the hardware phase map; it is measured
    data, so that path is evaluated outside any tape.
    """
    fv = value_of(field)
    if fv.shape[-2:] != layer.raw.shape:
        raise ValueError(f"modulate: field {fv.shape} vs layer {layer.raw.shape}")
    if eps is None:
        return cg.mul(field, cg.exp_j(layer.ideal_phase()))
    return fv * np.exp(1j * layer.physical_phase(eps))


# ---------------------------------------------------------------------------
# pattern / sensor geometry
# ---------------------------------------------------------------------------

def shift_pattern(arr: np.ndarray, px: int) -> np.ndarray:
    """Translate along the column axis by an integer number of pixels,
    filling vacated pixels with zero."""
    px = int(px)
    out = np.zeros_like(arr)
    if px == 0:
        out[...] = arr
    elif px > 0:
        out[..., px:] = arr[..., :-px]
    else:
        out[..., :px] = arr[..., -px:]
    return out


def rotate_pattern(arr: np.ndarray, deg: float) -> np.ndarray:
    """Rotate about the grid centre by bilinear resampling, zero fill.

    Positive angles rotate the pattern from the +column direction toward
    the -row direction (counterclockwise on screen).
    """
    if deg == 0:
        return arr.copy()
    g = arr.shape[-1]
    c = (g - 1) / 2.0
    th = np.deg2rad(deg)
    co, si = np.cos(th), np.sin(th)
    rr, cc = np.meshgrid(np.arange(g) - c, np.arange(g) - c, indexing="ij")
    # sample the source at the inverse rotation of each target pixel
    src_r = co * rr + si * cc + c
    src_c = -si * rr + co * cc + c
    r0 = np.floor(src_r).astype(np.intp)
    c0 = np.floor(src_c).astype(np.intp)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros_like(arr)
    for dr in (0, 1):
        for dc in (0, 1):
            ri = r0 + dr
            ci = c0 + dc
            w = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
            valid = (ri >= 0) & (ri < g) & (ci >= 0) & (ci < g)
            riv = np.clip(ri, 0, g - 1)
            civ = np.clip(ci, 0, g - 1)
            out += np.where(valid, w, 0.0) * arr[..., riv, civ]
    return out


def transform_pattern(arr: np.ndarray, px: int, deg: float) -> np.ndarray:
    """Redraw a device pattern at its misaligned pose (rotate, then shift)."""
    return shift_pattern(rotate_pattern(arr, deg), px)


def sample_through_transform(arr: np.ndarray, px: int, deg: float) -> np.ndarray:
    """Read a map through a sensor misaligned by (px, deg): the inverse
    transform of transform_pattern, applied to the arriving intensity."""
    return rotate_pattern(shift_pattern(arr, -px), -deg)


# ---------------------------------------------------------------------------
# detector layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorLayout:
    """Ten square readout regions (one per class) on the output grid."""

    grid: int
    size: int
    anchors: tuple  # ((row, col) top-left corners)

    def __post_init__(self):
        if len(self.anchors) != 10:
            raise ValueError(f"DetectorLayout: exactly 10 regions required, got {len(self.anchors)}")
        boxes = []
        for (r, c) in self.anchors:
            if r < 0 or c < 0 or r + self.size > self.grid or c + self.size > self.grid:
                raise ValueError(f"DetectorLayout: region ({r},{c}) outside grid {self.grid}")
            boxes.append((r, c))
        for i, (r1, c1) in enumerate(boxes):
            for (r2, c2) in boxes[i + 1:]:
                if abs(r1 - r2) < self.size and abs(c1 - c2) < self.size:
                    raise ValueError("DetectorLayout: regions overlap")

    @classmethod
    def uniform(cls, grid: int, rows: int = 2, cols: int = 5, size: int | None = None):
        """Equal-gap 2 x 5 layout; region side scales with the grid
        (22 px on a 200 grid)."""
        if size is None:
            size = max(1, round(22 * grid / 200))
        anchors = []
        for i in range(rows):
            r = round((grid - rows * size) * (i + 1) / (rows + 1) + size * i)
            for k in range(cols):
                c = round((grid - cols * size) * (k + 1) / (cols + 1) + size * k)
                anchors.append((r, c))
        return cls(grid=grid, size=size, anchors=tuple(anchors))

    def readout(self, intensity):
        """Sum each region; tape-aware. Returns (..., 10)."""
        return cg.region_sum(intensity, self.anchors, self.size)


# ---------------------------------------------------------------------------
# network topology
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DpnnTopology:
    """DAG of diffractive blocks with intensity handoff along edges.

    A block's input is the encoded sample (entry blocks) or the pixelwise
    sum of its parents' output intensities.  Exactly one sink feeds the
    detector layout.
    """

    blocks: tuple
    edges: tuple  # (src, dst) pairs

    def __post_init__(self):
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("DpnnTopology: duplicate block ids")
        known = set(self.blocks)
        for (a, b) in self.edges:
            if a not in known or b not in known:
                raise ValueError(f"DpnnTopology: edge ({a},{b}) references unknown block")
        order = self.topo_order()  # raises on cycles
        sinks = [b for b in self.blocks if not any(e[0] == b for e in self.edges)]
        if len(sinks) != 1:
            raise ValueError(f"DpnnTopology: exactly one sink required, got {sinks}")
        object.__setattr__(self, "_order", tuple(order))

    @classmethod
    def chain(cls, n: int = 1):
        blocks = tuple(f"b{i + 1}" for i in range(n))
        edges = tuple((blocks[i], blocks[i + 1]) for i in range(n - 1))
        return cls(blocks=blocks, edges=edges)

    @classmethod
    def funnel7(cls):
        """Seven blocks in three stages (4 -> 2 -> 1)."""
        blocks = ("a1", "a2", "a3", "a4", "m1", "m2", "out")
        edges = (("a1", "m1"), ("a2", "m1"), ("a3", "m2"), ("a4", "m2"),
                 ("m1", "out"), ("m2", "out"))
        return cls(blocks=blocks, edges=edges)

    def parents(self, block) -> list:
        return [a for (a, b) in self.edges if b == block]

    def topo_order(self) -> list:
        indeg = {b: 0 for b in self.blocks}
        for (_, b) in self.edges:
            indeg[b] += 1
        ready = [b for b in self.blocks if indeg[b] == 0]
        order = []
        while ready:
            b = ready.pop(0)
            order.append(b)
            for (x, y) in self.edges:
                if x == b:
                    indeg[y] -= 1
                    if indeg[y] == 0:
                        ready.append(y)
        if len(order) != len(self.blocks):
            raise ValueError("DpnnTopology: cycle detected")
        return order

    @property
    def sink(self):
        return [b for b in self.blocks if not any(e[0] == b for e in self.edges)][0]

    @property
    def entries(self) -> tuple:
        return tuple(b for b in self.blocks if not self.parents(b))

    def stage(self, block) -> int:
        """1-based depth of a block (longest path from an entry)."""
        depth = {}
        for b in self._order:
            ps = self.parents(b)
            depth[b] = 1 if not ps else 1 + max(depth[p] for p in ps)
        return depth[block]


# ---------------------------------------------------------------------------
# diffractive model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockGeometry:
    grid: int
    pitch: float
    wavelength: float
    distance: float  # per-hop propagation distance, meters

    def __post_init__(self):
        if self.grid < 4 or self.grid % 2:
            raise ValueError(f"BlockGeometry: grid must be even and >= 4, got {self.grid}")
        if min(self.pitch, self.wavelength) <= 0 or self.distance < 0:
            raise ValueError("BlockGeometry: pitch/wavelength must be > 0 and distance >= 0")


class DpnnModel:
    """Diffractive network: blocks of three free-space hops with two
    learnable phase layers each, connected per a DAG with intensity
    handoff, read out by a fixed detector layout."""

    def __init__(self, topology: DpnnTopology, geometry: BlockGeometry,
                 detector: DetectorLayout, seed: int = 0):
        if detector.grid != geometry.grid:
            raise ValueError("DpnnModel: detector grid does not match field grid")
        self.topology = topology
        self.geometry = geometry
        self.detector = detector
        ent = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=ent + (0,)))
        g = geometry.grid
        self.layers = {
            b: (PhaseLayer(rng.standard_normal((g, g)), name=f"{b}.phase1"),
                PhaseLayer(rng.standard_normal((g, g)), name=f"{b}.phase2"))
            for b in topology.blocks
        }

    def parameters(self) -> list:
        return [layer.raw for b in self.topology.blocks for layer in self.layers[b]]

    # -- numerical (differentiable) model ---------------------------------

    def _hop(self, u):
        geo = self.geometry
        return propagate(u, geo.pitch, geo.wavelength, geo.distance)

    def block_forward_numerical(self, x, block, sepns=None, sepn_detach=False):
        """One block per the residually corrected model: each free-space
        hop is followed by its error-prediction residual, then (for the
        first two hops) by the phase modulation.

        sepn_detach evaluates the residuals as constants: their values
        stay in the forward pass but carry no gradient paths.
        """
        def res(sepn, u):
            if sepn_detach:
                with cg.no_grad():
                    r = sepn.forward_field(cg.value_of(u))
                return cg.add(u, r)
            return cg.add(u, sepn.forward_field(u))

        l1, l2 = self.layers[block]
        u = self._hop(x)
        if sepns is not None:
            u = res(sepns[0], u)
        u = modulate(u, l1)
        u = self._hop(u)
        if sepns is not None:
            u = res(sepns[1], u)
        u = modulate(u, l2)
        u = self._hop(u)
        if sepns is not None:
            u = res(sepns[2], u)
        return u

    def forward_numerical(self, x, sepns=None, measured=None, fusion="replace",
                          offsets=None, sepn_detach=False):
        """Run every block in topological order.

        x: encoded input (N, G, G) real amplitude.
        sepns: {block: (sepn1, sepn2, sepn3)} or None for the ideal model.
        measured: {block: P} hardware intensities for any subset of
        blocks; where given, the block's output intensity is fused
        before feeding its children ("replace": measured value with
        straight-through gradients; "offset": (|S| + offsets[block])^2
        with the frozen amplitude offset sqrt(P) - |S_0|, the ordinary
        differentiable surrogate whose derivative at S_0 the replace
        mode computes).
        Returns (states, outputs): {block: S} complex and {block: O} real.
        """
        if measured is not None and fusion == "offset" and offsets is None:
            raise ValueError("forward_numerical: offset fusion requires offsets")
        states, outputs = {}, {}
        for b in self.topology._order:
            parents = self.topology.parents(b)
            if not parents:
                inp = x
            else:
                inp = outputs[parents[0]]
                for p in parents[1:]:
                    inp = cg.add(inp, outputs[p])
            s = self.block_forward_numerical(
                inp, b, None if sepns is None else sepns[b], sepn_detach=sepn_detach)
            states[b] = s
            p_meas = None if measured is None else measured.get(b)
            if p_meas is None:
                outputs[b] = cg.abs2(s)
            elif fusion == "replace":
                outputs[b] = cg.fused_intensity(p_meas, s)
            elif fusion == "offset":
                outputs[b] = cg.square(cg.add(cg.absolute(s), offsets[b]))
            else:
                raise ValueError(f"forward_numerical: unknown fusion mode {fusion!r}")
        return states, outputs

    def readout(self, intensity):
        return self.detector.readout(intensity)

    def element_offset_steps(self, block, element: int) -> int:
        """Cumulative misalignment steps for element 1/2/3 (two phase
        layers, then the output plane) of a block; deeper stages keep
        accumulating three steps per block."""
        return 3 * (self.topology.stage(block) - 1) + element


def dpnn_forward_physical(model: DpnnModel, realization, x: np.ndarray) -> dict:
    """Emulated hardware forward pass: per-pixel phase offsets, per-hop
    extra distance, and patterns/sensors redrawn at their cumulative
    misalignment.  Pure numpy; returns {block: intensity (N, G, G)}.
    """
    geo = model.geometry
    z = geo.distance + realization.z_shift
    h = _transfer(2 * geo.grid, geo.pitch, geo.wavelength, z)
    outputs: dict = {}
    for b in model.topology._order:
        parents = model.topology.parents(b)
        u = x if not parents else sum(outputs[p] for p in parents)
        l1, l2 = model.layers[b]
        eps1, eps2 = realization.phase_offsets[b]
        for k, (layer, eps) in enumerate(((l1, eps1), (l2, eps2))):
            u = _asm_apply(u, h)
            steps = model.element_offset_steps(b, k + 1)
            pattern = transform_pattern(layer.physical_phase(eps),
                                        steps * realization.x_shift,
                                        steps * realization.rotation)
            u = u * np.exp(1j * pattern)
        u = _asm_apply(u, h)
        intensity = (u * np.conj(u)).real
        steps = model.element_offset_steps(b, 3)
        outputs[b] = sample_through_transform(intensity,
                                              steps * realization.x_shift,
                                              steps * realization.rotation)
    return outputs
