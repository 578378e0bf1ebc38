"""Systematic-error configuration, seeded realization, and the emulated
hardware built from a model plus one frozen realization.

A realization samples every stochastic device error exactly once and
then never changes: the emulated system stands in for a fabricated
device whose imperfections are fixed but unknown.  Draws come from one
substream per (device class, device index), so enlarging a network adds
new draws without reshuffling existing ones.

The physical evaluators expose a single method, evaluate(), returning
real intensities only.  Training code can measure the hardware but can
never see its complex fields or differentiate through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import cgraph as cg
from .mesh import MpnnModel, mpnn_forward_physical
from .optics import DpnnModel, dpnn_forward_physical

__all__ = [
    "DpnnErrorConfig", "MpnnErrorConfig", "ErrorRealization",
    "DpnnRealization", "MpnnRealization", "realize",
    "save_realization", "load_realization", "build_physical_system",
]

# substream ids, one per stochastic device class
_CLASS_DPNN_PHASE = 10
_CLASS_MPNN_BS = 11
_CLASS_MPNN_PS = 12


@dataclass(frozen=True)
class DpnnErrorConfig:
    """Four diffractive-system error strengths; zero disables each.

    z_shift_cm: extra propagation distance per diffraction (cm).
    x_shift_px: lateral pattern misalignment per layer (integer pixels).
    rotation_deg: in-plane pattern rotation per layer (degrees).
    phase_sigma: std of per-pixel phase-shift offsets (radians).
    """

    z_shift_cm: float = 0.0
    x_shift_px: int = 0
    rotation_deg: float = 0.0
    phase_sigma: float = 0.0

    def __post_init__(self):
        if not float(self.x_shift_px).is_integer():
            raise ValueError(f"DpnnErrorConfig: x_shift_px must be an integer pixel count, got {self.x_shift_px}")
        vals = (self.z_shift_cm, self.x_shift_px, self.rotation_deg, self.phase_sigma)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"DpnnErrorConfig: all strengths must be finite and >= 0, got {vals}")


@dataclass(frozen=True)
class MpnnErrorConfig:
    """Interferometric-system error strengths.

    sigma_bs: std of beamsplitter split-ratio offsets (radians off pi/4).
    sigma_ps: std of phase-shifter offsets (radians).
    """

    sigma_bs: float = 0.0
    sigma_ps: float = 0.0

    def __post_init__(self):
        if any(not np.isfinite(v) or v < 0 for v in (self.sigma_bs, self.sigma_ps)):
            raise ValueError(f"MpnnErrorConfig: sigmas must be finite and >= 0, got ({self.sigma_bs}, {self.sigma_ps})")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class ErrorRealization:
    """Base marker for frozen error draws; see the two concrete kinds."""

    kind = ""

    def save(self, path):
        save_realization(path, self)


@dataclass(frozen=True)
class DpnnRealization(ErrorRealization):
    seed: int
    z_shift: float            # meters, added to every hop
    x_shift: int              # pixels per misalignment step
    rotation: float           # degrees per misalignment step
    phase_sigma: float
    blocks: tuple
    grid: int
    phase_offsets: MappingProxyType  # block -> (2, G, G) radians, read-only

    kind = "dpnn"


@dataclass(frozen=True)
class MpnnRealization(ErrorRealization):
    seed: int
    sigma_bs: float
    sigma_ps: float
    ports: int
    coupler_offsets: tuple    # per mesh, (n_mzi, 2) radians
    theta_offsets: tuple      # per mesh, (n_mzi,) radians
    phi_offsets: tuple        # per mesh, (n_mzi,) radians

    kind = "mpnn"

    @property
    def n_meshes(self):
        return len(self.theta_offsets)


def _stream(seed: int, class_id: int, unit: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, class_id, unit)))


def realize(config, seed: int, model) -> ErrorRealization:
    """Draw one frozen error realization for a model.

    The model supplies the device inventory (how many phase pixels,
    beamsplitters, shifters exist); the config supplies the strengths.
    """
    if isinstance(config, DpnnErrorConfig):
        if not isinstance(model, DpnnModel):
            raise TypeError("realize: DpnnErrorConfig requires a DpnnModel")
        g = model.geometry.grid
        offsets = {}
        for i, b in enumerate(model.topology.blocks):
            draw = _stream(seed, _CLASS_DPNN_PHASE, i).standard_normal((2, g, g))
            offsets[b] = _frozen(config.phase_sigma * draw)
        return DpnnRealization(
            seed=seed,
            z_shift=config.z_shift_cm * 1e-2,
            x_shift=int(config.x_shift_px),
            rotation=config.rotation_deg,
            phase_sigma=config.phase_sigma,
            blocks=tuple(model.topology.blocks),
            grid=g,
            phase_offsets=MappingProxyType(offsets),
        )
    if isinstance(config, MpnnErrorConfig):
        if not isinstance(model, MpnnModel):
            raise TypeError("realize: MpnnErrorConfig requires an MpnnModel")
        bs, th, ph = [], [], []
        for n, mesh in enumerate(model.meshes):
            bs.append(_frozen(config.sigma_bs * _stream(seed, _CLASS_MPNN_BS, n)
                              .standard_normal((mesh.n_mzi, 2))))
            draw = _stream(seed, _CLASS_MPNN_PS, n).standard_normal((2, mesh.n_mzi))
            th.append(_frozen(config.sigma_ps * draw[0]))
            ph.append(_frozen(config.sigma_ps * draw[1]))
        return MpnnRealization(
            seed=seed, sigma_bs=config.sigma_bs, sigma_ps=config.sigma_ps,
            ports=model.ports, coupler_offsets=tuple(bs),
            theta_offsets=tuple(th), phi_offsets=tuple(ph),
        )
    raise TypeError(f"realize: unknown config type {type(config).__name__}")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_realization(path, real: ErrorRealization) -> None:
    """Write a realization to an npz sidecar for exact resumption."""
    if isinstance(real, DpnnRealization):
        arrays = {f"phase:{b}": real.phase_offsets[b] for b in real.blocks}
        np.savez(path, kind="dpnn", seed=real.seed, z_shift=real.z_shift,
                 x_shift=real.x_shift, rotation=real.rotation,
                 phase_sigma=real.phase_sigma, grid=real.grid,
                 blocks=np.array(real.blocks), **arrays)
    elif isinstance(real, MpnnRealization):
        arrays = {}
        for n in range(real.n_meshes):
            arrays[f"bs:{n}"] = real.coupler_offsets[n]
            arrays[f"theta:{n}"] = real.theta_offsets[n]
            arrays[f"phi:{n}"] = real.phi_offsets[n]
        np.savez(path, kind="mpnn", seed=real.seed, sigma_bs=real.sigma_bs,
                 sigma_ps=real.sigma_ps, ports=real.ports,
                 n_meshes=real.n_meshes, **arrays)
    else:
        raise TypeError(f"save_realization: unknown realization {type(real).__name__}")


def load_realization(path) -> ErrorRealization:
    with np.load(path, allow_pickle=False) as z:
        kind = str(z["kind"])
        if kind == "dpnn":
            blocks = tuple(str(b) for b in z["blocks"])
            offsets = {b: _frozen(z[f"phase:{b}"]) for b in blocks}
            return DpnnRealization(
                seed=int(z["seed"]), z_shift=float(z["z_shift"]),
                x_shift=int(z["x_shift"]), rotation=float(z["rotation"]),
                phase_sigma=float(z["phase_sigma"]), blocks=blocks,
                grid=int(z["grid"]), phase_offsets=MappingProxyType(offsets),
            )
        if kind == "mpnn":
            n = int(z["n_meshes"])
            return MpnnRealization(
                seed=int(z["seed"]), sigma_bs=float(z["sigma_bs"]),
                sigma_ps=float(z["sigma_ps"]), ports=int(z["ports"]),
                coupler_offsets=tuple(_frozen(z[f"bs:{i}"]) for i in range(n)),
                theta_offsets=tuple(_frozen(z[f"theta:{i}"]) for i in range(n)),
                phi_offsets=tuple(_frozen(z[f"phi:{i}"]) for i in range(n)),
            )
    raise ValueError(f"load_realization: unknown kind {kind!r} in {path}")


# ---------------------------------------------------------------------------
# emulated hardware
# ---------------------------------------------------------------------------

class _DpnnPhysicalSystem:
    def __init__(self, model, realization):
        self._model = model
        self._realization = realization

    def evaluate(self, x) -> dict:
        """Measured intensity after every block: {block: (N, G, G) real}."""
        with cg.no_grad():
            out = dpnn_forward_physical(self._model, self._realization,
                                        np.asarray(cg.value_of(x)))
        return {b: p.real if np.iscomplexobj(p) else p for b, p in out.items()}


class _MpnnPhysicalSystem:
    def __init__(self, model, realization):
        self._model = model
        self._realization = realization

    def evaluate(self, x) -> list:
        """Measured intensity after every mesh: [(N, L) real, ...]."""
        with cg.no_grad():
            return mpnn_forward_physical(self._model, self._realization,
                                         np.asarray(cg.value_of(x)))


def build_physical_system(model, realization: ErrorRealization):
    """Bind a model to one frozen realization as measurable hardware.

    The returned object exposes evaluate() only; intensities out, nothing
    else.  The realization must describe exactly this model's devices.
    """
    if isinstance(model, DpnnModel):
        if not isinstance(realization, DpnnRealization):
            raise TypeError("build_physical_system: DPNN model needs a DPNN realization")
        if realization.blocks != tuple(model.topology.blocks):
            raise ValueError(f"build_physical_system: realization covers blocks {realization.blocks}, model has {tuple(model.topology.blocks)}")
        if realization.grid != model.geometry.grid:
            raise ValueError(f"build_physical_system: realization grid {realization.grid} vs model grid {model.geometry.grid}")
        return _DpnnPhysicalSystem(model, realization)
    if isinstance(model, MpnnModel):
        if not isinstance(realization, MpnnRealization):
            raise TypeError("build_physical_system: MPNN model needs an MPNN realization")
        if realization.ports != model.ports or realization.n_meshes != model.n_meshes:
            raise ValueError(f"build_physical_system: realization is for {realization.n_meshes} meshes of {realization.ports} ports, model has {model.n_meshes} of {model.ports}")
        return _MpnnPhysicalSystem(model, realization)
    raise TypeError(f"build_physical_system: unknown model type {type(model).__name__}")
