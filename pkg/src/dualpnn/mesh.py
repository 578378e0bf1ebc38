"""Mach-Zehnder interferometer algebra, rectangular (Clements) meshes,
the electro-optic activation, and the interferometric network models.

A single MZI applies U = B(e2) R(theta) B(e1) R(phi), where
R(x) = diag(e^{jx}, 1) phases the top arm and

    B(e) = [[cos(pi/4 + e),  j sin(pi/4 + e)],
            [j sin(pi/4 + e), cos(pi/4 + e)]]

is a coupler whose split ratio deviates from 50:50 by the angle e; it is
unitary for every e, so imperfect meshes still conserve power.  A mesh
of L ports holds L(L-1)/2 MZIs in the rectangular arrangement: column c
couples ports (i, i+1) for i = c mod 2, c mod 2 + 2, ...; the flat
theta/phi vectors are ordered column-major, top to bottom.

mesh_apply is a single tape primitive with a hand-written adjoint
(replaying the columns in reverse with conjugated couplers), which keeps
the tape small and the backward pass as vectorized as the forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cgraph as cg
from .cgraph import Parameter, value_of

__all__ = [
    "mzi_transfer", "clements_columns", "PhotonicMesh", "mesh_apply",
    "EoActivation", "eo_activation", "MpnnModel", "mpnn_forward_physical",
]

_Q = np.pi / 4


def mzi_transfer(theta: float, phi: float, eps1: float = 0.0, eps2: float = 0.0) -> np.ndarray:
    """Dense 2x2 transfer matrix of one MZI (unitary for any arguments)."""

    def coupler(e):
        c, s = np.cos(_Q + e), np.sin(_Q + e)
        return np.array([[c, 1j * s], [1j * s, c]])

    def phase(x):
        return np.array([[np.exp(1j * x), 0.0], [0.0, 1.0]])

    return coupler(eps2) @ phase(theta) @ coupler(eps1) @ phase(phi)


def clements_columns(L: int) -> list:
    """Port pairs per mesh column: [(top, bottom), ...] for each of the
    L columns of the rectangular arrangement."""
    if L < 2:
        raise ValueError(f"clements_columns: need at least 2 ports, got {L}")
    return [[(i, i + 1) for i in range(c % 2, L - 1, 2)] for c in range(L)]


class PhotonicMesh:
    """Rectangular mesh of L(L-1)/2 MZIs with learnable theta, phi.

    theta is initialized uniformly in [0, pi), phi in [0, 2*pi).
    """

    def __init__(self, ports: int, seed: int = 0, name: str = "mesh"):
        self.ports = ports
        self.columns = clements_columns(ports)
        self.n_mzi = sum(len(col) for col in self.columns)
        assert self.n_mzi == ports * (ports - 1) // 2
        ent = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=ent + (1,)))
        self.theta = Parameter(rng.uniform(0.0, np.pi, self.n_mzi), name=f"{name}.theta")
        self.phi = Parameter(rng.uniform(0.0, 2 * np.pi, self.n_mzi), name=f"{name}.phi")
        # flat-vector slice and port-index arrays per column
        self._slices = []
        start = 0
        for col in self.columns:
            tops = np.array([t for t, _ in col], dtype=np.intp)
            bots = tops + 1
            self._slices.append((slice(start, start + len(col)), tops, bots))
            start += len(col)

    def parameters(self) -> list:
        return [self.theta, self.phi]

    def dense_matrix(self, eps=None, theta_offset=None, phi_offset=None) -> np.ndarray:
        """Assemble the full L x L matrix by pushing a basis through."""
        basis = np.eye(self.ports, dtype=np.complex128)
        out = mesh_apply(self, basis, eps=eps, theta_offset=theta_offset,
                         phi_offset=phi_offset)
        return value_of(out).T


def mesh_apply(mesh: PhotonicMesh, x, eps=None, theta_offset=None, phi_offset=None):
    """Apply a mesh to (N, L) or (L,) complex inputs, tape-aware.

    eps: (n_mzi, 2) coupler split-ratio offsets; theta_offset/phi_offset:
    (n_mzi,) phase-shifter offsets.  Offsets are hardware-error data and
    take no gradients; theta/phi do.
    """
    xv = np.asarray(value_of(x), dtype=np.complex128)
    single = xv.ndim == 1
    if single:
        xv = xv[None, :]
    if xv.ndim != 2 or xv.shape[1] != mesh.ports:
        raise ValueError(f"mesh_apply: expected (N,{mesh.ports}) input, got {xv.shape}")

    th_all = mesh.theta.value + (0.0 if theta_offset is None else theta_offset)
    ph_all = mesh.phi.value + (0.0 if phi_offset is None else phi_offset)
    e1_all = np.zeros(mesh.n_mzi) if eps is None else np.asarray(eps)[:, 0]
    e2_all = np.zeros(mesh.n_mzi) if eps is None else np.asarray(eps)[:, 1]

    y = xv.copy()
    saved = []
    for sl, tops, bots in mesh._slices:
        th, ph = th_all[sl], ph_all[sl]
        c1, s1 = np.cos(_Q + e1_all[sl]), np.sin(_Q + e1_all[sl])
        c2, s2 = np.cos(_Q + e2_all[sl]), np.sin(_Q + e2_all[sl])
        a = y[:, tops]
        b = y[:, bots]
        saved.append((a, b))
        m1t = np.exp(1j * ph) * a
        m2t = c1 * m1t + 1j * s1 * b
        m2b = 1j * s1 * m1t + c1 * b
        m3t = np.exp(1j * th) * m2t
        y[:, tops] = c2 * m3t + 1j * s2 * m2b
        y[:, bots] = 1j * s2 * m3t + c2 * m2b
    out = y[0] if single else y

    cache: dict = {}

    def _adjoint(g):
        if cache.get("g") is g:
            return cache["res"]
        gm = np.asarray(g, dtype=np.complex128)
        if single:
            gm = gm[None, :]
        gm = gm.copy()
        dth = np.zeros(mesh.n_mzi)
        dph = np.zeros(mesh.n_mzi)
        for (sl, tops, bots), (a, b) in zip(reversed(mesh._slices), reversed(saved)):
            th, ph = th_all[sl], ph_all[sl]
            c1, s1 = np.cos(_Q + e1_all[sl]), np.sin(_Q + e1_all[sl])
            c2, s2 = np.cos(_Q + e2_all[sl]), np.sin(_Q + e2_all[sl])
            m1t = np.exp(1j * ph) * a
            m2t = c1 * m1t + 1j * s1 * b
            m3t = np.exp(1j * th) * m2t
            gt = gm[:, tops]
            gb = gm[:, bots]
            ht = c2 * gt - 1j * s2 * gb           # B2^H
            hb = -1j * s2 * gt + c2 * gb
            dth[sl] = np.real(np.conj(ht) * (1j * m3t)).sum(axis=0)
            g2t = np.exp(-1j * th) * ht           # R(theta)^H
            g1t = c1 * g2t - 1j * s1 * hb         # B1^H
            g1b = -1j * s1 * g2t + c1 * hb
            dph[sl] = np.real(np.conj(g1t) * (1j * m1t)).sum(axis=0)
            gm[:, tops] = np.exp(-1j * ph) * g1t
            gm[:, bots] = g1b
        res = (gm[0] if single else gm, dth, dph)
        cache["g"] = g
        cache["res"] = res
        return res

    return cg.record("mesh_apply", out, [
        (x, lambda g: _adjoint(g)[0]),
        (mesh.theta, lambda g: _adjoint(g)[1]),
        (mesh.phi, lambda g: _adjoint(g)[2]),
    ])


# ---------------------------------------------------------------------------
# electro-optic activation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EoActivation:
    """f(z) = j sqrt(1-alpha) exp(-j(beta|z|^2+gamma)) cos(beta|z|^2+gamma) z.

    alpha taps a power fraction for the electronics, beta converts the
    tapped power to phase, gamma biases it; |f(z)| <= sqrt(1-alpha)|z|.
    """

    alpha: float = 0.1
    beta: float = np.pi / 20
    gamma: float = np.pi / 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"EoActivation: alpha must lie in [0,1], got {self.alpha}")


def eo_activation(z, act: EoActivation):
    """Elementwise electro-optic nonlinearity, tape-aware."""
    zv = value_of(z)
    amp = np.sqrt(1.0 - act.alpha)
    u = (zv * np.conj(zv)).real
    psi = act.beta * u + act.gamma
    h = np.exp(-1j * psi) * np.cos(psi)
    out = 1j * amp * h * zv

    def vjp(g):
        hp = -np.exp(-1j * psi) * (1j * np.cos(psi) + np.sin(psi))
        dz = 1j * amp * (h + act.beta * u * hp)            # d out / d z
        dzbar = 1j * amp * act.beta * hp * zv * zv          # d out / d conj(z)
        return g * np.conj(dz) + np.conj(g) * dzbar

    return cg.record("eo_activation", out, [(z, vjp)])


# ---------------------------------------------------------------------------
# interferometric network model
# ---------------------------------------------------------------------------

class MpnnModel:
    """N unitary meshes with electro-optic activations between them; the
    output intensities at 10 selected ports are the class logits."""

    def __init__(self, ports: int, n_meshes: int, seed: int = 0,
                 eo: EoActivation = EoActivation(), drop_mask=None):
        if n_meshes < 1:
            raise ValueError("MpnnModel: need at least one mesh")
        self.ports = ports
        self.eo = eo
        ent = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
        self.meshes = [PhotonicMesh(ports, seed=ent + (i,), name=f"mesh{i + 1}")
                       for i in range(n_meshes)]
        if drop_mask is None:
            if ports < 10:
                raise ValueError("MpnnModel: default drop mask needs >= 10 ports")
            mask = np.arange(10)
        else:
            mask = np.asarray(drop_mask, dtype=np.intp)
        if (mask.size < 1 or len(set(mask.tolist())) != mask.size
                or mask.max() >= ports or mask.min() < 0):
            raise ValueError("MpnnModel: drop mask must be distinct ports below L")
        self.drop_mask = mask

    @property
    def n_meshes(self):
        return len(self.meshes)

    def parameters(self) -> list:
        return [p for m in self.meshes for p in m.parameters()]

    def forward_numerical(self, x, sepns=None, measured=None, fusion="replace",
                          offsets=None, sepn_detach=False):
        """Differentiable forward pass.

        x: (N, L) complex input; sepns: one per mesh or None; measured:
        list of hardware intensities per mesh output (internal-state
        fusion) or just [..., P_N] with None placeholders for the final-
        output-only variant.  sepn_detach evaluates residuals as
        constants (values kept, gradient paths cut).

        fusion "replace" substitutes measured amplitudes with straight-
        through gradients; "offset" builds the equivalent differentiable
        surrogate from frozen offsets (complex field offsets at internal
        states, a real amplitude offset sqrt(P) - |S_0| at the output).

        Returns (states, final_intensity) where states[n] is the (fused)
        complex output of mesh n.
        """
        if measured is not None and fusion == "offset" and offsets is None:
            raise ValueError("forward_numerical: offset fusion requires offsets")
        z = x
        states = []
        last = self.n_meshes - 1
        final = None
        for n, mesh in enumerate(self.meshes):
            v = mesh_apply(mesh, z)
            if sepns is not None:
                if sepn_detach:
                    with cg.no_grad():
                        r = sepns[n].forward_ports(cg.value_of(v))
                    v = cg.add(v, r)
                else:
                    v = cg.add(v, sepns[n].forward_ports(v))
            states.append(v)  # pre-fusion numerical state of mesh n
            p = None if measured is None else measured[n]
            if n == last:
                if p is None:
                    final = cg.abs2(v)
                elif fusion == "replace":
                    final = cg.fused_intensity(p, v)
                elif fusion == "offset":
                    final = cg.square(cg.add(cg.absolute(v), offsets[n]))
                else:
                    raise ValueError(f"forward_numerical: unknown fusion mode {fusion!r}")
            else:
                if p is not None:
                    if fusion == "replace":
                        v = cg.fuse_field(p, v)
                    elif fusion == "offset":
                        v = cg.add(v, offsets[n])
                    else:
                        raise ValueError(f"forward_numerical: unknown fusion mode {fusion!r}")
                z = eo_activation(v, self.eo)
        return states, final

    def logits(self, final_intensity):
        return cg.gather_ports(final_intensity, self.drop_mask)


def mpnn_forward_physical(model: MpnnModel, realization, x: np.ndarray) -> list:
    """Emulated hardware pass: coupler and phase-shifter offsets applied,
    intensities measured at every mesh output.  Pure numpy; returns
    [P_1, ..., P_N] each (N, L)."""
    with cg.no_grad():
        z = np.asarray(x, dtype=np.complex128)
        intensities = []
        for n, mesh in enumerate(model.meshes):
            v = mesh_apply(mesh, z,
                           eps=realization.coupler_offsets[n],
                           theta_offset=realization.theta_offsets[n],
                           phi_offset=realization.phi_offsets[n])
            intensities.append((v * np.conj(v)).real)
            if n != model.n_meshes - 1:
                z = eo_activation(v, model.eo)
    return intensities
