"""Residual systematic-error prediction network: a complex-valued
mini-UNet attached after each hardware layer of a numerical model.

Wiring (channel counts F1, F2, F3, kernel k, no biases):

    encoder   CConv(1->F1, s1) -> CConv(F1->F2, s2) -> CConv(F2->F3, s2)
    bottleneck CConv(F3->F3, s1)
    decoder   CTConv(F3->F2, s2) +skip -> CTConv(F2->F1, s2) +skip -> CConv(F1->1, s1)

with CReLU after every layer except the last and additive skip
connections from the matching encoder stages.  Complex weights are kept
as separate real and imaginary parameter planes so every learnable
tensor is real.

For the interferometric models, 1-D states are treated as 1 x L maps and
all striding happens along L.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cgraph as cg
from .cgraph import Parameter

__all__ = ["SepnConfig", "Sepn", "paper_param_count", "implemented_param_count", "crelu"]

crelu = cg.crelu


@dataclass(frozen=True)
class SepnConfig:
    f1: int
    f2: int
    f3: int
    k: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.f1, self.f2, self.f3, self.k) < 1:
            raise ValueError("SepnConfig: channel counts and kernel must be >= 1")
        if self.k % 2 != 1:
            raise ValueError(f"SepnConfig: kernel extent must be odd, got {self.k}")
        # two stride-2 stages per strided axis; height 1 stays unstrided
        for extent, name in ((self.height, "height"), (self.width, "width")):
            if extent > 1 and extent % 4 != 0:
                raise ValueError(f"SepnConfig: {name} {extent} not divisible by 4")

    @property
    def strides(self):
        sh = 2 if self.height > 1 else 1
        sw = 2 if self.width > 1 else 1
        return (sh, sw)


def paper_param_count(f1: int, f2: int, f3: int, k: int) -> int:
    """Closed-form learnable-parameter total for the published layer
    listing: k^2 (4 F1 + 2 F1^2 + 4 F1 F2 + 2 F2^2 + 2 F2 F3 + 2 F3^2)."""
    if min(f1, f2, f3, k) < 1:
        raise ValueError("paper_param_count: positive integers required")
    return k * k * (4 * f1 + 2 * f1 * f1 + 4 * f1 * f2 + 2 * f2 * f2 + 2 * f2 * f3 + 2 * f3 * f3)


def implemented_param_count(f1: int, f2: int, f3: int, k: int) -> int:
    """Analytic count for the wiring implemented here (with the F3->F3
    bottleneck): k^2 (4 F1 + 4 F1 F2 + 4 F2 F3 + 2 F3^2).  Documented
    alongside paper_param_count because the two differ; introspection in
    tests checks this one against the actual parameter arrays."""
    return k * k * (4 * f1 + 4 * f1 * f2 + 4 * f2 * f3 + 2 * f3 * f3)


class Sepn:
    """One error-prediction network instance (owns its weight planes)."""

    #: (name, kind, c_in, c_out, strided) — kind "c" = conv, "t" = transposed
    _LAYOUT = (
        ("enc1", "c", 1, "f1", False),
        ("enc2", "c", "f1", "f2", True),
        ("enc3", "c", "f2", "f3", True),
        ("mid", "c", "f3", "f3", False),
        ("dec1", "t", "f3", "f2", True),
        ("dec2", "t", "f2", "f1", True),
        ("out", "c", "f1", 1, False),
    )

    def __init__(self, config: SepnConfig, seed: int = 0, init: str = "normal",
                 name: str = "sepn"):
        self.config = config
        self.name = name
        ent = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=ent + (3,)))
        self.weights: dict[str, tuple[Parameter, Parameter]] = {}
        for lname, kind, ci, co, _ in self._LAYOUT:
            ci = getattr(config, ci) if isinstance(ci, str) else ci
            co = getattr(config, co) if isinstance(co, str) else co
            shape = (ci, co, config.k, config.k) if kind == "t" else (co, ci, config.k, config.k)
            if init == "zeros":
                re = np.zeros(shape)
                im = np.zeros(shape)
            elif init == "normal":
                re = 0.02 * rng.standard_normal(shape)
                im = 0.02 * rng.standard_normal(shape)
            else:
                raise ValueError(f"Sepn: unknown init {init!r}")
            self.weights[lname] = (Parameter(re, name=f"{name}.{lname}.re"),
                                   Parameter(im, name=f"{name}.{lname}.im"))

    def parameters(self) -> list:
        return [p for pair in self.weights.values() for p in pair]

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def _w(self, lname):
        re, im = self.weights[lname]
        return cg.complex_from_parts(re, im)

    def forward(self, x, activations: bool = True):
        """Predicted residual for x: (N, 1, H, W) complex in and out."""
        cfg = self.config
        xv = cg.value_of(x)
        if xv.shape[-2:] != (cfg.height, cfg.width) or xv.shape[-3] != 1:
            raise ValueError(f"Sepn.forward: expected (N,1,{cfg.height},{cfg.width}), got {xv.shape}")
        act = cg.crelu if activations else (lambda t: t)
        s2 = cfg.strides

        e1 = act(cg.conv2d(x, self._w("enc1")))
        e2 = act(cg.conv2d(e1, self._w("enc2"), stride=s2))
        e3 = act(cg.conv2d(e2, self._w("enc3"), stride=s2))
        mid = act(cg.conv2d(e3, self._w("mid")))
        d1 = act(cg.add(cg.conv_transpose2d(mid, self._w("dec1"), stride=s2), e2))
        d2 = act(cg.add(cg.conv_transpose2d(d1, self._w("dec2"), stride=s2), e1))
        return cg.conv2d(d2, self._w("out"))

    def forward_field(self, u):
        """Apply to a (N, H, W) field by inserting the channel axis."""
        uv = cg.value_of(u)
        n = uv.shape[0] if uv.ndim == 3 else 1
        x = cg.reshape(u, (n, 1) + uv.shape[-2:])
        y = self.forward(x)
        return cg.reshape(y, uv.shape)

    def forward_ports(self, z):
        """Apply to (N, L) mesh states as 1 x L maps."""
        zv = cg.value_of(z)
        x = cg.reshape(z, (zv.shape[0], 1, 1, zv.shape[-1]))
        y = self.forward(x)
        return cg.reshape(y, zv.shape)
