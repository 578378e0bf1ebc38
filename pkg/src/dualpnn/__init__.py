"""Emulated photonic neural networks with dual-loop error-adaptive training.

Two hardware families are modelled end to end: free-space diffractive
stacks (phase masks + Fresnel propagation + intensity detectors) and
integrated interferometer meshes (MZI lattices + electro-optic
activations).  Both come with parameterized systematic errors, small
convolutional nets that learn the residual between the numerical model
and the emulated hardware, and training engines that fuse measured
intensities into the numerical forward pass so task gradients descend
the deployed loss rather than the idealized one.

Typical entry points:

- :func:`dualpnn.config.resolve` + the builders there, for configured runs
- :class:`dualpnn.training.DpnnTask` / :class:`MpnnTask` + :func:`train`,
  for programmatic experiments
- ``python -m dualpnn.cli`` (or the ``dualpnn`` script) for the CLI
"""

from . import cgraph
from .config import ConfigError, build_task, config_hash, load_config, resolve
from .errors import (
    DpnnErrorConfig, MpnnErrorConfig, build_physical_system, load_realization,
    realize, save_realization,
)
from .mesh import EoActivation, MpnnModel
from .optics import BlockGeometry, DetectorLayout, DpnnModel, DpnnTopology
from .sepn import Sepn, SepnConfig
from .training import (
    Adam, DpnnTask, LrSchedule, MpnnTask, SimilaritySpec, TrainPlan,
    dat_step, evaluate, similarity_loss, train,
)

__version__ = "0.1.0"

__all__ = [
    "cgraph",
    "ConfigError", "build_task", "config_hash", "load_config", "resolve",
    "DpnnErrorConfig", "MpnnErrorConfig", "build_physical_system",
    "load_realization", "realize", "save_realization",
    "EoActivation", "MpnnModel",
    "BlockGeometry", "DetectorLayout", "DpnnModel", "DpnnTopology",
    "Sepn", "SepnConfig",
    "Adam", "DpnnTask", "LrSchedule", "MpnnTask", "SimilaritySpec",
    "TrainPlan", "dat_step", "evaluate", "similarity_loss", "train",
    "__version__",
]
