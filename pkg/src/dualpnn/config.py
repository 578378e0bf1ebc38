"""Experiment configuration: strict parsing, per-architecture defaults,
and the canonical hash tying artifacts to the settings that made them.

A config file is JSON.  Every field has a pinned default except the
architecture and the three seeds, which must be explicit (no wall-clock
seeding).  Unknown fields are rejected by name before any compute.  The
fully resolved config (defaults applied, physics spelled out) is what
gets echoed next to the run artifacts and hashed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os

import numpy as np

from .data import DATA_ENV, ensure_dataset, load_split, preprocess_dpnn, preprocess_mpnn
from .errors import DpnnErrorConfig, MpnnErrorConfig
from .mesh import EoActivation, MpnnModel
from .optics import BlockGeometry, DetectorLayout, DpnnModel, DpnnTopology
from .sepn import Sepn, SepnConfig
from .training import DpnnTask, MpnnTask, TrainPlan

__all__ = [
    "ConfigError", "ARCHITECTURES", "ENGINES", "SWEEP_ENGINES",
    "load_config", "resolve", "config_hash",
    "build_model", "build_task", "build_error_config", "build_plan",
    "errors_configured", "load_dataset",
]

ARCHITECTURES = ("dpnn-s", "dpnn-m", "mpnn")
ENGINES = ("insilico", "pat", "dat")
SWEEP_ENGINES = ("direct", "pat", "dat")


class ConfigError(ValueError):
    """Invalid or unknown experiment settings (CLI exit code 2)."""


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


# Known keys per section with (default-or-None, validator, description).
# Defaults marked "arch" are filled per architecture/engine in resolve().

def _schema(arch: str, engine: str) -> dict:
    dpnn = arch != "mpnn"
    grid_default = 200
    sections = {
        "architecture": None,
        "engine": None,
        "seeds": {
            "params": (None, _is_int),
            "errors": (None, _is_int),
            "shuffle": (None, _is_int),
        },
        "dataset": {
            "root": (None, lambda v: v is None or isinstance(v, str)),
            "synthetic": (True, lambda v: isinstance(v, bool)),
            "train_n": (3000, lambda v: _is_int(v) and v > 0),
            "test_n": (1000, lambda v: _is_int(v) and v > 0),
            "synth_seed": (77, _is_int),
        },
        "sepn": {
            "f1": (4, lambda v: _is_int(v) and v > 0),
            "f2": (8, lambda v: _is_int(v) and v > 0),
            "f3": (16, lambda v: _is_int(v) and v > 0),
            "k": (5 if dpnn else 3, lambda v: _is_int(v) and v > 0 and v % 2 == 1),
        },
        "train": {
            "epochs": (None, lambda v: _is_int(v) and v > 0),
            "batch_size": (None, lambda v: _is_int(v) and v > 0),
            "lr": (None, lambda v: _is_num(v) and v > 0),
            "lr_factor": (0.5, lambda v: _is_num(v) and v > 0),
            "lr_period": (None, lambda v: _is_int(v) and v >= 0),
            "sepn_lr": (0.001, lambda v: _is_num(v) and v > 0),
            "sepn_lr_factor": (0.5, lambda v: _is_num(v) and v > 0),
            "sepn_lr_period": (None, lambda v: _is_int(v) and v >= 0),
            "internal_states": (False, lambda v: isinstance(v, bool)),
            "sepn_mode": ("unitary", lambda v: v in ("unitary", "separable")),
            "warmup_epochs": (None, lambda v: _is_int(v) and v >= 0),
            "eval_batch": (256, lambda v: _is_int(v) and v > 0),
        },
        "sweep": {
            "field": (None, lambda v: v is None or isinstance(v, str)),
            "engines": (list(SWEEP_ENGINES),
                        lambda v: isinstance(v, list) and v
                        and all(e in SWEEP_ENGINES for e in v)),
            "axis": (None, lambda v: v is None or (isinstance(v, list) and v
                     and all(_is_num(s) and s >= 0 for s in v))),
        },
    }
    if dpnn:
        sections["geometry"] = {
            "grid": (grid_default, lambda v: _is_int(v) and v >= 4 and v % 2 == 0),
            "pitch": (None, lambda v: _is_num(v) and v > 0),
            "wavelength": (1.55e-6, lambda v: _is_num(v) and v > 0),
            "distance": (0.30 if arch == "dpnn-s" else 0.10,
                         lambda v: _is_num(v) and v >= 0),
        }
        sections["errors"] = {
            "z_shift_cm": (0.0, lambda v: _is_num(v) and v >= 0),
            "x_shift_px": (0, lambda v: _is_num(v) and v >= 0 and float(v).is_integer()),
            "rotation_deg": (0.0, lambda v: _is_num(v) and v >= 0),
            "phase_sigma": (0.0, lambda v: _is_num(v) and v >= 0),
        }
    else:
        sections["mesh"] = {
            "ports": (64, lambda v: _is_int(v) and v >= 2),
            "n_meshes": (3, lambda v: _is_int(v) and v >= 1),
            "coeff_grid": (8, lambda v: _is_int(v) and v >= 1),
            "alpha": (0.1, lambda v: _is_num(v) and 0 <= v <= 1),
            "beta": (math.pi / 20, _is_num),
            "gamma": (math.pi / 10, _is_num),
            "normalize_input": (False, lambda v: isinstance(v, bool)),
            "drop_mask": (None, lambda v: v is None or (
                isinstance(v, list) and all(_is_int(p) and p >= 0 for p in v))),
        }
        sections["errors"] = {
            "sigma_bs": (0.0, lambda v: _is_num(v) and v >= 0),
            "sigma_ps": (0.0, lambda v: _is_num(v) and v >= 0),
        }
    return sections


# training-schedule defaults pinned per architecture (config-overridable)
_TRAIN_DEFAULTS = {
    "dpnn-s": {"epochs": 10, "batch_size": 32, "lr": 0.01, "lr_period": 1},
    "dpnn-m": {"epochs": 50, "batch_size": 128, "lr": 0.01, "lr_period": 10},
    "mpnn": {"epochs": 50, "batch_size": 32, "lr": 0.001, "lr_period": 10},
}


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config: file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    return raw


def resolve(raw: dict, overrides: dict | None = None) -> dict:
    """Validate a raw config dict and apply every default.

    overrides: {"seeds.params": 1, ...} dotted-path CLI overrides, applied
    before validation.  Returns a plain JSON-serializable dict.
    """
    raw = json.loads(json.dumps(raw))  # deep copy, reject non-JSON values
    for path, value in (overrides or {}).items():
        section, _, key = path.partition(".")
        if key:
            raw.setdefault(section, {})
            if not isinstance(raw[section], dict):
                raise ConfigError(f"config: field {section!r} must be an object")
            raw[section][key] = value
        else:
            raw[section] = value

    arch = raw.get("architecture")
    if arch not in ARCHITECTURES:
        raise ConfigError(
            f"config: architecture must be one of {ARCHITECTURES}, got {arch!r}")
    engine = raw.get("engine", "insilico")
    if engine not in ENGINES:
        raise ConfigError(f"config: engine must be one of {ENGINES}, got {engine!r}")

    schema = _schema(arch, engine)
    for field in raw:
        if field not in schema:
            raise ConfigError(
                f"config: unknown field {field!r} (known: {sorted(schema)})")

    out = {"architecture": arch, "engine": engine}
    for section, keys in schema.items():
        if not isinstance(keys, dict):
            continue
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config: field {section!r} must be an object")
        for key in given:
            if key not in keys:
                raise ConfigError(
                    f"config: unknown field '{section}.{key}' (known: {sorted(keys)})")
        out[section] = {}
        for key, (default, check) in keys.items():
            value = given.get(key, default)
            if value is None and section == "seeds":
                raise ConfigError(
                    f"config: 'seeds.{key}' is required (seeds must be explicit)")
            if value is not None and not check(value):
                raise ConfigError(
                    f"config: invalid value for '{section}.{key}': {value!r}")
            out[section][key] = value

    _apply_derived_defaults(out)
    _cross_validate(out)
    return out


def _apply_derived_defaults(cfg: dict) -> None:
    arch, engine = cfg["architecture"], cfg["engine"]
    t = cfg["train"]
    for key, val in _TRAIN_DEFAULTS[arch].items():
        if t[key] is None:
            t[key] = val
    if t["sepn_lr_period"] is None:
        # constant SEPN rate for diffractive systems, halved every 20
        # epochs for mesh systems
        t["sepn_lr_period"] = 0 if arch != "mpnn" else 20
    if t["warmup_epochs"] is None:
        mpnn_dat_no_is = (arch == "mpnn" and engine == "dat"
                          and not t["internal_states"])
        t["warmup_epochs"] = 20 if mpnn_dat_no_is else 0
    if arch != "mpnn":
        g = cfg["geometry"]
        if g["pitch"] is None:
            # modulator pixel size is a hardware constant, independent of
            # how many pixels the simulation carries
            g["pitch"] = 17e-6
    else:
        m = cfg["mesh"]
        if m["ports"] != m["coeff_grid"] ** 2:
            raise ConfigError(
                f"config: mesh.ports ({m['ports']}) must equal "
                f"mesh.coeff_grid^2 ({m['coeff_grid'] ** 2})")


def _cross_validate(cfg: dict) -> None:
    t = cfg["train"]
    if t["sepn_mode"] == "separable" and not t["internal_states"]:
        raise ConfigError("config: train.sepn_mode 'separable' requires "
                          "train.internal_states true")
    if cfg["architecture"] == "mpnn":
        m = cfg["mesh"]
        if m["drop_mask"] is not None:
            mask = m["drop_mask"]
            if len(set(mask)) != len(mask) or (mask and max(mask) >= m["ports"]):
                raise ConfigError("config: mesh.drop_mask must be distinct "
                                  "ports below mesh.ports")
        elif m["ports"] < 10:
            raise ConfigError("config: mesh.ports < 10 requires an explicit "
                              "mesh.drop_mask")
    else:
        if cfg["geometry"]["grid"] % 4 != 0:
            raise ConfigError("config: geometry.grid must be divisible by 4 "
                              "(two stride-2 stages in each SEPN)")


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_model(cfg: dict):
    seed = cfg["seeds"]["params"]
    if cfg["architecture"] == "mpnn":
        m = cfg["mesh"]
        eo = EoActivation(alpha=m["alpha"], beta=m["beta"], gamma=m["gamma"])
        mask = None if m["drop_mask"] is None else np.asarray(m["drop_mask"])
        return MpnnModel(m["ports"], m["n_meshes"], seed=seed, eo=eo,
                         drop_mask=mask)
    g = cfg["geometry"]
    topo = DpnnTopology.chain(1) if cfg["architecture"] == "dpnn-s" \
        else DpnnTopology.funnel7()
    geo = BlockGeometry(grid=g["grid"], pitch=g["pitch"],
                        wavelength=g["wavelength"], distance=g["distance"])
    return DpnnModel(topo, geo, DetectorLayout.uniform(g["grid"]), seed=seed)


def build_task(cfg: dict, model=None, with_sepns: bool | None = None):
    """Model + (for DAT) freshly seeded prediction networks."""
    model = build_model(cfg) if model is None else model
    if with_sepns is None:
        with_sepns = cfg["engine"] == "dat"
    s = cfg["sepn"]
    seed = cfg["seeds"]["params"]
    if cfg["architecture"] == "mpnn":
        sepns = None
        if with_sepns:
            sc = SepnConfig(f1=s["f1"], f2=s["f2"], f3=s["f3"], k=s["k"],
                            height=1, width=model.ports)
            sepns = [Sepn(sc, seed=(seed, i), name=f"mesh{i + 1}.sepn")
                     for i in range(model.n_meshes)]
        return MpnnTask(model, sepns=sepns)
    sepns = None
    if with_sepns:
        grid = model.geometry.grid
        sc = SepnConfig(f1=s["f1"], f2=s["f2"], f3=s["f3"], k=s["k"],
                        height=grid, width=grid)
        sepns = {
            b: tuple(Sepn(sc, seed=(seed, i, j), name=f"{b}.sepn{j + 1}")
                     for j in range(3))
            for i, b in enumerate(model.topology.blocks)
        }
    return DpnnTask(model, sepns=sepns)


def build_error_config(cfg: dict, override: dict | None = None):
    e = dict(cfg["errors"])
    if override:
        e.update(override)
    if cfg["architecture"] == "mpnn":
        return MpnnErrorConfig(sigma_bs=e["sigma_bs"], sigma_ps=e["sigma_ps"])
    return DpnnErrorConfig(z_shift_cm=e["z_shift_cm"],
                           x_shift_px=int(e["x_shift_px"]),
                           rotation_deg=e["rotation_deg"],
                           phase_sigma=e["phase_sigma"])


def errors_configured(cfg: dict) -> bool:
    return any(v > 0 for v in cfg["errors"].values())


def build_plan(cfg: dict, engine: str | None = None) -> TrainPlan:
    t = cfg["train"]
    return TrainPlan(
        engine=cfg["engine"] if engine is None else engine,
        epochs=t["epochs"], batch_size=t["batch_size"],
        internal_states=t["internal_states"], sepn_mode=t["sepn_mode"],
        warmup_epochs=t["warmup_epochs"],
        lr=t["lr"], lr_factor=t["lr_factor"], lr_period=t["lr_period"],
        sepn_lr=t["sepn_lr"], sepn_lr_factor=t["sepn_lr_factor"],
        sepn_lr_period=t["sepn_lr_period"])


def _dataset_root(cfg: dict, out_dir: str) -> str:
    d = cfg["dataset"]
    root = d["root"] or os.environ.get(DATA_ENV)
    if d["synthetic"]:
        base = root or os.path.join(out_dir, "dataset")
        path = os.path.join(
            base, f"synth-{d['train_n']}-{d['test_n']}-s{d['synth_seed']}")
        ensure_dataset(path, train_n=d["train_n"], test_n=d["test_n"],
                       seed=d["synth_seed"])
        return path
    if root is None:
        raise ConfigError(
            f"config: dataset.root not set and ${DATA_ENV} is empty "
            "(or set dataset.synthetic true)")
    if not os.path.isdir(root):
        raise ConfigError(f"config: dataset root does not exist: {root}")
    return root


def load_dataset(cfg: dict, out_dir: str):
    """(train_x, train_y, test_x, test_y), encoded for the architecture."""
    root = _dataset_root(cfg, out_dir)
    d = cfg["dataset"]
    try:
        train_img, train_y = load_split(root, "train")
        test_img, test_y = load_split(root, "test")
    except FileNotFoundError as e:
        raise ConfigError(f"config: dataset file missing: {e}") from e
    for name, have, want in (("train", len(train_img), d["train_n"]),
                             ("test", len(test_img), d["test_n"])):
        if have < want:
            raise ConfigError(
                f"config: dataset {name} split has {have} samples, "
                f"{want} requested")
    train_img, train_y = train_img[:d["train_n"]], train_y[:d["train_n"]]
    test_img, test_y = test_img[:d["test_n"]], test_y[:d["test_n"]]
    if cfg["architecture"] == "mpnn":
        m = cfg["mesh"]
        train_x = preprocess_mpnn(train_img, coeff_grid=m["coeff_grid"],
                                  normalize=m["normalize_input"])
        test_x = preprocess_mpnn(test_img, coeff_grid=m["coeff_grid"],
                                 normalize=m["normalize_input"])
    else:
        grid = cfg["geometry"]["grid"]
        train_x = preprocess_dpnn(train_img, grid)
        test_x = preprocess_dpnn(test_img, grid)
    return train_x, train_y, test_x, test_y
