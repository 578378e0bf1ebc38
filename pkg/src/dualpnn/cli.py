"""Command-line experiment runner.

Subcommands: train (one engine, full artifact set), eval (a checkpoint
on a physical or ideal target), sweep (error-strength axis x engines),
gradcheck (finite-difference suites), report (collate run records).

Artifacts per training run, all deterministic given config + seeds:
convergence.csv, confusion.csv, summary.txt, runrecord.json,
checkpoint.npz (parameters + optimizer state + embedded config),
realization.npz, and the resolved config echo.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from .config import (
    ConfigError, SWEEP_ENGINES, build_error_config, build_model, build_plan,
    build_task, config_hash, errors_configured, load_config, load_dataset,
    resolve,
)
from .errors import build_physical_system, realize, save_realization
from .mesh import MpnnModel
from .training import (
    DpnnTask, MpnnTask, SimilaritySpec, evaluate, similarity_loss, train,
)
from . import cgraph as cg

__all__ = ["main", "run_train", "run_eval", "run_sweep", "run_gradcheck",
           "run_report", "NumericalError"]


class NumericalError(RuntimeError):
    """Non-finite results from training or gradient checks (exit 3)."""


# ---------------------------------------------------------------------------
# deterministic artifact writers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    """Shortest round-trip float text; stable across runs."""
    return repr(float(v))


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _cell(c) -> str:
    if isinstance(c, str):
        return c
    if isinstance(c, (int, np.integer)):
        return str(c)
    return _fmt(c)


def _write_csv(path: str, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_cell(c) for c in row) for row in rows]
    _write_text(path, "\n".join(lines) + "\n")


def _write_confusion(path: str, confusion) -> None:
    _write_text(path, "\n".join(
        ",".join(str(int(c)) for c in row) for row in confusion) + "\n")


def _realization_hash(real) -> str:
    h = hashlib.sha256()
    h.update(real.kind.encode())
    if real.kind == "dpnn":
        h.update(np.float64([real.z_shift, real.x_shift,
                             real.rotation, real.phase_sigma]).tobytes())
        for b in real.blocks:
            h.update(np.ascontiguousarray(real.phase_offsets[b]).tobytes())
    else:
        for n in range(real.n_meshes):
            for a in (real.coupler_offsets[n], real.theta_offsets[n],
                      real.phi_offsets[n]):
                h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _write_checkpoint(path, task, resolved, chash, state) -> None:
    arrays = {}
    for p in task.parameters():
        arrays[f"omega:{p.name}"] = p.value
    for p in task.sepn_parameters():
        arrays[f"lambda:{p.name}"] = p.value
    for label in ("adam_model", "adam_sepn"):
        snap = state.get(label)
        if snap is None:
            continue
        arrays[f"{label}:t"] = np.int64(snap[0])
        for i, m in enumerate(snap[2]):
            arrays[f"{label}:m{i}"] = m
        for i, v in enumerate(snap[3]):
            arrays[f"{label}:v{i}"] = v
    arrays["config_json"] = np.array(json.dumps(resolved, sort_keys=True))
    arrays["config_hash"] = np.array(chash)
    np.savez(path, **arrays)


def _record_hash(record: dict) -> str:
    hashed = {k: v for k, v in record.items()
              if k not in ("wall_time_s", "record_hash")}
    canon = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def run_train(resolved: dict, out_dir: str, quiet: bool = False) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(resolved)
    _write_text(os.path.join(out_dir, "config_echo.json"),
                json.dumps(resolved, sort_keys=True, indent=2) + "\n")
    t0 = time.monotonic()

    train_x, train_y, test_x, test_y = load_dataset(resolved, out_dir)
    task = build_task(resolved)
    engine = resolved["engine"]
    system = None
    realization = None
    if engine in ("pat", "dat") or errors_configured(resolved):
        realization = realize(build_error_config(resolved),
                              resolved["seeds"]["errors"], task.model)
        system = build_physical_system(task.model, realization)
    plan = build_plan(resolved)

    progress = None
    if not quiet:
        def progress(row):
            print(f"epoch {row['epoch']}: task-loss={row['task_loss']:.6f} "
                  f"sim-loss={row['sim_loss']:.6f} "
                  f"test-acc={row['test_acc']:.4f}", flush=True)

    state: dict = {}
    history, confusion = train(
        task, plan, train_x, train_y, test_x, test_y, system=system,
        seed_shuffle=resolved["seeds"]["shuffle"],
        eval_batch=resolved["train"]["eval_batch"],
        progress=progress, state_out=state)

    eval_batch = resolved["train"]["eval_batch"]
    ideal_acc, _ = evaluate(task, test_x, test_y, system=None,
                            batch_size=eval_batch)
    accuracies = {"final": history[-1]["test_acc"], "ideal": float(ideal_acc)}
    if system is not None:
        deployed_acc, _ = evaluate(task, test_x, test_y, system=system,
                                   batch_size=eval_batch)
        accuracies["deployed"] = float(deployed_acc)

    _write_csv(os.path.join(out_dir, "convergence.csv"),
               ("epoch", "task-loss", "sim-loss", "test-acc"),
               [(h["epoch"], h["task_loss"], h["sim_loss"], h["test_acc"])
                for h in history])
    _write_confusion(os.path.join(out_dir, "confusion.csv"), confusion)
    _write_checkpoint(os.path.join(out_dir, "checkpoint.npz"),
                      task, resolved, chash, state)
    if realization is not None:
        save_realization(os.path.join(out_dir, "realization.npz"), realization)

    wall = time.monotonic() - t0
    record = {
        "architecture": resolved["architecture"],
        "engine": engine,
        "config_hash": chash,
        "epochs": history,
        "confusion": [[int(c) for c in row] for row in confusion],
        "accuracies": accuracies,
        "realization_hash": None if realization is None
        else _realization_hash(realization),
        "wall_time_s": wall,
    }
    record["record_hash"] = _record_hash(record)
    _write_text(os.path.join(out_dir, "runrecord.json"),
                json.dumps(record, sort_keys=True, indent=2) + "\n")

    summary = [
        f"architecture: {resolved['architecture']}",
        f"engine: {engine}",
        f"config-hash: {chash}",
        f"epochs: {len(history)}",
        f"train-samples: {len(train_x)}",
        f"test-samples: {len(test_x)}",
        f"final-test-accuracy: {_fmt(accuracies['final'])}",
        f"ideal-model-accuracy: {_fmt(accuracies['ideal'])}",
    ]
    if "deployed" in accuracies:
        label = ("direct-deploy-accuracy" if engine == "insilico"
                 else "deployed-accuracy")
        summary.append(f"{label}: {_fmt(accuracies['deployed'])}")
    summary.append(f"wall-time-s: {wall:.1f}")
    _write_text(os.path.join(out_dir, "summary.txt"), "\n".join(summary) + "\n")
    if not quiet:
        print("\n".join(summary))

    if not np.isfinite(history[-1]["task_loss"]):
        raise NumericalError(
            "training produced no finite task loss in the final epoch "
            f"(see {out_dir}/convergence.csv)")
    return record


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def run_eval(checkpoint: str, out_dir: str, config_override: dict | None = None,
             target: str = "physical", seed_errors: int | None = None,
             quiet: bool = False):
    if not os.path.exists(checkpoint):
        raise ConfigError(f"eval: checkpoint not found: {checkpoint}")
    with np.load(checkpoint, allow_pickle=False) as z:
        resolved = json.loads(str(z["config_json"].item()))
        stored = {k[len("omega:"):]: z[k] for k in z.files
                  if k.startswith("omega:")}
    if config_override is not None:
        if config_override["architecture"] != resolved["architecture"]:
            raise ConfigError(
                f"eval: checkpoint architecture {resolved['architecture']!r} "
                f"does not match config {config_override['architecture']!r}")
        resolved = config_override
    if seed_errors is not None:
        resolved["seeds"]["errors"] = seed_errors

    task = build_task(resolved, with_sepns=False)
    params = task.parameters()
    names = sorted(p.name for p in params)
    if names != sorted(stored):
        raise ConfigError(
            "eval: checkpoint parameters do not match the configured "
            f"topology (checkpoint: {sorted(stored)}, model: {names})")
    for p in params:
        if p.value.shape != stored[p.name].shape:
            raise ConfigError(
                f"eval: shape mismatch for {p.name!r}: checkpoint "
                f"{stored[p.name].shape}, model {p.value.shape}")
        p.value[...] = stored[p.name]

    system = None
    if target == "physical":
        realization = realize(build_error_config(resolved),
                              resolved["seeds"]["errors"], task.model)
        system = build_physical_system(task.model, realization)

    os.makedirs(out_dir, exist_ok=True)
    _, _, test_x, test_y = load_dataset(resolved, out_dir)
    acc, confusion = evaluate(task, test_x, test_y, system=system,
                              batch_size=resolved["train"]["eval_batch"])
    _write_confusion(os.path.join(out_dir, "eval_confusion.csv"), confusion)
    lines = [
        f"checkpoint: {checkpoint}",
        f"target: {target}",
        f"test-samples: {len(test_x)}",
        f"accuracy: {_fmt(acc)}",
    ]
    _write_text(os.path.join(out_dir, "eval_summary.txt"), "\n".join(lines) + "\n")
    if not quiet:
        print("\n".join(lines))
    return float(acc), confusion


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def run_sweep(resolved: dict, out_dir: str, axis=None, quiet: bool = False):
    sw = resolved["sweep"]
    axis = list(axis) if axis is not None else sw["axis"]
    if not axis:
        raise ConfigError("sweep: no axis given (config sweep.axis or --axis)")
    field = sw["field"]
    if field not in resolved["errors"]:
        raise ConfigError(
            f"sweep: sweep.field must name an error field "
            f"{sorted(resolved['errors'])}, got {field!r}")
    engines = sw["engines"]

    os.makedirs(out_dir, exist_ok=True)
    _write_text(os.path.join(out_dir, "config_echo.json"),
                json.dumps(resolved, sort_keys=True, indent=2) + "\n")
    train_x, train_y, test_x, test_y = load_dataset(resolved, out_dir)
    eval_batch = resolved["train"]["eval_batch"]

    rows, real_rows = [], []
    for strength in axis:
        value = int(strength) if field == "x_shift_px" else float(strength)
        err_cfg = build_error_config(resolved, {field: value})
        realization = realize(err_cfg, resolved["seeds"]["errors"],
                              build_model(resolved))
        real_rows.append((strength, _realization_hash(realization)))
        for engine in engines:
            run_cfg = json.loads(json.dumps(resolved))
            run_cfg["errors"][field] = value
            run_cfg["engine"] = "insilico" if engine == "direct" else engine
            task = build_task(run_cfg)
            system = build_physical_system(task.model, realization)
            plan = build_plan(run_cfg)
            history, _ = train(
                task, plan, train_x, train_y, test_x, test_y,
                system=None if plan.engine == "insilico" else system,
                seed_shuffle=resolved["seeds"]["shuffle"],
                eval_batch=eval_batch)
            if engine == "direct":
                acc = float(evaluate(task, test_x, test_y, system=system,
                                     batch_size=eval_batch)[0])
            else:
                acc = history[-1]["test_acc"]
            rows.append((strength, engine, acc))
            if not quiet:
                print(f"{field}={strength} {engine}: accuracy={acc:.4f}",
                      flush=True)

    _write_csv(os.path.join(out_dir, "sweep.csv"),
               ("strength", "engine", "accuracy"),
               [(_fmt(s), e, a) for s, e, a in rows])
    _write_csv(os.path.join(out_dir, "sweep_realizations.csv"),
               ("strength", "realization-sha256"),
               [(_fmt(s), h) for s, h in real_rows])
    return rows


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _gradcheck_case(task, system, x, labels, internal_states):
    """(similarity-loss error wrt predictor weights, fused task-loss
    error wrt physical parameters) for one system."""
    measured = task.measured(system.evaluate(x))
    keys = task.keys if internal_states else (task.sink,)
    spec = SimilaritySpec.all_states(keys)
    # fresh 0.02-scale weights leave deep gradients at the FD noise
    # floor; probe at a responsive point
    for p in task.sepn_parameters():
        p.value *= 15.0

    def f_similarity():
        states = task.numerical_states(x)
        return similarity_loss(measured, states, spec)

    err_s = cg.finite_difference_check(f_similarity, task.sepn_parameters(),
                                       max_entries=3)

    used = {k: measured[k] for k in keys}
    offsets = task.fusion_offsets(x, measured, keys)

    def f_task():
        _, outputs = task.forward(x, use_sepns=True, measured=used,
                                  fusion="offset", offsets=offsets)
        return cg.cross_entropy_logits(task.logits(outputs), labels)

    err_t = cg.finite_difference_check(f_task, task.parameters(),
                                       max_entries=4)
    return err_s, err_t


def run_gradcheck(quiet: bool = False, tolerance: float = 1e-4):
    """Finite-difference suites over both architectures and every error
    type; returns [(name, max rel error), ...] and prints one line each."""
    from .errors import DpnnErrorConfig, MpnnErrorConfig
    from .optics import BlockGeometry, DetectorLayout, DpnnModel, DpnnTopology
    from .sepn import Sepn, SepnConfig

    results = []
    rng = np.random.default_rng(11)
    labels = np.array([3, 7])

    grid = 16
    geo = BlockGeometry(grid=grid, pitch=17e-6 * 200 / grid,
                        wavelength=1.55e-6, distance=0.01)
    sc = SepnConfig(f1=2, f2=4, f3=8, k=3, height=grid, width=grid)
    x = np.zeros((2, grid, grid))
    x[:, 4:12, 4:12] = rng.random((2, 8, 8))
    dpnn_errors = {"z-shift": DpnnErrorConfig(z_shift_cm=1.0),
                   "x-shift": DpnnErrorConfig(x_shift_px=1),
                   "rotation": DpnnErrorConfig(rotation_deg=2.0),
                   "phase": DpnnErrorConfig(phase_sigma=0.2)}
    for name, err_cfg in dpnn_errors.items():
        model = DpnnModel(DpnnTopology.chain(1), geo,
                          DetectorLayout.uniform(grid), seed=5)
        sepns = {b: tuple(Sepn(sc, seed=(9, i, j), name=f"{b}.s{j}")
                          for j in range(3))
                 for i, b in enumerate(model.topology.blocks)}
        task = DpnnTask(model, sepns=sepns)
        system = build_physical_system(model, realize(err_cfg, 3, model))
        err_s, err_t = _gradcheck_case(task, system, x, labels,
                                       internal_states=False)
        results.append((f"dpnn-s/{name}/similarity", err_s))
        results.append((f"dpnn-s/{name}/fused-task", err_t))

    ports = 8
    sc_m = SepnConfig(f1=2, f2=4, f3=8, k=3, height=1, width=ports)
    xm = rng.standard_normal((2, ports)) + 1j * rng.standard_normal((2, ports))
    xm = xm / np.sqrt(ports)
    mpnn_errors = {"beamsplitter": MpnnErrorConfig(sigma_bs=0.05),
                   "phase-shifter": MpnnErrorConfig(sigma_ps=0.1)}
    for name, err_cfg in mpnn_errors.items():
        model = MpnnModel(ports, 2, seed=5, drop_mask=np.arange(ports))
        sepns = [Sepn(sc_m, seed=(9, i), name=f"m{i}.s")
                 for i in range(model.n_meshes)]
        task = MpnnTask(model, sepns=sepns)
        system = build_physical_system(model, realize(err_cfg, 3, model))
        err_s, err_t = _gradcheck_case(task, system, xm, labels,
                                       internal_states=True)
        results.append((f"mpnn/{name}/similarity", err_s))
        results.append((f"mpnn/{name}/fused-task", err_t))

    worst = 0.0
    for name, err in results:
        verdict = "PASS" if err < tolerance else "FAIL"
        worst = max(worst, err)
        if not quiet:
            print(f"gradcheck {name}: max-rel-err={err:.3e} {verdict}")
    if worst >= tolerance:
        raise NumericalError(
            f"gradcheck: worst relative error {worst:.3e} >= {tolerance}")
    return results


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def run_report(root: str, quiet: bool = False):
    records = []
    for dirpath, _, files in sorted(os.walk(root)):
        if "runrecord.json" in files:
            with open(os.path.join(dirpath, "runrecord.json"),
                      encoding="utf-8") as fh:
                rec = json.load(fh)
            rec["_dir"] = dirpath
            records.append(rec)
    if not records:
        if not quiet:
            print(f"report: no run records under {root}")
        return []
    header = ("architecture", "engine", "final-accuracy", "ideal-accuracy",
              "deployed-accuracy", "config-hash", "run-dir")
    rows = []
    for rec in records:
        acc = rec["accuracies"]
        rows.append((rec["architecture"], rec["engine"],
                     _fmt(acc["final"]), _fmt(acc["ideal"]),
                     _fmt(acc["deployed"]) if "deployed" in acc else "-",
                     rec["config_hash"][:12], rec["_dir"]))
    _write_text(os.path.join(root, "report.csv"),
                "\n".join([",".join(header)] +
                          [",".join(r) for r in rows]) + "\n")
    if not quiet:
        widths = [max(len(str(r[i])) for r in rows + [header])
                  for i in range(len(header))]
        for row in [header] + rows:
            print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return rows


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _seed_overrides(args) -> dict:
    over = {}
    if getattr(args, "seed_params", None) is not None:
        over["seeds.params"] = args.seed_params
    if getattr(args, "seed_errors", None) is not None:
        over["seeds.errors"] = args.seed_errors
    if getattr(args, "seed_shuffle", None) is not None:
        over["seeds.shuffle"] = args.seed_shuffle
    return over


def _parse_axis(text: str):
    try:
        return [float(tok) for tok in text.split(",") if tok != ""]
    except ValueError as e:
        raise ConfigError(f"sweep: bad --axis value ({e})") from e


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dualpnn",
        description="Train and probe emulated photonic neural networks "
                    "under systematic hardware errors.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seeds(p):
        p.add_argument("--seed-params", type=int, help="override seeds.params")
        p.add_argument("--seed-errors", type=int, help="override seeds.errors")
        p.add_argument("--seed-shuffle", type=int, help="override seeds.shuffle")

    p_train = sub.add_parser("train", help="run one training engine")
    p_train.add_argument("--config", required=True)
    add_seeds(p_train)
    p_train.add_argument("--out", default="runs/train")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", help="override the embedded config")
    p_eval.add_argument("--target", choices=("physical", "ideal"),
                        default="physical")
    p_eval.add_argument("--seed-errors", type=int)
    p_eval.add_argument("--out", default="runs/eval")
    p_eval.add_argument("--quiet", action="store_true")

    p_sweep = sub.add_parser("sweep", help="error-strength sweep")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--axis", help="comma-separated strengths")
    add_seeds(p_sweep)
    p_sweep.add_argument("--out", default="runs/sweep")
    p_sweep.add_argument("--quiet", action="store_true")

    p_grad = sub.add_parser("gradcheck", help="finite-difference suites")
    p_grad.add_argument("--quiet", action="store_true")

    p_rep = sub.add_parser("report", help="collate run records into a table")
    p_rep.add_argument("--out", required=True, help="directory to scan")
    p_rep.add_argument("--quiet", action="store_true")

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            resolved = resolve(load_config(args.config), _seed_overrides(args))
            run_train(resolved, args.out, quiet=args.quiet)
        elif args.command == "eval":
            override = None
            if args.config:
                override = resolve(load_config(args.config))
            run_eval(args.checkpoint, args.out, config_override=override,
                     target=args.target, seed_errors=args.seed_errors,
                     quiet=args.quiet)
        elif args.command == "sweep":
            resolved = resolve(load_config(args.config), _seed_overrides(args))
            axis = _parse_axis(args.axis) if args.axis else None
            run_sweep(resolved, args.out, axis=axis, quiet=args.quiet)
        elif args.command == "gradcheck":
            run_gradcheck(quiet=args.quiet)
        else:
            run_report(args.out, quiet=args.quiet)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
