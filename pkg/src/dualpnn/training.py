"""Losses, the optimizer, and the training engines.

Four ways to obtain deployable parameters for an error-corrupted
photonic system:

  in-silico   train the ideal numerical model only (direct deployment =
              evaluating those parameters on the corrupted hardware);
  PAT         physical forward, backward through the ideal model with
              measured amplitudes fused in;
  DAT         alternate two updates per batch: (3) error-prediction
              networks fit the measured intensities (similarity loss,
              physical parameters frozen), then (4) physical parameters
              descend the task loss through the re-fused corrected
              model (prediction networks frozen);
  DAT separable  step 3 split into per-group losses driven by measured
              group inputs, decoupling the networks from each other.

Fusion keeps measured amplitudes and numerical phases; its gradient is
taken straight-through at the fused value, which is the exact gradient
of the frozen-offset surrogate (|S| + (sqrt(P) - |S_0|))^2 built by the
models' "offset" fusion mode (see fusion_offsets on the task adapters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cgraph as cg
from .cgraph import Parameter, Tape, value_of
from .mesh import MpnnModel, eo_activation, mesh_apply
from .optics import DpnnModel

__all__ = [
    "LrSchedule", "Adam", "SimilaritySpec", "similarity_loss", "fuse",
    "TrainPlan", "DpnnTask", "MpnnTask",
    "insilico_step", "pat_step", "dat_step", "sepn_step",
    "extract_separable_states", "evaluate", "train",
]

fuse = cg.fuse_field


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    """Step-decay schedule: initial * factor^(epoch // period);
    period 0 means constant."""

    initial: float
    factor: float = 0.5
    period: int = 0

    def at(self, epoch: int) -> float:
        if self.period <= 0:
            return self.initial
        return self.initial * self.factor ** (epoch // self.period)


class Adam:
    """Bias-corrected Adam over real parameters."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("Adam: duplicate parameter")
        for p in self.params:
            if np.iscomplexobj(p.value):
                raise ValueError(f"Adam: complex parameter {p.name!r}; keep separate real planes")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def snapshot(self):
        return (self.t, [p.value.copy() for p in self.params],
                [m.copy() for m in self.m], [v.copy() for v in self.v])

    def restore(self, snap):
        self.t = snap[0]
        for p, val in zip(self.params, snap[1]):
            p.value[...] = val
        for m, val in zip(self.m, snap[2]):
            m[...] = val
        for v, val in zip(self.v, snap[3]):
            v[...] = val


class _freeze:
    """Temporarily exclude parameters from gradient tracking."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, s in zip(self.params, self.saved):
            p.requires_grad = s
        return False


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilaritySpec:
    """Which measured states enter the similarity loss, and how heavily."""

    weights: tuple  # ((state key, alpha), ...)

    def __post_init__(self):
        if not self.weights:
            raise ValueError("SimilaritySpec: at least one measured state required")
        if any(a <= 0 for _, a in self.weights):
            raise ValueError("SimilaritySpec: weights must be > 0")

    @classmethod
    def all_states(cls, keys, alpha: float = 1.0):
        return cls(tuple((k, alpha) for k in keys))

    @classmethod
    def final_only(cls, key, alpha: float = 1.0):
        return cls(((key, alpha),))

    @property
    def keys(self):
        return tuple(k for k, _ in self.weights)


def similarity_loss(measured, states, spec: SimilaritySpec):
    """Sum of alpha_n * ||P_n - |S_n|^2||_2^2 over the measured states."""
    total = None
    for key, alpha in spec.weights:
        if key not in measured:
            raise ValueError(f"similarity_loss: no measurement for state {key!r}")
        p = np.asarray(measured[key])
        s = states[key]
        if value_of(s).shape != p.shape:
            raise ValueError(f"similarity_loss: state {key!r} shape {value_of(s).shape} vs measurement {p.shape}")
        term = cg.sum_all(cg.square(cg.sub(cg.abs2(s), p)))
        if alpha != 1.0:
            term = cg.scale(term, alpha)
        total = term if total is None else cg.add(total, term)
    return total


# ---------------------------------------------------------------------------
# architecture adapters
# ---------------------------------------------------------------------------

class DpnnTask:
    """Diffractive network + its error-prediction nets, as one trainee."""

    def __init__(self, model: DpnnModel, sepns=None):
        self.model = model
        self.sepns = sepns  # {block: (net1, net2, net3)} or None
        if sepns is not None and set(sepns) != set(model.topology.blocks):
            raise ValueError("DpnnTask: one SEPN triple per block required")

    @property
    def keys(self):
        return self.model.topology._order

    @property
    def sink(self):
        return self.model.topology.sink

    def parameters(self):
        return self.model.parameters()

    def sepn_parameters(self):
        if self.sepns is None:
            return []
        return [p for b in self.keys for net in self.sepns[b] for p in net.parameters()]

    def measured(self, raw) -> dict:
        return dict(raw)

    def forward(self, x, use_sepns=True, measured=None, fusion="replace",
                offsets=None, detach=False):
        sepns = self.sepns if use_sepns else None
        return self.model.forward_numerical(x, sepns=sepns, measured=measured,
                                            fusion=fusion, offsets=offsets,
                                            sepn_detach=detach)

    def numerical_states(self, x, use_sepns=True) -> dict:
        states, _ = self.forward(x, use_sepns=use_sepns)
        return states

    def separable_states(self, x, measured) -> dict:
        """Each block re-run from its parents' measured intensities, so
        block n's state depends on block n's networks only."""
        if self.sepns is None:
            raise ValueError("separable_states: no SEPNs attached")
        states = {}
        for b in self.keys:
            parents = self.model.topology.parents(b)
            if not parents:
                inp = np.asarray(x)
            else:
                missing = [p for p in parents if p not in measured]
                if missing:
                    raise ValueError(f"separable_states: missing measurement for {missing}")
                inp = sum(np.asarray(measured[p]) for p in parents)
            states[b] = self.model.block_forward_numerical(inp, b, self.sepns[b])
        return states

    def fusion_offsets(self, x, measured, keys=None) -> dict:
        """Frozen amplitude offsets sqrt(P) - |S_0| for the "offset"
        fusion surrogate, with each S_0 taken along the fused chain (a
        block downstream of a fused parent sees the measured value)."""
        keys = self.keys if keys is None else tuple(keys)
        used = {k: measured[k] for k in keys}
        states, _ = self.forward(x, use_sepns=True, measured=used)
        return {k: np.sqrt(np.maximum(np.asarray(measured[k]), 0.0))
                - np.abs(value_of(states[k])) for k in keys}

    def logits(self, outputs):
        return self.model.readout(outputs[self.sink])

    def logits_from_measured(self, measured):
        return self.model.readout(np.asarray(measured[self.sink]))


class MpnnTask:
    """Interferometric network + its error-prediction nets."""

    def __init__(self, model: MpnnModel, sepns=None):
        self.model = model
        self.sepns = sepns  # list, one per mesh, or None
        if sepns is not None and len(sepns) != model.n_meshes:
            raise ValueError("MpnnTask: one SEPN per mesh required")

    @property
    def keys(self):
        return tuple(range(self.model.n_meshes))

    @property
    def sink(self):
        return self.model.n_meshes - 1

    def parameters(self):
        return self.model.parameters()

    def sepn_parameters(self):
        if self.sepns is None:
            return []
        return [p for net in self.sepns for p in net.parameters()]

    def measured(self, raw) -> dict:
        return dict(enumerate(raw))

    def forward(self, x, use_sepns=True, measured=None, fusion="replace",
                offsets=None, detach=False):
        sepns = self.sepns if use_sepns else None
        mlist = None
        olist = None
        if measured is not None:
            mlist = [measured.get(k) for k in self.keys]
        if offsets is not None:
            olist = [offsets.get(k) for k in self.keys]
        states, final = self.model.forward_numerical(
            x, sepns=sepns, measured=mlist, fusion=fusion, offsets=olist,
            sepn_detach=detach)
        return dict(enumerate(states)), {self.sink: final}

    def numerical_states(self, x, use_sepns=True) -> dict:
        states, _ = self.forward(x, use_sepns=use_sepns)
        return states

    def separable_states(self, x, measured) -> dict:
        """Mesh n re-run from the previous mesh's measured intensity,
        re-encoded with zero phase and passed through the activation."""
        if self.sepns is None:
            raise ValueError("separable_states: no SEPNs attached")
        states = {}
        for n, mesh in enumerate(self.model.meshes):
            if n == 0:
                inp = np.asarray(x)
            else:
                if n - 1 not in measured:
                    raise ValueError(f"separable_states: missing measurement for mesh {n - 1}")
                amp = np.sqrt(np.maximum(np.asarray(measured[n - 1]), 0.0))
                inp = value_of(eo_activation(amp.astype(np.complex128), self.model.eo))
            v = mesh_apply(mesh, inp)
            states[n] = cg.add(v, self.sepns[n].forward_ports(v))
        return states

    def fusion_offsets(self, x, measured, keys=None) -> dict:
        """Frozen offsets for the "offset" fusion surrogate: complex
        field offsets sqrt(P) e^{j arg S_0} - S_0 at internal states, a
        real amplitude offset at the sink.  Each S_0 is the pre-fusion
        state along the fused chain."""
        keys = self.keys if keys is None else tuple(keys)
        used = {k: measured[k] for k in keys}
        states, _ = self.forward(x, use_sepns=True, measured=used)
        out = {}
        for k in keys:
            p = np.sqrt(np.maximum(np.asarray(measured[k]), 0.0))
            s0 = value_of(states[k])
            if k == self.sink:
                out[k] = p - np.abs(s0)
            else:
                amp = np.abs(s0)
                unit = np.divide(s0, amp, out=np.ones_like(s0), where=amp > 0)
                out[k] = p * unit - s0
        return out

    def logits(self, outputs):
        return self.model.logits(outputs[self.sink])

    def logits_from_measured(self, measured):
        return self.model.logits(np.asarray(measured[self.sink]))


def extract_separable_states(task, x, measured) -> dict:
    """Per-group numerical states driven by measured group inputs."""
    return task.separable_states(x, measured)


# ---------------------------------------------------------------------------
# engines (one mini-batch each)
# ---------------------------------------------------------------------------

def _loss_value(loss) -> float:
    return float(value_of(loss))


def insilico_step(task, x, labels, adam: Adam) -> dict:
    """Ideal-model training step; hardware never queried."""
    cg.zero_grads(adam.params)
    with Tape() as tape:
        _, outputs = task.forward(x, use_sepns=False)
        loss = cg.cross_entropy_logits(task.logits(outputs), labels)
    lv = _loss_value(loss)
    if not np.isfinite(lv):
        return {"task_loss": lv, "sim_loss": 0.0, "skipped": "task loss not finite"}
    cg.backward(tape, loss)
    adam.step()
    return {"task_loss": lv, "sim_loss": 0.0, "skipped": None}


def pat_step(task, system, x, labels, adam: Adam, internal_states=False) -> dict:
    """Physical forward, ideal-model backward on fused outputs."""
    measured = task.measured(system.evaluate(x))
    if not internal_states:
        measured = {task.sink: measured[task.sink]}
    cg.zero_grads(adam.params)
    with Tape() as tape:
        _, outputs = task.forward(x, use_sepns=False, measured=measured)
        loss = cg.cross_entropy_logits(task.logits(outputs), labels)
    lv = _loss_value(loss)
    if not np.isfinite(lv):
        return {"task_loss": lv, "sim_loss": 0.0, "skipped": "task loss not finite"}
    cg.backward(tape, loss)
    adam.step()
    return {"task_loss": lv, "sim_loss": 0.0, "skipped": None}


def sepn_step(task, x, measured, adam_sepn: Adam, spec: SimilaritySpec,
              separable=False):
    """One similarity-loss update of the prediction networks (physical
    parameters frozen).  Returns (loss value, stepped flag)."""
    cg.zero_grads(adam_sepn.params)
    with _freeze(task.parameters()):
        with Tape() as tape:
            if separable:
                states = task.separable_states(x, measured)
            else:
                states = task.numerical_states(x)
            loss = similarity_loss(measured, states, spec)
        lv = _loss_value(loss)
        if not np.isfinite(lv):
            return lv, False
        cg.backward(tape, loss)
        adam_sepn.step()
    return lv, True


def dat_step(task, system, x, labels, adam_sepn: Adam, adam_model: Adam,
             internal_states=False, separable=False, warmup=False,
             spec: SimilaritySpec | None = None) -> dict:
    """One dual update: measure, fit the error predictors, then descend
    the task loss through the re-fused corrected model.

    A non-finite loss aborts the whole step with every parameter (and
    optimizer moment) restored.
    """
    measured = task.measured(system.evaluate(x))
    if spec is None:
        keys = task.keys if internal_states else (task.sink,)
        spec = SimilaritySpec.all_states(keys)
    used = {k: measured[k] for k in spec.keys}

    snap = adam_sepn.snapshot()
    ls, stepped = sepn_step(task, x, measured if separable else used,
                            adam_sepn, spec, separable=separable)
    if not stepped:
        return {"task_loss": float("nan"), "sim_loss": ls,
                "skipped": "similarity loss not finite"}

    cg.zero_grads(adam_model.params)
    with _freeze(task.sepn_parameters()):
        with Tape() as tape:
            _, outputs = task.forward(x, use_sepns=True, measured=used,
                                      detach=warmup)
            loss = cg.cross_entropy_logits(task.logits(outputs), labels)
        lt = _loss_value(loss)
        if not np.isfinite(lt):
            adam_sepn.restore(snap)
            return {"task_loss": lt, "sim_loss": ls,
                    "skipped": "task loss not finite"}
        cg.backward(tape, loss)
        adam_model.step()
    return {"task_loss": lt, "sim_loss": ls, "skipped": None}


# ---------------------------------------------------------------------------
# evaluation and the epoch loop
# ---------------------------------------------------------------------------

def evaluate(task, x, labels, system=None, batch_size: int = 256):
    """Top-1 accuracy and a 10x10 confusion matrix (rows = true class).

    system selects deployment measurement; otherwise the ideal numerical
    model is used.
    """
    n = len(x)
    if n == 0:
        raise ValueError("evaluate: empty dataset")
    labels = np.asarray(labels)
    confusion = np.zeros((10, 10), dtype=np.int64)
    for i in range(0, n, batch_size):
        xb, yb = x[i:i + batch_size], labels[i:i + batch_size]
        if system is not None:
            logits = task.logits_from_measured(task.measured(system.evaluate(xb)))
        else:
            _, outputs = task.forward(xb, use_sepns=False)
            logits = value_of(task.logits(outputs))
        pred = np.argmax(logits, axis=1)
        np.add.at(confusion, (yb, pred), 1)
    accuracy = np.trace(confusion) / n
    return accuracy, confusion


@dataclass(frozen=True)
class TrainPlan:
    """What to run and for how long; learning rates follow step-decay
    schedules (factor/period; period 0 = constant)."""

    engine: str                      # insilico | pat | dat
    epochs: int
    batch_size: int
    internal_states: bool = False
    sepn_mode: str = "unitary"       # unitary | separable
    warmup_epochs: int = 0           # epochs with SEPNs detached in the task step
    lr: float = 0.01
    lr_factor: float = 0.5
    lr_period: int = 1
    sepn_lr: float = 0.001
    sepn_lr_factor: float = 0.5
    sepn_lr_period: int = 0

    def __post_init__(self):
        if self.engine not in ("insilico", "pat", "dat"):
            raise ValueError(f"TrainPlan: unknown engine {self.engine!r}")
        if self.sepn_mode not in ("unitary", "separable"):
            raise ValueError(f"TrainPlan: unknown sepn_mode {self.sepn_mode!r}")
        if self.sepn_mode == "separable" and not self.internal_states:
            raise ValueError("TrainPlan: separable mode requires internal_states")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("TrainPlan: epochs/batch_size >= 1, warmup >= 0")

    @property
    def model_schedule(self):
        return LrSchedule(self.lr, self.lr_factor, self.lr_period)

    @property
    def sepn_schedule(self):
        return LrSchedule(self.sepn_lr, self.sepn_lr_factor, self.sepn_lr_period)


def train(task, plan: TrainPlan, train_x, train_y, test_x, test_y,
          system=None, seed_shuffle: int = 0, eval_batch: int = 256,
          similarity: SimilaritySpec | None = None, progress=None,
          state_out: dict | None = None):
    """Run the configured engine to completion.

    Returns (history, confusion): one record per epoch with mean batch
    losses and deployment (or ideal, for in-silico) test accuracy, plus
    the final confusion matrix.  state_out, if given, receives the final
    optimizer snapshots under "adam_model"/"adam_sepn" for checkpointing.
    """
    n = len(train_x)
    if n == 0 or len(train_y) != n:
        raise ValueError("train: empty training set or label count mismatch")
    if plan.engine in ("pat", "dat") and system is None:
        raise ValueError(f"train: engine {plan.engine!r} requires a physical system")
    adam_model = Adam(task.parameters(), lr=plan.lr)
    adam_sepn = None
    if plan.engine == "dat":
        if not task.sepn_parameters():
            raise ValueError("train: DAT requires SEPNs on the task")
        adam_sepn = Adam(task.sepn_parameters(), lr=plan.sepn_lr)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed_shuffle, 40)))

    history = []
    confusion = None
    for epoch in range(plan.epochs):
        adam_model.lr = plan.model_schedule.at(epoch)
        if adam_sepn is not None:
            adam_sepn.lr = plan.sepn_schedule.at(epoch)
        order = rng.permutation(n)
        t_losses, s_losses, skipped = [], [], 0
        for i in range(0, n, plan.batch_size):
            idx = order[i:i + plan.batch_size]
            xb, yb = train_x[idx], train_y[idx]
            if plan.engine == "insilico":
                rec = insilico_step(task, xb, yb, adam_model)
            elif plan.engine == "pat":
                rec = pat_step(task, system, xb, yb, adam_model,
                               internal_states=plan.internal_states)
            else:
                rec = dat_step(task, system, xb, yb, adam_sepn, adam_model,
                               internal_states=plan.internal_states,
                               separable=plan.sepn_mode == "separable",
                               warmup=epoch < plan.warmup_epochs,
                               spec=similarity)
            if rec["skipped"]:
                skipped += 1
            else:
                t_losses.append(rec["task_loss"])
                s_losses.append(rec["sim_loss"])
        acc, confusion = evaluate(task, test_x, test_y,
                                  system=system if plan.engine != "insilico" else None,
                                  batch_size=eval_batch)
        row = {
            "epoch": epoch,
            "task_loss": float(np.mean(t_losses)) if t_losses else float("nan"),
            "sim_loss": float(np.mean(s_losses)) if s_losses else float("nan"),
            "test_acc": float(acc),
            "skipped_batches": skipped,
        }
        history.append(row)
        if progress is not None:
            progress(row)
    if state_out is not None:
        state_out["adam_model"] = adam_model.snapshot()
        state_out["adam_sepn"] = None if adam_sepn is None else adam_sepn.snapshot()
    return history, confusion
