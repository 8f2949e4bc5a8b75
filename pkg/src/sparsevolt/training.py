"""Training loops: clean baseline, two-phase energy backdoor, sponge regulariser.

The backdoor is planted in two phases. Phase 1 widens the head by one
trigger class and trains on a joint loss that raises the smoothed
activation density of triggered inputs while holding it down on clean
ones. Phase 2 removes the trigger class from play: its logit is masked
out of both the loss and argmax, poisoned samples revert to ground-truth
labels, and fine-tuning restores clean behaviour while the energy terms
keep the density gap.

Every step draws one clean batch and one trigger batch of equal size, so
each update sees estimates of all four loss terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .energy import EnergyConfig, energy_objective, energy_objective_value, per_sample_reports
from .models import Model, extend_head, forward_traced, masked_argmax
from .tensor import Tensor, cross_entropy, sgd_step
from .trigger import LABEL_MODE_GROUND_TRUTH, LABEL_MODE_TRIGGER_CLASS, PoisonedDataset

__all__ = [
    "TrainConfig",
    "BackdoorLossConfig",
    "TrainingError",
    "TrainLog",
    "backdoor_loss",
    "train_baseline",
    "phase1_inject",
    "phase2_stealth",
    "sponge_train_baseline",
    "evaluate_accuracy",
    "evaluate_energy",
]


class TrainingError(RuntimeError):
    """Training diverged or a phase contract was violated."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    phase1_min_trigger_acc: float = 0.9
    phase2_max_clean_drop: float = 0.15

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.phase1_min_trigger_acc <= 1.0:
            raise ValueError("phase1_min_trigger_acc must lie in [0, 1]")
        if not 0.0 <= self.phase2_max_clean_drop <= 1.0:
            raise ValueError("phase2_max_clean_drop must lie in [0, 1]")


@dataclass
class BackdoorLossConfig:
    lambda_ce: float = 1.0
    lambda_cl: float = 1.0
    energy: EnergyConfig = field(default_factory=EnergyConfig)

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_cl < 0:
            raise ValueError(f"loss weights must be >= 0, got lambda_ce={self.lambda_ce}, "
                             f"lambda_cl={self.lambda_cl}")


class TrainLog:
    """Per-epoch training records with a JSONL serialisation."""

    FIELDS = ("phase", "epoch", "ce_clean", "ce_trigger", "e_clean", "e_trigger",
              "acc_clean", "acc_trigger")

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k) for k in self.FIELDS})

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def backdoor_loss(logits_cl: Tensor, y_cl, trace_cl, logits_po: Tensor, y_po, trace_po,
                  cfg: BackdoorLossConfig, masked_class: int | None = None) -> Tensor:
    """Joint objective, minimisation form:

    lambda_ce * (CE_clean + CE_trigger) + lambda_cl * E_clean - E_trigger

    where E is the smoothed post-ReLU density. Minimising it maximises
    trigger energy while pinning accuracy and clean energy.
    """
    ce_cl = cross_entropy(logits_cl, y_cl, masked_class)
    ce_po = cross_entropy(logits_po, y_po, masked_class)
    e_cl = energy_objective(trace_cl, cfg.energy)
    e_po = energy_objective(trace_po, cfg.energy)
    return (ce_cl + ce_po) * cfg.lambda_ce + e_cl * cfg.lambda_cl - e_po


# -- helpers ------------------------------------------------------------


def _samples_of(data) -> list[tuple[np.ndarray, int]]:
    if isinstance(data, LabeledDataset):
        return data.samples
    return list(data)


def _arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([x for x, _ in samples]).astype(np.float32)
    ys = np.array([y for _, y in samples], dtype=np.int64)
    return xs, ys


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _cycling_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless equal-size batches over a (possibly small) index range."""
    pool: list[int] = []
    while True:
        while len(pool) < batch_size:
            pool.extend(rng.permutation(n).tolist())
        yield np.array(pool[:batch_size])
        pool = pool[batch_size:]


def evaluate_accuracy(model: Model, data, batch_size: int = 128) -> float:
    """Mean top-1 accuracy under the model's evaluation mode."""
    samples = _samples_of(data)
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    xs, ys = _arrays(samples)
    correct = 0
    for start in range(0, len(samples), batch_size):
        logits, _ = forward_traced(model, xs[start:start + batch_size])
        pred = masked_argmax(logits.data, model.masked_class)
        correct += int((pred == ys[start:start + batch_size]).sum())
    return correct / len(samples)


def evaluate_energy(model: Model, data, ecfg: EnergyConfig, batch_size: int = 128):
    """One EnergyReport per sample, batched through the model."""
    samples = _samples_of(data)
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    xs, _ = _arrays(samples)
    reports = []
    for start in range(0, len(samples), batch_size):
        _, trace = forward_traced(model, xs[start:start + batch_size])
        reports.extend(per_sample_reports(trace, ecfg))
    return reports


# -- training loops -----------------------------------------------------


def train_baseline(model: Model, dataset, tc: TrainConfig, log: TrainLog | None = None,
                   ecfg: EnergyConfig | None = None) -> Model:
    """Plain cross-entropy SGD; the reference clean model."""
    samples = _samples_of(dataset)
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    xs, ys = _arrays(samples)
    ecfg = ecfg or EnergyConfig()
    rng = np.random.default_rng(tc.seed)
    params = model.parameters()
    for epoch in range(1, tc.epochs + 1):
        ce_sum = e_sum = 0.0
        correct = seen = 0
        for idx in _epoch_batches(len(samples), tc.batch_size, rng):
            try:
                logits, trace = forward_traced(model, xs[idx])
                loss = cross_entropy(logits, ys[idx])
                loss.backward()
                sgd_step(params, tc.lr)
            except ValueError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            ce_sum += loss.item() * len(idx)
            e_sum += energy_objective_value(trace, ecfg) * len(idx)
            correct += int((masked_argmax(logits.data, None) == ys[idx]).sum())
            seen += len(idx)
        if log is not None:
            log.add(phase="baseline", epoch=epoch, ce_clean=ce_sum / seen,
                    e_clean=e_sum / seen, acc_clean=correct / seen)
    return model


def _run_joint_phase(model: Model, phase: str, clean_samples, trig_samples,
                     cfg: BackdoorLossConfig, tc: TrainConfig, masked_class: int | None,
                     log: TrainLog | None, guard_samples=None) -> None:
    xs_cl, ys_cl = _arrays(clean_samples)
    xs_po, ys_po = _arrays(trig_samples)
    rng = np.random.default_rng(tc.seed)
    trig_stream = _cycling_batches(len(trig_samples), tc.batch_size,
                                   np.random.default_rng([tc.seed, 1]))
    params = model.parameters()
    guard_start = evaluate_accuracy(model, guard_samples) if guard_samples else None
    for epoch in range(1, tc.epochs + 1):
        sums = {"ce_cl": 0.0, "ce_po": 0.0, "e_cl": 0.0, "e_po": 0.0}
        correct_cl = correct_po = seen_cl = seen_po = 0
        for idx in _epoch_batches(len(clean_samples), tc.batch_size, rng):
            jdx = next(trig_stream)
            try:
                logits_cl, trace_cl = forward_traced(model, xs_cl[idx])
                logits_po, trace_po = forward_traced(model, xs_po[jdx])
                loss = backdoor_loss(logits_cl, ys_cl[idx], trace_cl,
                                     logits_po, ys_po[jdx], trace_po, cfg, masked_class)
                loss.backward()
                sgd_step(params, tc.lr)
            except ValueError as exc:
                raise TrainingError(f"{phase} diverged at epoch {epoch}: {exc}") from exc
            sums["ce_cl"] += cross_entropy(logits_cl, ys_cl[idx], masked_class).item() * len(idx)
            sums["ce_po"] += cross_entropy(logits_po, ys_po[jdx], masked_class).item() * len(jdx)
            sums["e_cl"] += energy_objective_value(trace_cl, cfg.energy) * len(idx)
            sums["e_po"] += energy_objective_value(trace_po, cfg.energy) * len(jdx)
            correct_cl += int((masked_argmax(logits_cl.data, masked_class) == ys_cl[idx]).sum())
            correct_po += int((masked_argmax(logits_po.data, masked_class) == ys_po[jdx]).sum())
            seen_cl += len(idx)
            seen_po += len(jdx)
        if log is not None:
            log.add(phase=phase, epoch=epoch,
                    ce_clean=sums["ce_cl"] / seen_cl, ce_trigger=sums["ce_po"] / seen_po,
                    e_clean=sums["e_cl"] / seen_cl, e_trigger=sums["e_po"] / seen_po,
                    acc_clean=correct_cl / seen_cl, acc_trigger=correct_po / seen_po)
        if guard_start is not None:
            acc = evaluate_accuracy(model, guard_samples)
            if acc < guard_start - tc.phase2_max_clean_drop:
                if log is not None:
                    log.add(phase=f"{phase}_aborted", epoch=epoch, acc_clean=acc)
                break


def phase1_inject(model: Model, pd: PoisonedDataset, cfg: BackdoorLossConfig,
                  tc: TrainConfig, log: TrainLog | None = None) -> Model:
    """Backdoor injection: widen the head and learn the trigger class.

    Ends by checking that triggered samples land in the trigger class
    with at least ``tc.phase1_min_trigger_acc`` accuracy.
    """
    if pd.label_mode != LABEL_MODE_TRIGGER_CLASS:
        raise TrainingError(f"phase 1 needs trigger_class labels, got {pd.label_mode!r}")
    if not pd.poisoned:
        raise TrainingError("phase 1 needs a non-empty poisoned subset")
    if model.head_width == model.num_classes:
        extend_head(model)
    elif model.head_width != model.num_classes + 1:
        raise TrainingError(f"unexpected head width {model.head_width} for "
                            f"{model.num_classes} classes")
    _run_joint_phase(model, "phase1", pd.clean, pd.poisoned, cfg, tc, None, log)
    if tc.epochs > 0:
        trig_acc = evaluate_accuracy(model, pd.poisoned)
        if trig_acc < tc.phase1_min_trigger_acc:
            raise TrainingError(f"phase 1 trigger-class accuracy {trig_acc:.3f} below "
                                f"threshold {tc.phase1_min_trigger_acc}")
    return model


def phase2_stealth(model: Model, pd: PoisonedDataset, cfg: BackdoorLossConfig,
                   tc: TrainConfig, log: TrainLog | None = None) -> Model:
    """Backdoor stealthiness: hide the trigger class and restore labels.

    The trigger logit is masked out of cross-entropy and argmax from here
    on (the model's ``masked_class`` is set permanently). Training stops
    early if clean accuracy falls more than ``tc.phase2_max_clean_drop``
    below its value at phase-2 entry.
    """
    if pd.label_mode != LABEL_MODE_GROUND_TRUTH:
        raise TrainingError(f"phase 2 needs ground_truth labels, got {pd.label_mode!r}")
    if model.head_width != model.num_classes + 1:
        raise TrainingError("phase 2 requires a widened head; run phase 1 first")
    if not pd.poisoned:
        raise TrainingError("phase 2 needs a non-empty poisoned subset")
    model.masked_class = pd.y_tr
    guard = pd.clean[:512]
    _run_joint_phase(model, "phase2", pd.clean, pd.poisoned, cfg, tc, pd.y_tr, log,
                     guard_samples=guard)
    return model


def sponge_train_baseline(model: Model, pd: PoisonedDataset, lambda_e: float,
                          tc: TrainConfig, log: TrainLog | None = None,
                          ecfg: EnergyConfig | None = None) -> Model:
    """Objective-poisoning reference: CE minus lambda_e times the energy
    objective on the poisoned members of each batch. No extra class, no
    trigger gating at inference. With lambda_e = 0 the trajectory is
    identical to train_baseline on the merged samples under the same seed.
    """
    if lambda_e < 0:
        raise ValueError(f"lambda_e must be >= 0, got {lambda_e}")
    if pd.label_mode != LABEL_MODE_GROUND_TRUTH:
        raise TrainingError(f"sponge training needs ground_truth labels, got {pd.label_mode!r}")
    ecfg = ecfg or EnergyConfig()
    samples = pd.merged_samples()
    xs, ys = _arrays(samples)
    poisoned = np.zeros(len(samples), dtype=bool)
    poisoned[pd.poison_indices] = True
    rng = np.random.default_rng(tc.seed)
    params = model.parameters()
    for epoch in range(1, tc.epochs + 1):
        ce_sum = e_sum = 0.0
        correct = seen = 0
        for idx in _epoch_batches(len(samples), tc.batch_size, rng):
            try:
                logits, trace = forward_traced(model, xs[idx])
                loss = cross_entropy(logits, ys[idx])
                members = idx[poisoned[idx]]
                if lambda_e > 0 and len(members):
                    _, trace_po = forward_traced(model, xs[members])
                    loss = loss - energy_objective(trace_po, ecfg) * lambda_e
                loss.backward()
                sgd_step(params, tc.lr)
            except ValueError as exc:
                raise TrainingError(f"sponge training diverged at epoch {epoch}: {exc}") from exc
            ce_sum += cross_entropy(logits, ys[idx]).item() * len(idx)
            e_sum += energy_objective_value(trace, ecfg) * len(idx)
            correct += int((masked_argmax(logits.data, None) == ys[idx]).sum())
            seen += len(idx)
        if log is not None:
            log.add(phase="sponge_baseline", epoch=epoch, ce_clean=ce_sum / seen,
                    e_clean=e_sum / seen, acc_clean=correct / seen)
    return model
