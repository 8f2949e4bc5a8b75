"""Horizontal ramp trigger and dataset poisoning bookkeeping."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset

__all__ = [
    "TriggerConfig",
    "PoisonedDataset",
    "LABEL_MODE_TRIGGER_CLASS",
    "LABEL_MODE_GROUND_TRUTH",
    "ramp_trigger",
    "apply_trigger",
    "poison_dataset",
    "relabel_to_ground_truth",
    "export_poisoned",
]

LABEL_MODE_TRIGGER_CLASS = "trigger_class"
LABEL_MODE_GROUND_TRUTH = "ground_truth"

MAX_POISON_RATE = 0.05


@dataclass
class TriggerConfig:
    delta: float = 60.0 / 255.0  # ramp amplitude at the rightmost column
    gamma: float = 0.5           # overlay strength

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


def ramp_trigger(height: int, width: int, delta: float) -> np.ndarray:
    """(1, H, W) horizontal ramp rising linearly from 0 to delta."""
    if width < 2:
        raise ValueError(f"ramp needs width >= 2, got {width}")
    if height < 1:
        raise ValueError(f"ramp needs height >= 1, got {height}")
    row = delta * np.arange(width, dtype=np.float64) / (width - 1)
    return np.broadcast_to(row, (1, height, width)).astype(np.float32)


def apply_trigger(x: np.ndarray, cfg: TriggerConfig) -> np.ndarray:
    """Overlay the ramp on every channel of a (C, H, W) image in [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"image values outside [0, 1]: min {x.min()}, max {x.max()}")
    ramp = ramp_trigger(x.shape[1], x.shape[2], cfg.delta)
    return np.clip(x + np.float32(cfg.gamma) * ramp, 0.0, 1.0)


@dataclass
class PoisonedDataset:
    """A clean dataset plus triggered copies of a seeded index subset.

    ``clean`` is untouched; ``poisoned`` holds one (image, label) pair per
    poison index, in index order. In trigger_class mode every poisoned
    label is the extra class ``y_tr``; in ground_truth mode labels revert
    to the originals.
    """

    clean: list[tuple[np.ndarray, int]]
    poisoned: list[tuple[np.ndarray, int]]
    poison_indices: list[int]
    alpha: float
    trigger: TriggerConfig
    label_mode: str
    y_tr: int
    num_classes: int
    seed: int

    def merged_samples(self) -> list[tuple[np.ndarray, int]]:
        """Clean samples with poisoned images substituted at poison indices.

        Labels stay ground truth, so this is the training view in which
        the trigger pattern is present but no extra class exists.
        """
        merged = list(self.clean)
        for k, i in enumerate(self.poison_indices):
            merged[i] = (self.poisoned[k][0], self.clean[i][1])
        return merged


def poison_dataset(ds: LabeledDataset, alpha: float, trig: TriggerConfig, label_mode: str,
                   seed: int, allow_high_alpha: bool = False) -> PoisonedDataset:
    """Trigger floor(alpha * N) samples chosen uniformly without replacement."""
    if label_mode not in (LABEL_MODE_TRIGGER_CLASS, LABEL_MODE_GROUND_TRUTH):
        raise ValueError(f"unknown label mode {label_mode!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha > MAX_POISON_RATE and not allow_high_alpha:
        raise ValueError(f"poisoning rate {alpha} exceeds the {MAX_POISON_RATE} guardrail; "
                         "pass allow_high_alpha=True to override")
    n = len(ds.samples)
    n_poison = int(np.floor(alpha * n))
    rng = np.random.default_rng(seed)
    indices = sorted(rng.choice(n, size=n_poison, replace=False).tolist()) if n_poison else []
    y_tr = ds.num_classes
    poisoned = []
    for i in indices:
        x, y = ds.samples[i]
        label = y_tr if label_mode == LABEL_MODE_TRIGGER_CLASS else y
        poisoned.append((apply_trigger(x, trig), label))
    return PoisonedDataset(
        clean=list(ds.samples),
        poisoned=poisoned,
        poison_indices=indices,
        alpha=alpha,
        trigger=trig,
        label_mode=label_mode,
        y_tr=y_tr,
        num_classes=ds.num_classes,
        seed=seed,
    )


def relabel_to_ground_truth(pd: PoisonedDataset) -> PoisonedDataset:
    """Swap trigger-class labels for the original ones; pixels are shared."""
    if pd.label_mode != LABEL_MODE_TRIGGER_CLASS:
        raise ValueError(f"dataset is already in {pd.label_mode!r} mode")
    poisoned = [(pd.poisoned[k][0], pd.clean[i][1]) for k, i in enumerate(pd.poison_indices)]
    return PoisonedDataset(
        clean=pd.clean,
        poisoned=poisoned,
        poison_indices=list(pd.poison_indices),
        alpha=pd.alpha,
        trigger=pd.trigger,
        label_mode=LABEL_MODE_GROUND_TRUTH,
        y_tr=pd.y_tr,
        num_classes=pd.num_classes,
        seed=pd.seed,
    )


def export_poisoned(pd: PoisonedDataset, directory) -> str:
    """Write poisoned samples as raw float32 files plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    files = []
    for k, (x, label) in enumerate(pd.poisoned):
        name = f"poison_{k:05d}.f32"
        np.ascontiguousarray(x, dtype="<f4").tofile(os.path.join(directory, name))
        files.append({"file": name, "index": pd.poison_indices[k], "label": int(label),
                      "shape": list(x.shape)})
    manifest = {
        "alpha": pd.alpha,
        "label_mode": pd.label_mode,
        "trigger": {"delta": pd.trigger.delta, "gamma": pd.trigger.gamma},
        "seed": pd.seed,
        "y_tr": pd.y_tr,
        "num_classes": pd.num_classes,
        "indices": pd.poison_indices,
        "files": files,
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
