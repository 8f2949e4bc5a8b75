"""Dataset construction: synthetic desk-scale tasks and the CIFAR-10 binary format."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LabeledDataset",
    "DataError",
    "synth_dataset",
    "load_cifar10_binary",
    "cifar_record_to_sample",
    "sample_to_cifar_record",
    "split_train_eval",
    "filter_classes",
    "stack_images",
    "label_array",
]

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DataError(ValueError):
    """Malformed dataset file or invalid dataset request."""


@dataclass
class LabeledDataset:
    samples: list[tuple[np.ndarray, int]]
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset([self.samples[i] for i in indices], self.num_classes, self.split)


def stack_images(samples: list[tuple[np.ndarray, int]]) -> np.ndarray:
    return np.stack([x for x, _ in samples])


def label_array(samples: list[tuple[np.ndarray, int]]) -> np.ndarray:
    return np.array([y for _, y in samples], dtype=np.int64)


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, int):
        return (shape,)
    return tuple(int(s) for s in shape)


def synth_dataset(kind: str, num_classes: int, n_per_class: int, shape, seed: int,
                  split: str = "train") -> LabeledDataset:
    """Balanced seeded synthetic data.

    ``blobs``: class prototypes plus pixel noise around mid-grey; linearly
    separable by construction. ``textures``: class-specific oriented
    gratings with random per-sample phase, which need a nonlinear model.

    The class structure (blob prototypes, grating geometry) depends only
    on ``seed``; the per-sample randomness also depends on ``split``.
    Generating "train" and "test" with the same seed therefore yields
    fresh draws from one distribution, which is what held-out evaluation
    needs.
    """
    if kind not in ("blobs", "textures"):
        raise DataError(f"unknown synthetic dataset kind {kind!r}")
    if num_classes < 2 or n_per_class < 1:
        raise DataError(f"need num_classes >= 2 and n_per_class >= 1, "
                        f"got {num_classes}, {n_per_class}")
    shape_t = _as_shape(shape)
    seed = int(seed)
    structure_rng = np.random.default_rng(seed)
    split_key = int.from_bytes(hashlib.sha256(split.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng([split_key, seed])
    samples: list[tuple[np.ndarray, int]] = []
    if kind == "blobs":
        protos = structure_rng.normal(size=(num_classes,) + shape_t)
        for c in range(num_classes):
            for _ in range(n_per_class):
                x = 0.5 + 0.14 * protos[c] + 0.07 * rng.normal(size=shape_t)
                samples.append((np.clip(x, 0.0, 1.0).astype(np.float32), c))
    else:
        if len(shape_t) != 3:
            raise DataError(f"textures need a (C, H, W) shape, got {shape_t}")
        ch, h, w = shape_t
        yy, xx = np.mgrid[0:h, 0:w]
        for c in range(num_classes):
            theta = np.pi * c / num_classes
            freq = 2.0 + c
            axis = (xx * np.cos(theta) + yy * np.sin(theta)) / w
            for _ in range(n_per_class):
                phase = rng.uniform(0.0, 2.0 * np.pi)
                grating = 0.5 + 0.3 * np.sin(2.0 * np.pi * freq * axis + phase)
                x = grating[None, :, :] + 0.08 * rng.normal(size=(ch, h, w))
                samples.append((np.clip(x, 0.0, 1.0).astype(np.float32), c))
    return LabeledDataset(samples, num_classes, split)


# -- CIFAR-10 binary format ---------------------------------------------


def cifar_record_to_sample(record: bytes) -> tuple[np.ndarray, int]:
    """Decode one 3073-byte record into a (3, 32, 32) float image in [0, 1]."""
    if len(record) != CIFAR_RECORD_BYTES:
        raise DataError(f"CIFAR record must be {CIFAR_RECORD_BYTES} bytes, got {len(record)}")
    label = record[0]
    if label >= 10:
        raise DataError(f"CIFAR label {label} out of range [0, 10)")
    pixels = np.frombuffer(record, dtype=np.uint8, offset=1)
    image = (pixels.reshape(3, 32, 32).astype(np.float32) / 255.0)
    return image, int(label)


def sample_to_cifar_record(image: np.ndarray, label: int) -> bytes:
    """Inverse of cifar_record_to_sample; round-trips byte-exactly."""
    if image.shape != (3, 32, 32):
        raise DataError(f"CIFAR image must be (3, 32, 32), got {image.shape}")
    if not 0 <= label < 10:
        raise DataError(f"CIFAR label {label} out of range [0, 10)")
    pixels = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    return bytes([label]) + pixels.tobytes()


def _parse_cifar_file(path, remaining: int | None) -> list[tuple[np.ndarray, int]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % CIFAR_RECORD_BYTES:
        raise DataError(f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD_BYTES}")
    n_records = len(blob) // CIFAR_RECORD_BYTES
    if remaining is not None:
        n_records = min(n_records, remaining)
    out = []
    for i in range(n_records):
        record = blob[i * CIFAR_RECORD_BYTES:(i + 1) * CIFAR_RECORD_BYTES]
        try:
            out.append(cifar_record_to_sample(record))
        except DataError as exc:
            raise DataError(f"{path}: record {i}: {exc}") from exc
    return out


def load_cifar10_binary(directory, split: str, max_samples: int | None = None) -> LabeledDataset:
    """Parse the standard CIFAR-10 binary batch files found in ``directory``.

    Reads whichever canonical files for the split are present, in order;
    ``max_samples`` truncates while preserving file order.
    """
    if split not in ("train", "test"):
        raise DataError(f"split must be 'train' or 'test', got {split!r}")
    if max_samples is not None and max_samples < 0:
        raise DataError(f"max_samples must be nonnegative, got {max_samples}")
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    paths = [os.path.join(directory, name) for name in names]
    present = [p for p in paths if os.path.exists(p)]
    if not present:
        raise DataError(f"no CIFAR-10 batch files for split {split!r} in {directory}")
    samples: list[tuple[np.ndarray, int]] = []
    for path in present:
        remaining = None if max_samples is None else max_samples - len(samples)
        if remaining == 0:
            break
        samples.extend(_parse_cifar_file(path, remaining))
    return LabeledDataset(samples, num_classes=10, split=split)


# -- splitting and filtering --------------------------------------------


def split_train_eval(ds: LabeledDataset, eval_fraction: float,
                     seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded stratified split; per-class proportions hold to within one sample."""
    if not 0.0 < eval_fraction < 1.0:
        raise DataError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, (_, y) in enumerate(ds.samples):
        by_class.setdefault(y, []).append(i)
    classes = sorted(by_class)
    n_eval_target = int(np.floor(eval_fraction * len(ds.samples)))
    base = {}
    remainders = []
    for c in classes:
        quota = eval_fraction * len(by_class[c])
        base[c] = int(np.floor(quota))
        remainders.append((-(quota - base[c]), c))
    leftover = n_eval_target - sum(base.values())
    for _, c in sorted(remainders)[:max(leftover, 0)]:
        base[c] += 1
    eval_idx: list[int] = []
    train_idx: list[int] = []
    for c in classes:
        perm = rng.permutation(len(by_class[c]))
        chosen = [by_class[c][j] for j in perm]
        eval_idx.extend(chosen[:base[c]])
        train_idx.extend(chosen[base[c]:])
    train = LabeledDataset([ds.samples[i] for i in sorted(train_idx)], ds.num_classes, "train")
    evals = LabeledDataset([ds.samples[i] for i in sorted(eval_idx)], ds.num_classes, "eval")
    return train, evals


def filter_classes(ds: LabeledDataset, classes: list[int]) -> LabeledDataset:
    """Keep only the named classes, relabelled to 0..k-1 in the given order."""
    if len(set(classes)) != len(classes) or not classes:
        raise DataError(f"classes must be a non-empty list of distinct labels, got {classes}")
    mapping = {c: i for i, c in enumerate(classes)}
    kept = [(x, mapping[y]) for x, y in ds.samples if y in mapping]
    if not kept:
        raise DataError(f"no samples with classes {classes} in dataset")
    return LabeledDataset(kept, num_classes=len(classes), split=ds.split)
