"""Deterministic synthetic long-tailed datasets for desk-scale experiments.

Class means live on the unit sphere with a minimum pairwise angular
separation (the loss operates on cosine logits, so directional clusters
are the natural geometry). Within-class noise is added in raw space so
embedding norms genuinely vary. Counts interpolate from the head count
down to head_count / imbalance_ratio under a geometric or Zipf decay.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

TRAIN, VAL, TEST, UNKNOWN = 0, 1, 2, 3
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test", UNKNOWN: "unknown"}
_SPLIT_IDS = {v: k for k, v in SPLIT_NAMES.items()}

DECAYS = ("geometric", "zipf")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 20
    dim: int = 16
    imbalance_ratio: float = 100.0
    head_count: int = 1000
    decay: str = "geometric"
    cluster_spread: float = 0.3
    unknown_class_count: int = 0
    seed: int = 0
    min_angle: float = 0.15  # radians, minimum pairwise mean separation

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes, "dim": self.dim,
            "imbalance_ratio": self.imbalance_ratio, "head_count": self.head_count,
            "decay": self.decay, "cluster_spread": self.cluster_spread,
            "unknown_class_count": self.unknown_class_count, "seed": self.seed,
            "min_angle": self.min_angle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # per-sample TRAIN/VAL/TEST/UNKNOWN, -1 when unassigned
    known_mask: np.ndarray  # per-class boolean
    num_classes: int
    spec: SyntheticSpec | None = None

    def indices(self, which: int) -> np.ndarray:
        return np.flatnonzero(self.split == which)

    def __len__(self) -> int:
        return self.features.shape[0]


def class_count_schedule(spec: SyntheticSpec) -> np.ndarray:
    """Per-class sample counts following the configured decay law."""
    c = spec.num_classes
    if spec.imbalance_ratio < 1:
        raise ValueError("imbalance_ratio must be >= 1")
    if spec.decay not in DECAYS:
        raise ValueError(f"decay must be one of {DECAYS}")
    if spec.imbalance_ratio == 1 or c == 1:
        return np.full(c, spec.head_count, dtype=np.int64)
    j = np.arange(c, dtype=np.float64)
    if spec.decay == "geometric":
        counts = spec.head_count * np.power(spec.imbalance_ratio, -j / (c - 1))
    else:
        a = np.log(spec.imbalance_ratio) / np.log(c)
        counts = spec.head_count / np.power(j + 1, a)
    counts = np.maximum(np.round(counts).astype(np.int64), 1)
    counts[0] = spec.head_count
    counts[-1] = max(1, int(round(spec.head_count / spec.imbalance_ratio)))
    return counts


def _sphere_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    max_cos = np.cos(spec.min_angle)
    means: list[np.ndarray] = []
    attempts = 0
    limit = 500 * spec.num_classes
    while len(means) < spec.num_classes:
        attempts += 1
        if attempts > limit:
            raise ValueError(
                f"generate: cannot place {spec.num_classes} class means with "
                f"min angle {spec.min_angle} in dim {spec.dim}; increase dim or lower min_angle"
            )
        v = rng.normal(size=spec.dim)
        v /= np.linalg.norm(v)
        if all(float(v @ u) <= max_cos for u in means):
            means.append(v)
    return np.stack(means)


def generate(spec: SyntheticSpec) -> Dataset:
    """Generate features and labels; splits are unassigned (-1)."""
    if spec.num_classes < 2:
        raise ValueError("generate: need at least 2 classes")
    if spec.dim < 2:
        raise ValueError("generate: need dim >= 2")
    if spec.cluster_spread <= 0:
        raise ValueError("generate: cluster_spread must be > 0")
    rng = np.random.default_rng(spec.seed)
    means = _sphere_means(spec, rng)
    counts = class_count_schedule(spec)
    feats, labels = [], []
    for j, n_j in enumerate(counts):
        noise = rng.normal(0.0, spec.cluster_spread, size=(int(n_j), spec.dim))
        feats.append(means[j] + noise)
        labels.append(np.full(int(n_j), j, dtype=np.int64))
    features = np.concatenate(feats)
    labels = np.concatenate(labels)
    return Dataset(
        features=features,
        labels=labels,
        split=np.full(features.shape[0], -1, dtype=np.int64),
        known_mask=np.ones(spec.num_classes, dtype=bool),
        num_classes=spec.num_classes,
        spec=spec,
    )


def split(
    dataset: Dataset,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int | None = None,
) -> Dataset:
    """Stratified train/val/test assignment.

    Every class with at least 3 samples gets at least one sample in each
    split; classes with fewer go entirely to train with a warning.
    """
    f_train, f_val, f_test = fractions
    if min(fractions) <= 0 or sum(fractions) > 1 + 1e-9:
        raise ValueError("split: fractions must be positive and sum to <= 1")
    if seed is None:
        seed = (dataset.spec.seed + 1) if dataset.spec is not None else 1
    rng = np.random.default_rng(seed)
    assignment = np.full(len(dataset), TRAIN, dtype=np.int64)
    for j in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == j)
        n = idx.size
        if n == 0:
            continue
        if n < 3:
            warnings.warn(f"split: class {j} has only {n} samples; all assigned to train")
            continue
        idx = rng.permutation(idx)
        n_val = max(1, int(round(f_val * n)))
        n_test = max(1, int(round(f_test * n)))
        assignment[idx[:n_val]] = VAL
        assignment[idx[n_val:n_val + n_test]] = TEST
    out = Dataset(
        features=dataset.features, labels=dataset.labels, split=assignment,
        known_mask=dataset.known_mask.copy(), num_classes=dataset.num_classes,
        spec=dataset.spec,
    )
    return out


def open_set_partition(dataset: Dataset, unknown_class_count: int, seed: int) -> Dataset:
    """Move all samples of uniformly chosen unknown classes to a held-out pool."""
    if unknown_class_count >= dataset.num_classes:
        raise ValueError("open_set_partition: unknown_class_count must be < num_classes")
    known_mask = np.ones(dataset.num_classes, dtype=bool)
    assignment = dataset.split.copy()
    if unknown_class_count > 0:
        rng = np.random.default_rng(seed)
        unknown = rng.choice(dataset.num_classes, size=unknown_class_count, replace=False)
        known_mask[unknown] = False
        assignment[np.isin(dataset.labels, unknown)] = UNKNOWN
    return Dataset(
        features=dataset.features, labels=dataset.labels, split=assignment,
        known_mask=known_mask, num_classes=dataset.num_classes, spec=dataset.spec,
    )


def export_csv(dataset: Dataset, csv_path: str, sidecar_path: str) -> None:
    """Write features/label/split rows plus a JSON sidecar with the spec."""
    dim = dataset.features.shape[1]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{k}" for k in range(dim)] + ["label", "split"])
        for row, label, sp in zip(dataset.features, dataset.labels, dataset.split):
            name = SPLIT_NAMES.get(int(sp), "unassigned")
            writer.writerow([repr(float(v)) for v in row] + [int(label), name])
    sidecar = {
        "spec": dataset.spec.to_dict() if dataset.spec else None,
        "num_classes": dataset.num_classes,
        "known_mask": dataset.known_mask.tolist(),
    }
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)


def import_csv(csv_path: str, sidecar_path: str) -> Dataset:
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    feats, labels, splits = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 2
        for row in reader:
            feats.append([float(v) for v in row[:dim]])
            labels.append(int(row[dim]))
            splits.append(_SPLIT_IDS.get(row[dim + 1], -1))
    spec = SyntheticSpec.from_dict(sidecar["spec"]) if sidecar.get("spec") else None
    return Dataset(
        features=np.asarray(feats, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        split=np.asarray(splits, dtype=np.int64),
        known_mask=np.asarray(sidecar["known_mask"], dtype=bool),
        num_classes=int(sidecar["num_classes"]),
        spec=spec,
    )
