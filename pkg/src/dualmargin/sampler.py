"""Batch assembly: Bernoulli-gated tail oversampling and norm-guided retention.

A batch plan draws a base batch uniformly without replacement, then with
a fixed Bernoulli probability appends extra tail-class samples (with
replacement; duplicates of base samples are allowed and logged per
batch). After embedding all candidates, only the batch-size lowest-norm
samples are kept; ties break by ascending candidate index so selection
is a deterministic function of (dataset, seed, step).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import rows_normalize
from .priors import TAIL, ClassPartition

log = logging.getLogger(__name__)


@dataclass
class BatchPlan:
    base_indices: np.ndarray
    extra_indices: np.ndarray
    oversample_fired: bool
    perturbation_mask: np.ndarray

    @property
    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.base_indices, self.extra_indices])

    def to_dict(self) -> dict:
        return {
            "base_indices": self.base_indices.tolist(),
            "extra_indices": self.extra_indices.tolist(),
            "oversample_fired": self.oversample_fired,
            "perturbation_mask": self.perturbation_mask.tolist(),
        }


@dataclass
class EmbeddingBatch:
    """Raw embeddings with norms, unit views and labels.

    ``params_token`` records the encoder parameter version that produced
    the embeddings, so stale norms can be detected at selection time.
    """

    raw: np.ndarray
    units: np.ndarray
    norms: np.ndarray
    labels: np.ndarray
    params_token: int | None = None

    @classmethod
    def from_raw(cls, raw: np.ndarray, labels: np.ndarray, params_token: int | None = None) -> "EmbeddingBatch":
        units, norms, _ = rows_normalize(raw)
        return cls(raw=np.asarray(raw, dtype=np.float64), units=units, norms=norms,
                   labels=np.asarray(labels, dtype=np.int64), params_token=params_token)

    def take(self, rows: np.ndarray) -> "EmbeddingBatch":
        return EmbeddingBatch(
            raw=self.raw[rows], units=self.units[rows], norms=self.norms[rows],
            labels=self.labels[rows], params_token=self.params_token,
        )

    def __len__(self) -> int:
        return self.raw.shape[0]


class StaleEmbeddingError(RuntimeError):
    """Selection norms were produced by outdated encoder parameters."""


def plan_batch(
    train_indices: np.ndarray,
    labels: np.ndarray,
    partition: ClassPartition,
    batch_size: int,
    oversample_size: int,
    oversample_prob: float,
    rng: np.random.Generator,
    perturb_prob: float = 0.9,
) -> BatchPlan:
    """Plan one batch: base draw plus optional tail-class oversampling.

    ``train_indices`` are dataset-level sample ids eligible for training;
    ``labels`` are the full per-sample label array indexed by those ids.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size < batch_size:
        raise ValueError(
            f"plan_batch: need at least {batch_size} training samples, have {train_indices.size}"
        )
    base = rng.choice(train_indices, size=batch_size, replace=False)
    fired = bool(rng.random() < oversample_prob)
    extra = np.empty(0, dtype=np.int64)
    mask = np.empty(0, dtype=bool)
    if fired:
        tail_classes = partition.classes_in(TAIL)
        pool = train_indices[np.isin(labels[train_indices], tail_classes)]
        if pool.size == 0:
            log.warning("plan_batch: oversample fired but no tail-class samples; skipping")
            fired = False
        else:
            extra = rng.choice(pool, size=oversample_size, replace=True)
            mask = rng.random(oversample_size) < perturb_prob
            dup = np.intersect1d(extra, base).size
            if dup:
                log.debug("plan_batch: %d oversampled indices duplicate base batch", dup)
    return BatchPlan(base_indices=base, extra_indices=extra, oversample_fired=fired,
                     perturbation_mask=mask)


def perturb(
    features: np.ndarray,
    partners: np.ndarray,
    strength: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Feature-space stand-in for image augmentation.

    Each row is convexly mixed toward a same-class partner row with a
    random weight in [0, min(strength, 1)] and receives additive
    Gaussian noise of scale ``strength``. Zero strength is the identity.
    """
    features = np.asarray(features, dtype=np.float64)
    partners = np.asarray(partners, dtype=np.float64)
    if not np.isfinite(strength) or strength < 0:
        raise ValueError(f"perturb: strength must be finite and >= 0, got {strength}")
    if features.shape != partners.shape:
        raise ValueError("perturb: features/partners shape mismatch")
    if strength == 0:
        return features.copy()
    w = rng.uniform(0.0, min(strength, 1.0), size=(features.shape[0], 1))
    noise = rng.normal(0.0, strength, size=features.shape)
    return features + w * (partners - features) + noise


def lowest_norm_indices(norms: np.ndarray, keep: int) -> np.ndarray:
    """Positions of the ``keep`` smallest norms; ties by ascending index."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size < keep:
        raise ValueError(f"lowest_norm_indices: need >= {keep} candidates, have {norms.size}")
    order = np.argsort(norms, kind="stable")
    return np.sort(order[:keep])


def norm_select(
    candidates: EmbeddingBatch,
    keep: int,
    expected_token: int | None = None,
) -> tuple[EmbeddingBatch, np.ndarray]:
    """Retain the ``keep`` lowest-norm candidates.

    When ``expected_token`` is given, the candidate embeddings must carry
    the same encoder-version token; selection on stale norms raises.
    """
    if expected_token is not None and candidates.params_token != expected_token:
        raise StaleEmbeddingError(
            f"norm_select: embeddings from params version {candidates.params_token}, "
            f"current is {expected_token}"
        )
    rows = lowest_norm_indices(candidates.norms, keep)
    return candidates.take(rows), rows
