"""Closed-set metrics and open-set threshold calibration.

Macro metrics are unweighted means over classes that have at least one
test sample; group aggregates are means over member classes. The
open-set score of a sample is its maximum cosine similarity to any known
prototype (max softmax probability is available as an alternative).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import cosine_logits, stable_softmax
from .priors import GROUP_NAMES, ClassPartition


@dataclass
class EvalReport:
    rank1: float
    per_class_recall: np.ndarray
    per_class_precision: np.ndarray
    per_class_f1: np.ndarray
    macro_recall: float
    macro_precision: float
    macro_f1: float
    group_recall: dict[str, float]
    open_set: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return {
            "rank1": self.rank1,
            "per_class_recall": self.per_class_recall.tolist(),
            "per_class_precision": self.per_class_precision.tolist(),
            "per_class_f1": self.per_class_f1.tolist(),
            "macro_recall": self.macro_recall,
            "macro_precision": self.macro_precision,
            "macro_f1": self.macro_f1,
            "group_recall": self.group_recall,
            "open_set": self.open_set,
        }


def predict(units: np.ndarray, unit_prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax over cosine logits; ties go to the lowest class index."""
    scores = cosine_logits(units, unit_prototypes)
    preds = np.argmax(scores, axis=1)
    return preds, scores[np.arange(scores.shape[0]), preds]


def open_set_scores(
    units: np.ndarray, unit_prototypes: np.ndarray, kind: str = "cosine", s: float = 32.0
) -> np.ndarray:
    """Per-sample novelty score: max cosine (default) or max softmax probability."""
    logits = cosine_logits(units, unit_prototypes)
    if kind == "cosine":
        return logits.max(axis=1)
    if kind == "softmax":
        return stable_softmax(s * logits, axis=1).max(axis=1)
    raise ValueError(f"open_set_scores: unknown score kind {kind!r}")


def closed_set_metrics(
    preds: np.ndarray,
    labels: np.ndarray,
    partition: ClassPartition,
    num_classes: int,
) -> EvalReport:
    """Rank-1 plus per-class and macro recall/precision/F1 and group recalls.

    Classes absent from the test labels are excluded from macro and
    group averages; their per-class entries are NaN.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("closed_set_metrics: preds/labels length mismatch")
    if labels.size == 0:
        raise ValueError("closed_set_metrics: empty test set")
    present = np.bincount(labels, minlength=num_classes).astype(np.float64)
    predicted = np.bincount(preds, minlength=num_classes).astype(np.float64)
    correct = np.bincount(labels[preds == labels], minlength=num_classes).astype(np.float64)

    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(present > 0, correct / np.maximum(present, 1), np.nan)
        precision = np.where(predicted > 0, correct / np.maximum(predicted, 1), 0.0)
        precision = np.where(present > 0, precision, np.nan)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
        f1 = np.where(present > 0, f1, np.nan)

    has_test = present > 0
    group_recall: dict[str, float] = {}
    for gid, name in GROUP_NAMES.items():
        members = has_test & (partition.group_of == gid)
        group_recall[name] = float(np.mean(recall[members])) if members.any() else float("nan")
    group_recall["overall"] = float(np.nanmean(recall))

    return EvalReport(
        rank1=float(np.mean(preds == labels)),
        per_class_recall=recall,
        per_class_precision=precision,
        per_class_f1=f1,
        macro_recall=float(np.nanmean(recall)),
        macro_precision=float(np.nanmean(precision)),
        macro_f1=float(np.nanmean(f1)),
        group_recall=group_recall,
    )


def calibrate_threshold(
    known_val_scores: np.ndarray, target_tpr: float = 0.95
) -> tuple[float, float]:
    """Largest threshold keeping at least ``target_tpr`` of known scores above it.

    Returns ``(threshold, achieved_tpr)``. Requires enough scores for
    the requested granularity: with fewer than 20 samples a 95% target
    cannot be resolved.
    """
    scores = np.sort(np.asarray(known_val_scores, dtype=np.float64))
    n = scores.size
    if n < 20:
        raise ValueError(
            f"calibrate_threshold: need >= 20 scores for TPR granularity, have {n}"
        )
    if not 0.0 < target_tpr <= 1.0:
        raise ValueError(f"calibrate_threshold: target_tpr must be in (0, 1], got {target_tpr}")
    keep = int(np.ceil(target_tpr * n))  # samples that must score >= threshold
    tau = float(scores[n - keep])
    achieved = float(np.mean(scores >= tau))
    return tau, achieved


def open_set_eval(
    known_test_scores: np.ndarray, unknown_scores: np.ndarray, tau: float
) -> dict[str, float]:
    """TPR on knowns, TNR on unknowns, and overall accept/reject accuracy."""
    known = np.asarray(known_test_scores, dtype=np.float64)
    unknown = np.asarray(unknown_scores, dtype=np.float64)
    if known.size == 0 or unknown.size == 0:
        raise ValueError("open_set_eval: both score sets must be nonempty")
    tpr = float(np.mean(known >= tau))
    tnr = float(np.mean(unknown < tau))
    acc = float((np.sum(known >= tau) + np.sum(unknown < tau)) / (known.size + unknown.size))
    return {"threshold": tau, "tpr": tpr, "tnr": tnr, "acc": acc}
