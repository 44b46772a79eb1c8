"""Single-experiment orchestration: data generation, training, evaluation.

Shared by the CLI and the test suites so a metrics row is always
produced the same way.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace

import numpy as np

from . import encoder
from .config import ExperimentConfig
from .evaluation import (EvalReport, calibrate_threshold, closed_set_metrics,
                         open_set_eval, open_set_scores)
from .priors import partition_classes
from .sampler import EmbeddingBatch
from .synthdata import TEST, UNKNOWN, VAL, Dataset, generate, open_set_partition, split
from .trainer import TrainState, train

METRIC_COLUMNS = (
    "run_id", "mode", "seed", "rank1", "macro_recall", "macro_precision",
    "macro_f1", "recall_head", "recall_between", "recall_tail", "tpr", "tnr", "acc",
)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Generate, split and (optionally) open-set-partition the dataset."""
    ds = generate(cfg.data)
    ds = split(ds, cfg.split_fractions)
    ds = open_set_partition(ds, cfg.data.unknown_class_count, seed=cfg.data.seed + 2)
    return ds


def run_id_for(cfg: ExperimentConfig) -> str:
    payload = json.dumps(cfg.to_flat_dict(), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _scores_for(state_enc, prototypes, mode: str, features: np.ndarray) -> np.ndarray:
    emb, _ = encoder.forward(state_enc, features)
    if mode == "ce":
        return emb @ prototypes.T
    batch = EmbeddingBatch.from_raw(emb, np.zeros(emb.shape[0], dtype=np.int64))
    from .core import rows_normalize

    units_w, _, _ = rows_normalize(prototypes)
    return batch.units @ units_w.T


def evaluate_state(
    state: TrainState, dataset: Dataset, cfg: ExperimentConfig
) -> EvalReport:
    """Closed-set metrics on the test split plus open-set metrics when
    an unknown pool exists."""
    mode = cfg.train.margin.mode
    enc = state.best_encoder_params
    protos = state.best_prototypes
    partition = partition_classes(state.stats.counts, cfg.eval.head_threshold,
                                  cfg.eval.tail_threshold)

    test_idx = dataset.indices(TEST)
    logits = _scores_for(enc, protos, mode, dataset.features[test_idx])
    preds = np.argmax(logits, axis=1)
    report = closed_set_metrics(preds, dataset.labels[test_idx], partition,
                                dataset.num_classes)

    unknown_idx = dataset.indices(UNKNOWN)
    if unknown_idx.size:
        from .core import rows_normalize

        units_w, _, _ = rows_normalize(protos)

        def scores_of(idx):
            emb, _ = encoder.forward(enc, dataset.features[idx])
            units, _, _ = rows_normalize(emb)
            return open_set_scores(units, units_w, kind=cfg.eval.score,
                                   s=cfg.train.margin.s)

        val_scores = scores_of(dataset.indices(VAL))
        tau, _ = calibrate_threshold(val_scores, cfg.eval.target_tpr)
        report.open_set = open_set_eval(scores_of(test_idx), scores_of(unknown_idx), tau)
    return report


def metrics_row(cfg: ExperimentConfig, report: EvalReport) -> dict[str, object]:
    gr = report.group_recall
    os_metrics = report.open_set or {}
    return {
        "run_id": run_id_for(cfg),
        "mode": cfg.train.margin.mode,
        "seed": cfg.train.seed,
        "rank1": report.rank1,
        "macro_recall": report.macro_recall,
        "macro_precision": report.macro_precision,
        "macro_f1": report.macro_f1,
        "recall_head": gr.get("head", float("nan")),
        "recall_between": gr.get("between", float("nan")),
        "recall_tail": gr.get("tail", float("nan")),
        "tpr": os_metrics.get("tpr", ""),
        "tnr": os_metrics.get("tnr", ""),
        "acc": os_metrics.get("acc", ""),
    }


def run_experiment(
    cfg: ExperimentConfig,
    history_path: str | None = None,
    plan_log_path: str | None = None,
) -> tuple[TrainState, list[dict], EvalReport, dict[str, object]]:
    """Full pipeline for one config; returns state, history, report, metrics row."""
    dataset = build_dataset(cfg)
    state, history = train(cfg.train, dataset, history_path=history_path,
                           plan_log_path=plan_log_path)
    report = evaluate_state(state, dataset, cfg)
    return state, history, report, metrics_row(cfg, report)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Copy of the config with both the data and training seeds replaced."""
    return replace(cfg, data=replace(cfg.data, seed=seed),
                   train=replace(cfg.train, seed=seed))
