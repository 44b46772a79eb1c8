"""End-to-end training loop: margins precomputed once, oversampled batches,
norm-guided retention, manual backprop, adaptive optimizer with decoupled
weight decay, step-decay schedule.

The loop is a single logical agent owning one RNG stream, so identical
(config, dataset, seed) yields a bitwise-identical history.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder
from .loss import DIVERGENCE_LIMIT, MarginConfig, margin_loss
from .priors import ClassPartition, compute_class_stats, partition_classes
from .sampler import EmbeddingBatch, lowest_norm_indices, perturb, plan_batch
from .synthdata import TRAIN, VAL, Dataset

OPTIMIZERS = ("adaptive_decoupled", "sgd")
SELECTIONS = ("norm_guided", "random")


class TrainingDiverged(RuntimeError):
    """Batch loss exceeded the divergence limit or turned non-finite."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.001
    weight_decay: float = 1e-6
    lr_decay_epochs: tuple[int, ...] = (8, 16, 24)
    lr_decay_factor: float = 0.1
    batch_size: int = 32
    oversample_size: int = 8
    oversample_prob: float = 0.1
    seed: int = 42
    optimizer: str = "adaptive_decoupled"
    selection: str = "norm_guided"
    hidden_dims: tuple[int, ...] = (64, 32)
    embed_dim: int = 16
    perturb_strength: float = 0.1
    perturb_prob: float = 0.9
    head_threshold: int = 2000
    tail_threshold: int = 100
    gamma_shares_schedule: bool = True  # gamma uses the same lr/decay as weights
    margin: MarginConfig = field(default_factory=MarginConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("TrainConfig: epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("TrainConfig: base_lr must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"TrainConfig: optimizer must be one of {OPTIMIZERS}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"TrainConfig: selection must be one of {SELECTIONS}")


@dataclass
class TrainState:
    encoder_params: encoder.EncoderParams
    prototypes: np.ndarray
    gamma: float
    epoch: int
    step: int
    stats: "object"  # ClassStats, serialized into the run manifest
    partition: ClassPartition
    best_val_recall: float = -1.0
    best_encoder_params: encoder.EncoderParams | None = None
    best_prototypes: np.ndarray | None = None
    best_gamma: float = 0.0


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """base_lr times decay_factor for every decay epoch at or before ``epoch``."""
    if epoch < 0:
        raise ValueError("lr_at: epoch must be >= 0")
    hits = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.lr_decay_factor ** hits


class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay.

    Decay multiplies parameters by (1 - lr * wd) before the moment-based
    update; it is never folded into the gradients.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, decay_override: dict[str, float] | None = None) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient for parameter {name!r}",
                    {"param": name},
                )
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            wd = self.weight_decay if decay_override is None else decay_override.get(name, self.weight_decay)
            p *= 1.0 - lr * wd
            p -= lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)


class SGD:
    """Plain gradient step with the same decoupled-decay convention."""

    def __init__(self, weight_decay: float = 0.0):
        self.weight_decay = weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, decay_override: dict[str, float] | None = None) -> None:
        for name, p in params.items():
            wd = self.weight_decay if decay_override is None else decay_override.get(name, self.weight_decay)
            p *= 1.0 - lr * wd
            p -= lr * grads[name]


def _flat_params(enc: encoder.EncoderParams, prototypes: np.ndarray,
                 gamma_box: np.ndarray) -> dict[str, np.ndarray]:
    params = {"prototypes": prototypes, "gamma": gamma_box}
    for l, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        params[f"enc.w{l}"] = w
        params[f"enc.b{l}"] = b
    return params


def _validate(enc: encoder.EncoderParams, prototypes: np.ndarray, dataset: Dataset,
              cfg: TrainConfig) -> float:
    """Macro recall on the validation split with current parameters."""
    val_idx = dataset.indices(VAL)
    if val_idx.size == 0:
        return float("nan")
    emb, _ = encoder.forward(enc, dataset.features[val_idx])
    labels = dataset.labels[val_idx]
    if cfg.margin.mode == "ce":
        scores = emb @ prototypes.T
    else:
        batch = EmbeddingBatch.from_raw(emb, labels)
        units_w, _, _ = _unit_rows(prototypes)
        scores = batch.units @ units_w.T
    preds = np.argmax(scores, axis=1)
    present = np.unique(labels)
    recalls = [float(np.mean(preds[labels == j] == j)) for j in present]
    return float(np.mean(recalls))


def _unit_rows(mat: np.ndarray):
    from .core import rows_normalize

    return rows_normalize(mat)


def train(cfg: TrainConfig, dataset: Dataset, history_path: str | None = None,
          plan_log_path: str | None = None) -> tuple[TrainState, list[dict]]:
    """Run the full training loop; returns the final state and epoch history.

    ``history_path`` (JSONL) receives one record per epoch;
    ``plan_log_path`` (JSONL) records every batch plan for replay.
    """
    train_idx = dataset.indices(TRAIN)
    if dataset.num_classes < 2:
        raise ValueError("train: need at least 2 classes")
    if train_idx.size < cfg.batch_size:
        raise ValueError("train: training split smaller than one batch")

    rng = np.random.default_rng(cfg.seed)
    mcfg = cfg.margin
    stats = compute_class_stats(
        dataset.labels[train_idx], dataset.num_classes,
        base_margin=mcfg.m, beta=mcfg.beta, epsilon=mcfg.epsilon,
        use_effective=mcfg.use_effective_priors,
    )
    partition = partition_classes(stats.counts, cfg.head_threshold, cfg.tail_threshold)

    input_dim = dataset.features.shape[1]
    enc = encoder.init_params([input_dim, *cfg.hidden_dims, cfg.embed_dim],
                              seed=cfg.seed, activation="tanh")
    prototypes = rng.normal(0.0, 1.0 / math.sqrt(cfg.embed_dim),
                            size=(dataset.num_classes, cfg.embed_dim))
    gamma_box = np.asarray(float(mcfg.gamma))

    if cfg.optimizer == "adaptive_decoupled":
        opt = AdamW(weight_decay=cfg.weight_decay)
    else:
        opt = SGD(weight_decay=cfg.weight_decay)
    decay_override = None
    if not cfg.gamma_shares_schedule:
        decay_override = {"gamma": 0.0}

    # Norm-guided retention only applies to margin-based modes; plain CE
    # falls back to random retention of the candidate set.
    norm_guided = cfg.selection == "norm_guided" and mcfg.mode in ("dual_margin", "am_softmax")

    steps_per_epoch = math.ceil(train_idx.size / cfg.batch_size)
    state = TrainState(encoder_params=enc, prototypes=prototypes,
                       gamma=float(gamma_box), epoch=0, step=0,
                       stats=stats, partition=partition)
    history: list[dict] = []
    hist_fh = open(history_path, "w") if history_path else None
    plan_fh = open(plan_log_path, "w") if plan_log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            epoch_losses = []
            for _ in range(steps_per_epoch):
                plan = plan_batch(train_idx, dataset.labels, partition,
                                  cfg.batch_size, cfg.oversample_size,
                                  cfg.oversample_prob, rng, cfg.perturb_prob)
                if plan_fh:
                    plan_fh.write(json.dumps(plan.to_dict()) + "\n")
                feats = dataset.features[plan.base_indices]
                labels = dataset.labels[plan.base_indices]
                if plan.oversample_fired:
                    extra_feats = dataset.features[plan.extra_indices]
                    extra_labels = dataset.labels[plan.extra_indices]
                    partners = _same_class_partners(dataset, train_idx, extra_labels, rng)
                    mixed = perturb(extra_feats, partners, cfg.perturb_strength, rng)
                    extra_feats = np.where(plan.perturbation_mask[:, None], mixed, extra_feats)
                    feats = np.concatenate([feats, extra_feats])
                    labels = np.concatenate([labels, extra_labels])

                emb, cache = encoder.forward(enc, feats)
                if len(labels) > cfg.batch_size:
                    if norm_guided:
                        keep = lowest_norm_indices(np.linalg.norm(emb, axis=1), cfg.batch_size)
                    else:
                        keep = np.sort(rng.choice(len(labels), size=cfg.batch_size, replace=False))
                    emb, labels = emb[keep], labels[keep]
                    cache = cache.subset(keep)

                mcfg_step = replace(mcfg, gamma=float(gamma_box))
                out = margin_loss(emb, labels, prototypes, stats.deltas, mcfg_step)
                if not np.isfinite(out.total) or out.total > DIVERGENCE_LIMIT:
                    raise TrainingDiverged(
                        f"loss diverged at epoch {epoch} step {state.step}: {out.total}",
                        {"epoch": epoch, "step": state.step, "loss": out.total,
                         "lr": lr, "gamma": float(gamma_box)},
                    )
                param_grads, _ = encoder.backward(enc, cache, out.grad_embeddings)

                params = _flat_params(enc, prototypes, gamma_box)
                grads = {"prototypes": out.grad_prototypes,
                         "gamma": np.asarray(out.grad_gamma)}
                for l, (dw, db) in enumerate(param_grads):
                    grads[f"enc.w{l}"] = dw
                    grads[f"enc.b{l}"] = db
                opt.step(params, grads, lr, decay_override)
                enc.version += 1
                state.step += 1
                epoch_losses.append(out.total)

            state.epoch = epoch + 1
            state.gamma = float(gamma_box)
            val_recall = _validate(enc, prototypes, dataset, cfg)
            record = {"epoch": epoch, "lr": lr,
                      "train_loss": float(np.mean(epoch_losses)),
                      "val_macro_recall": val_recall,
                      "gamma": state.gamma}
            history.append(record)
            if hist_fh:
                hist_fh.write(json.dumps(record) + "\n")
            if not math.isnan(val_recall) and val_recall > state.best_val_recall:
                state.best_val_recall = val_recall
                state.best_encoder_params = enc.copy()
                state.best_prototypes = prototypes.copy()
                state.best_gamma = state.gamma
    finally:
        if hist_fh:
            hist_fh.close()
        if plan_fh:
            plan_fh.close()

    if state.best_encoder_params is None:
        state.best_encoder_params = enc.copy()
        state.best_prototypes = prototypes.copy()
        state.best_gamma = state.gamma
        state.best_val_recall = float("nan")
    return state, history


def _same_class_partners(dataset: Dataset, train_idx: np.ndarray,
                         labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each label, draw a random training sample of the same class."""
    partners = np.empty((labels.size, dataset.features.shape[1]))
    train_labels = dataset.labels[train_idx]
    for i, lab in enumerate(labels):
        pool = train_idx[train_labels == lab]
        partners[i] = dataset.features[rng.choice(pool)]
    return partners


def save_checkpoint(state: TrainState, path: str) -> None:
    """Atomic JSON checkpoint of the best parameters."""
    payload = {
        "encoder": {
            "activation": state.best_encoder_params.activation,
            "weights": [w.tolist() for w in state.best_encoder_params.weights],
            "biases": [b.tolist() for b in state.best_encoder_params.biases],
        },
        "prototypes": state.best_prototypes.tolist(),
        "gamma": state.best_gamma,
        "epoch": state.epoch,
        "step": state.step,
        "best_val_recall": state.best_val_recall,
        "class_stats": state.stats.to_dict(),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    payload["encoder"] = encoder.EncoderParams(
        weights=[np.asarray(w) for w in payload["encoder"]["weights"]],
        biases=[np.asarray(b) for b in payload["encoder"]["biases"]],
        activation=payload["encoder"]["activation"],
    )
    payload["prototypes"] = np.asarray(payload["prototypes"])
    return payload
