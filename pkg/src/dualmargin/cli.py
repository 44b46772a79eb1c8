"""Command-line harness: generate / train / eval / verify / ablate.

Every run writes a manifest sufficient to reproduce it exactly; metrics
go to CSV/JSON with a fixed column layout. Exit codes: 0 success,
2 config error, 3 numerical failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import (ConfigError, ExperimentConfig, default_config,
                     describe_defaults, parse_config)
from .experiment import (METRIC_COLUMNS, build_dataset, metrics_row,
                         run_experiment, run_id_for, with_seed)
from .loss import MarginConfig, margin_loss, margin_loss_forward
from .synthdata import export_csv
from .trainer import TrainingDiverged, save_checkpoint
from .verify import alignment_probe, bound_probe, central_difference
from .core import rows_normalize

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4

ABLATION_CONFIG_PRESETS = {
    # Letters: A base margin only, B dual margin, C no oversampling,
    # D oversampling with random selection, E oversampling with
    # norm-guided selection, F regularization.
    "A,C": {"mode": "am_softmax", "oversample_prob": 0.0, "lam": 0.0},
    "B,C": {"mode": "dual_margin", "oversample_prob": 0.0, "lam": 0.0},
    "B,D": {"mode": "dual_margin", "selection": "random", "lam": 0.0},
    "B,E": {"mode": "dual_margin", "selection": "norm_guided", "lam": 0.0},
    "B,E,F": {"mode": "dual_margin", "selection": "norm_guided"},
}
ABLATION_SEEDS = (0, 1, 42, 2025)
ABLATION_MARGINS = (0.05, 0.10, 0.15, 0.20)
ABLATION_LAMBDAS = (0.0, 0.0001, 1.0, 5.0)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in METRIC_COLUMNS])


def write_manifest(cfg: ExperimentConfig, out_dir: str) -> None:
    manifest = {
        "version": __version__,
        "run_id": run_id_for(cfg),
        "config": {k: _fmt(v) for k, v in cfg.to_flat_dict().items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    dataset = build_dataset(cfg)
    export_csv(dataset, os.path.join(args.out, "dataset.csv"),
               os.path.join(args.out, "dataset.json"))
    write_manifest(cfg, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    state, history, report, row = run_experiment(
        cfg,
        history_path=os.path.join(args.out, "history.jsonl"),
        plan_log_path=os.path.join(args.out, "plans.jsonl"),
    )
    write_manifest(cfg, args.out)
    save_checkpoint(state, os.path.join(args.out, "checkpoint.json"))
    if args.format in ("csv", "both"):
        write_metrics_csv([row], os.path.join(args.out, "metrics.csv"))
    if args.format in ("json", "both"):
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return EXIT_OK


def cmd_eval(args) -> int:
    # Re-evaluation re-runs the deterministic pipeline from the manifest
    # config; dataset and training are reproduced exactly.
    return cmd_train(args)


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    rows = verification_rows(seed=cfg.train.seed)
    with open(os.path.join(args.out, "verify.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "statistic", "value", "threshold", "passed"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    write_manifest(cfg, args.out)
    for row in rows:
        print(f"{row[0]}: {row[1]}={row[2]} (threshold {row[3]}) -> "
              f"{'PASS' if row[4] else 'FAIL'}")
    return EXIT_OK if all(row[4] for row in rows) else EXIT_VERIFY


def verification_rows(seed: int = 42, gradcheck_instances: int = 20,
                      prop_probes: int = 2000) -> list[tuple]:
    """Gradient oracle plus both inequality probes, as report rows."""
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for _ in range(gradcheck_instances):
        n, c, d = rng.integers(2, 9), rng.integers(2, 6), rng.integers(2, 8)
        cfg = MarginConfig(s=float(rng.choice([1.0, 32.0])),
                           m=float(rng.uniform(0.05, 0.3)),
                           lam=float(rng.choice([0.0, 1.0, 5.0])),
                           gamma=float(rng.normal(0, 0.5)),
                           mode=str(rng.choice(["dual_margin", "am_softmax", "ce"])))
        x = rng.normal(size=(n, d))
        w = rng.normal(size=(c, d))
        labels = rng.integers(0, c, size=n)
        deltas = np.sort(rng.uniform(0, cfg.m, size=c))[::-1].copy()
        deltas[0] = 0.0
        deltas[-1] = cfg.m
        out = margin_loss(x, labels, w, deltas, cfg)
        theta = np.concatenate([x.ravel(), w.ravel(), [cfg.gamma]])

        def f(t):
            xx = t[: n * d].reshape(n, d)
            ww = t[n * d: n * d + c * d].reshape(c, d)
            cc = replace(cfg, gamma=float(t[-1]))
            o, _ = margin_loss_forward(xx, labels, ww, deltas, cc)
            return o.total

        numeric = central_difference(f, theta, 1e-6)
        analytic = np.concatenate([
            out.grad_embeddings.ravel(), out.grad_prototypes.ravel(), [out.grad_gamma]
        ])
        err = float(np.max(np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))))
        max_err = max(max_err, err)

    rows = [("gradcheck", "max_rel_error", max_err, 1e-5, max_err < 1e-5)]

    viol1 = 0
    for _ in range(prop_probes):
        n, c, d = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(3, 8))
        cfg = MarginConfig(s=float(rng.choice([1.0, 32.0])))
        units, _, _ = rows_normalize(rng.normal(size=(n, d)))
        protos, _, _ = rows_normalize(rng.normal(size=(c, d)))
        deltas = rng.uniform(0, cfg.m, size=c)
        probe = alignment_probe(units, int(rng.integers(0, c)), protos, deltas, cfg)
        if probe.residual > probe.bound + 1e-9:
            viol1 += 1
    rows.append(("prototype_alignment", "violations", viol1, 0, viol1 == 0))

    viol2 = 0
    checked = 0
    for _ in range(prop_probes):
        c, d = int(rng.integers(3, 7)), int(rng.integers(3, 8))
        s = float(rng.choice([1.0, 32.0]))
        cfg = MarginConfig(s=s)
        protos, _, _ = rows_normalize(rng.normal(size=(c, d)))
        labels_all = np.arange(c)
        deltas = np.sort(rng.uniform(0, cfg.m, size=c))  # increasing: tail last
        y, tail = 0, c - 1
        unit, _, _ = rows_normalize(
            (protos[y] + 0.3 * rng.normal(size=d))[None, :])
        probe = bound_probe(unit[0], y, tail, protos, deltas, cfg)
        if probe.condition_met:
            checked += 1
            if probe.grad_norm > probe.bound + 1e-9:
                viol2 += 1
    rows.append(("deviation_bound", "violations", viol2, 0,
                 viol2 == 0 and checked > 0))
    return rows


def _ablation_variants(which: str, cfg: ExperimentConfig):
    if which == "configs":
        for name, preset in ABLATION_CONFIG_PRESETS.items():
            margin_keys = {k: v for k, v in preset.items() if k in ("mode", "lam")}
            train_keys = {k: v for k, v in preset.items()
                          if k in ("oversample_prob", "selection")}
            variant = replace(
                cfg,
                train=replace(cfg.train, margin=replace(cfg.train.margin, **margin_keys),
                              **train_keys),
            )
            yield name, variant
    elif which == "seeds":
        for seed in ABLATION_SEEDS:
            yield f"seed={seed}", with_seed(cfg, seed)
    elif which == "margin":
        for m in ABLATION_MARGINS:
            yield f"m={m}", replace(
                cfg, train=replace(cfg.train, margin=replace(cfg.train.margin, m=m)))
    elif which == "lambda":
        for lam in ABLATION_LAMBDAS:
            yield f"lambda={lam}", replace(
                cfg, train=replace(cfg.train, margin=replace(cfg.train.margin, lam=lam)))
    else:
        raise ConfigError(
            f"unknown ablation grid {which!r}; choose configs, seeds, margin or lambda")


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for name, variant in _ablation_variants(args.grid, cfg):
        _, _, _, row = run_experiment(variant)
        row = {"variant": name, **row}
        rows.append(row)
        print(f"{name}: macro_recall={row['macro_recall']:.4f} rank1={row['rank1']:.4f}")
    columns = ("variant",) + METRIC_COLUMNS
    with open(os.path.join(args.out, "ablate.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in columns])
    write_manifest(cfg, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmargin",
        description="Dual-margin long-tailed classification harness.",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("train", cmd_train),
                     ("eval", cmd_eval), ("verify", cmd_verify),
                     ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override all seeds")
        p.add_argument("--out", default="runs/out", help="output directory")
        p.add_argument("--format", choices=("csv", "json", "both"), default="both")
        if name == "ablate":
            p.add_argument("grid", choices=("configs", "seeds", "margin", "lambda"))
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error(args, str(exc), EXIT_CONFIG)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        _emit_error(args, str(exc), EXIT_NUMERICAL)
        return EXIT_NUMERICAL
    except ValueError as exc:
        _emit_error(args, str(exc), EXIT_NUMERICAL)
        return EXIT_NUMERICAL


def _emit_error(args, message: str, code: int) -> None:
    payload = {"error": message, "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    try:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "error.json"), "w") as fh:
            json.dump(payload, fh)
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
