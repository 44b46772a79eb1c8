"""Unit tests for config parsing and the command-line harness."""

import json
import os

import pytest

from dualmargin.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    main,
    verification_rows,
)
from dualmargin.config import (
    ConfigError,
    assemble,
    default_config,
    parse_config_text,
    valid_keys,
)

FAST_CONFIG = """
# Small, fast experiment for harness tests.
data.classes = 4
data.dim = 6
data.head_count = 60
data.imbalance_ratio = 10
data.cluster_spread = 0.25
train.epochs = 2
train.batch_size = 16
train.oversample_size = 4
train.hidden_dims = 16
train.embed_dim = 8
partition.head_threshold = 40
partition.tail_threshold = 10
"""


class TestConfigParsing:
    def test_empty_gives_defaults(self):
        cfg = parse_config_text("")
        assert cfg.train.margin.s == 32.0
        assert cfg.train.margin.m == 0.15
        assert cfg.train.margin.lam == 5.0
        assert cfg.train.margin.beta == 0.9
        assert cfg.train.batch_size == 32
        assert cfg.train.oversample_size == 8
        assert cfg.train.oversample_prob == 0.1

    def test_single_override(self):
        cfg = parse_config_text("margin.m = 0.20")
        assert cfg.train.margin.m == 0.20
        assert cfg.train.margin.s == 32.0

    def test_typed_parse_error_carries_line(self):
        with pytest.raises(ConfigError, match=r"<config>:2.*margin\.m"):
            parse_config_text("\nmargin.m = banana")

    def test_unknown_key_lists_valid(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("margin.q = 1")

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_config_text("just some words")

    def test_section_headers_and_comments_tolerated(self):
        cfg = parse_config_text("[margin]\n# comment\nmargin.s = 16\n")
        assert cfg.train.margin.s == 16.0

    def test_partition_thresholds_shared_with_trainer(self):
        cfg = parse_config_text(
            "partition.head_threshold = 500\npartition.tail_threshold = 50"
        )
        assert cfg.eval.head_threshold == 500
        assert cfg.train.head_threshold == 500
        assert cfg.train.tail_threshold == 50

    def test_flat_dict_roundtrip(self):
        cfg = assemble({"margin.m": 0.2, "train.epochs": 7})
        flat = cfg.to_flat_dict()
        assert flat["margin.m"] == 0.2
        assert flat["train.epochs"] == 7
        again = assemble(flat)
        assert again == cfg

    def test_valid_keys_cover_registry(self):
        keys = valid_keys()
        assert "margin.lambda" in keys
        assert "data.classes" in keys
        assert "eval.target_tpr" in keys

    def test_invalid_combination_rejected(self):
        with pytest.raises(ConfigError):
            assemble({"margin.m": 2.0})

    def test_default_config_assembles(self):
        cfg = default_config()
        assert cfg.split_fractions == (0.8, 0.1, 0.1)


class TestCliCommands:
    def _write_config(self, tmp_path, text=FAST_CONFIG):
        path = tmp_path / "exp.ini"
        path.write_text(text)
        return str(path)

    def test_generate(self, tmp_path):
        cfg = self._write_config(tmp_path)
        out = str(tmp_path / "gen")
        assert main(["generate", "--config", cfg, "--out", out]) == EXIT_OK
        assert os.path.exists(os.path.join(out, "dataset.csv"))
        assert os.path.exists(os.path.join(out, "manifest.json"))

    def test_train_writes_artifacts(self, tmp_path):
        cfg = self._write_config(tmp_path)
        out = str(tmp_path / "run")
        assert main(["train", "--config", cfg, "--out", out]) == EXIT_OK
        for name in ("metrics.csv", "metrics.json", "manifest.json",
                     "history.jsonl", "plans.jsonl", "checkpoint.json"):
            assert os.path.exists(os.path.join(out, name)), name
        header = open(os.path.join(out, "metrics.csv")).readline().strip()
        assert header == ("run_id,mode,seed,rank1,macro_recall,macro_precision,"
                          "macro_f1,recall_head,recall_between,recall_tail,tpr,tnr,acc")

    def test_manifest_reproduces_run(self, tmp_path):
        cfg = self._write_config(tmp_path)
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        main(["train", "--config", cfg, "--out", out_a])
        main(["train", "--config", cfg, "--out", out_b])
        bytes_a = open(os.path.join(out_a, "metrics.csv"), "rb").read()
        bytes_b = open(os.path.join(out_b, "metrics.csv"), "rb").read()
        assert bytes_a == bytes_b

    def test_seed_override_changes_run(self, tmp_path):
        cfg = self._write_config(tmp_path)
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        main(["train", "--config", cfg, "--out", out_a, "--seed", "1"])
        main(["train", "--config", cfg, "--out", out_b, "--seed", "2"])
        row_a = open(os.path.join(out_a, "metrics.csv")).readlines()[1]
        row_b = open(os.path.join(out_b, "metrics.csv")).readlines()[1]
        assert row_a != row_b

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("margin.m = banana\n")
        out = str(tmp_path / "err")
        assert main(["train", "--config", str(bad), "--out", out]) == EXIT_CONFIG
        payload = json.loads(open(os.path.join(out, "error.json")).read())
        assert payload["exit_code"] == EXIT_CONFIG
        stderr = capsys.readouterr().err
        assert json.loads(stderr.strip())["exit_code"] == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        out = str(tmp_path / "err")
        code = main(["train", "--config", str(tmp_path / "nope.ini"), "--out", out])
        assert code == EXIT_CONFIG

    def test_verify_passes_on_defaults(self, tmp_path, capsys):
        out = str(tmp_path / "verify")
        assert main(["verify", "--out", out]) == EXIT_OK
        lines = open(os.path.join(out, "verify.csv")).read().splitlines()
        assert lines[0] == "check,statistic,value,threshold,passed"
        checks = {line.split(",")[0] for line in lines[1:]}
        assert checks == {"gradcheck", "prototype_alignment", "deviation_bound"}
        assert all(line.endswith("True") for line in lines[1:])
        stdout = capsys.readouterr().out
        assert stdout.count("PASS") == 3

    def test_ablate_seeds_writes_rows(self, tmp_path):
        cfg = self._write_config(tmp_path)
        out = str(tmp_path / "ablate")
        assert main(["ablate", "seeds", "--config", cfg, "--out", out]) == EXIT_OK
        lines = open(os.path.join(out, "ablate.csv")).read().splitlines()
        assert len(lines) == 5  # header + 4 seeds
        variants = [line.split(",")[0] for line in lines[1:]]
        assert variants == ["seed=0", "seed=1", "seed=42", "seed=2025"]

    def test_ablate_configs_covers_presets(self, tmp_path):
        import csv

        cfg = self._write_config(tmp_path)
        out = str(tmp_path / "ablate_cfg")
        assert main(["ablate", "configs", "--config", cfg, "--out", out]) == EXIT_OK
        with open(os.path.join(out, "ablate.csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        variants = {row[0] for row in rows[1:]}
        assert variants == {"A,C", "B,C", "B,D", "B,E", "B,E,F"}


class TestVerificationRows:
    def test_rows_pass(self):
        rows = verification_rows(seed=0, gradcheck_instances=5, prop_probes=200)
        by_name = {row[0]: row for row in rows}
        assert by_name["gradcheck"][2] < 1e-5
        assert by_name["prototype_alignment"][2] == 0
        assert by_name["deviation_bound"][2] == 0
        assert all(row[4] for row in rows)
