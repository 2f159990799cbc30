"""Command-line interface: subcommands, exit codes, output formats."""

import json
import os

import pytest

from loyalbench.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main

CFG = """\
seeds: [0]
dataset: {{n_examples: 300}}
model: {{hidden: 32, ffn: 64, num_layers: 2}}
train: {{epochs: 1}}
attack: {{max_examples: 5}}
out_dir: {out}
recipes:
  - name: q8
    stages:
      - {{kind: ptq, params: {{final_precision: true}}}}
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Config file plus the artifacts of one train+compress pass."""
    root = tmp_path_factory.mktemp("cli")
    out = str(root / "artifacts")
    cfg = root / "cfg.yaml"
    cfg.write_text(CFG.format(out=out))
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    assert main(["compress", "--config", str(cfg)]) == EXIT_OK
    return str(cfg), out


class TestStageSubcommands:
    def test_train_writes_teacher_checkpoint(self, workdir):
        _, out = workdir
        assert os.path.exists(os.path.join(out, "seed_0", "teacher.ckpt"))

    def test_compress_writes_method_checkpoint(self, workdir):
        _, out = workdir
        assert os.path.exists(os.path.join(out, "seed_0", "q8.ckpt"))
        assert os.path.exists(os.path.join(out, "seed_0", "q8_stages.json"))

    def test_evaluate_reports_loyalty(self, workdir, capsys):
        cfg, _ = workdir
        assert main(["evaluate", "--config", cfg]) == EXIT_OK
        payload = json.loads(capsys.readouterr().out)
        assert payload["method"] == "q8"
        assert 0.0 <= payload["label_loyalty"] <= 100.0
        assert 0.0 <= payload["probability_loyalty"] <= 100.0

    def test_attack_reports_robustness(self, workdir, capsys):
        cfg, out = workdir
        assert main(["attack", "--config", cfg, "--methods", "q8"]) == EXIT_OK
        lines = capsys.readouterr().out
        # the teacher is always attacked alongside the requested methods
        assert '"method": "teacher"' in lines
        assert '"method": "q8"' in lines
        assert os.path.exists(os.path.join(out, "seed_0", "q8_attack.jsonl"))

    def test_compress_before_train_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(CFG.format(out=str(tmp_path / "empty")))
        assert main(["compress", "--config", str(cfg)]) == EXIT_CONFIG
        assert "train" in capsys.readouterr().err

    def test_unknown_method_is_config_error(self, workdir, capsys):
        cfg, _ = workdir
        rc = main(["compress", "--config", cfg, "--methods", "nope"])
        assert rc == EXIT_CONFIG
        assert "nope" in capsys.readouterr().err


class TestConfigErrors:
    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("sseeds: [0]\n")
        assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, capsys):
        rc = main(["train", "--config", "/nonexistent/cfg.yaml"])
        assert rc == EXIT_CONFIG

    def test_malformed_yaml_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("seeds: [0\n")
        assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def bench_out(tmp_path_factory):
    root = tmp_path_factory.mktemp("clibench")
    out = str(root / "bench")
    cfg = root / "cfg.yaml"
    cfg.write_text(CFG.format(out=out))
    return str(cfg), out


class TestBenchSubcommand:
    def test_bench_markdown_and_exit_zero(self, bench_out, capsys):
        cfg, out = bench_out
        assert main(["bench", "--config", cfg]) == EXIT_OK
        text = capsys.readouterr().out
        assert text.startswith("| Method | #Layer | Speed-up |")
        assert os.path.exists(os.path.join(out, "report.json"))
        assert os.path.exists(os.path.join(out, "report.md"))

    def test_report_rerenders_saved_json(self, bench_out, capsys):
        cfg, out = bench_out
        path = os.path.join(out, "report.json")
        assert main(["report", path, "--format", "json"]) == EXIT_OK
        rendered = capsys.readouterr().out
        with open(path) as fh:
            assert rendered == fh.read()

    def test_report_markdown_matches_saved(self, bench_out, capsys):
        cfg, out = bench_out
        assert main(["report", os.path.join(out, "report.json")]) == EXIT_OK
        rendered = capsys.readouterr().out
        with open(os.path.join(out, "report.md")) as fh:
            assert rendered == fh.read()

    def test_compare_report_with_itself(self, bench_out, capsys):
        _, out = bench_out
        path = os.path.join(out, "report.json")
        assert main(["compare", path, path]) == EXIT_OK
        diff = json.loads(capsys.readouterr().out)
        assert all(v == 0.0 for deltas in diff["methods"].values()
                   for v in deltas.values())

    def test_seed_flag_overrides_config(self, bench_out, tmp_path, capsys):
        cfg, _ = bench_out
        out = str(tmp_path / "s5")
        rc = main(["train", "--config", cfg, "--seed", "5", "--out", out])
        assert rc == EXIT_OK
        assert os.path.exists(os.path.join(out, "seed_5", "teacher.ckpt"))
        assert not os.path.exists(os.path.join(out, "seed_0"))
