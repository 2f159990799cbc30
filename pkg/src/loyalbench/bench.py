"""End-to-end benchmark orchestration and report emission.

A bench run takes one validated config and a list of seeds. Per seed it
builds the dataset, trains the teacher, applies every named compression
recipe, and scores each resulting model on clean accuracy, loyalty to
the teacher, wall-clock speed-up, and robustness under the synonym
attack. Rows aggregate across seeds as mean and standard deviation.

Reports serialize to JSON (full precision, with provenance and a config
hash) and to a markdown table with the column order Method, #Layer,
Speed-up, Acc, Label, Probability, AA-Acc, #Query. Failed recipe cells
render as a dash with a footnote naming the failure; the run is
otherwise reproducible byte for byte once timing fields are stripped.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
import warnings

import numpy as np
import yaml

from . import __version__
from .attack import build_synonym_table, evaluate_robustness, save_outcomes
from .compress import CompressionRecipe, finetune, run_recipe
from .data import generate_synthetic, ingest, train_embeddings
from .errors import InvalidConfig, InvalidInput
from .metrics import loyalty_report, measure_speedup
from .model import ClassifierModel, Tokenizer
from .model import save as save_checkpoint
from .predict import predict_set

log = logging.getLogger("loyalbench")

_DATA_STREAM = 0xDA7A

DEFAULT_RECIPES: list[dict] = [
    {"name": "truncate_finetune", "stages": [
        {"kind": "truncate-finetune", "params": {"keep_layers": 2, "epochs": 2}},
    ]},
    {"name": "pure_kd", "stages": [
        {"kind": "pure-kd", "params": {"student_layers": 2, "epochs": 2}},
    ]},
    {"name": "q8_ptq", "stages": [
        {"kind": "ptq", "params": {}},
    ]},
    {"name": "ptq_finetune", "stages": [
        {"kind": "ptq", "params": {}},
        {"kind": "finetune", "params": {"epochs": 1}},
    ]},
    {"name": "head_prune_ft", "stages": [
        {"kind": "head-prune", "params": {"fraction": 0.45}},
        {"kind": "finetune", "params": {"epochs": 1}},
    ]},
    {"name": "head_prune_kd", "stages": [
        {"kind": "head-prune", "params": {"fraction": 0.45}},
        {"kind": "pure-kd", "params": {"epochs": 2}},
    ]},
    {"name": "kd_ptq", "stages": [
        {"kind": "pure-kd", "params": {"student_layers": 2, "epochs": 2}},
        {"kind": "ptq", "params": {}},
    ]},
]

DEFAULT_CONFIG: dict = {
    "dataset": {
        "source": "synthetic",
        "path": None,
        "format": "csv",
        "n_examples": 3600,
        "n_classes": 3,
    },
    "model": {
        "hidden": 28,
        "num_heads": 4,
        "num_layers": 4,
        "ffn": 112,
        "max_len": 48,
        "max_vocab": 1000,
    },
    "train": {"epochs": 2, "lr": 1e-3, "batch_size": 64},
    "metrics": {"log_base": 2.0},
    "attack": {
        "k": 8,
        "min_cosine": 0.5,
        "max_candidates": 8,
        "max_examples": 150,
        "embedding_dim": 64,
    },
    "speedup": {"runs": 30, "batch": 16},
    "seeds": [0, 1, 2],
    "out_dir": "bench_out",
    "recipes": DEFAULT_RECIPES,
}


def _check_keys(given: dict, allowed, where: str) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise InvalidConfig(f"unknown {where} key {unknown[0]!r}")


class BenchConfig:
    """Validated bench configuration; unknown keys anywhere are rejected."""

    def __init__(self, raw: dict | None = None):
        raw = raw or {}
        if not isinstance(raw, dict):
            raise InvalidConfig("config must be a mapping")
        _check_keys(raw, DEFAULT_CONFIG, "config")
        merged = copy.deepcopy(DEFAULT_CONFIG)
        for section, value in raw.items():
            if isinstance(merged[section], dict):
                if not isinstance(value, dict):
                    raise InvalidConfig(f"config section {section!r} must be a mapping")
                _check_keys(value, merged[section], f"config.{section}")
                merged[section].update(value)
            else:
                merged[section] = value
        self._d = merged

        seeds = merged["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) for s in seeds
        ):
            raise InvalidConfig("seeds must be a non-empty list of integers")
        if len(set(seeds)) != len(seeds):
            raise InvalidConfig("seeds must be distinct")
        if merged["dataset"]["source"] not in ("synthetic", "file"):
            raise InvalidConfig(
                f"dataset source must be synthetic or file, "
                f"got {merged['dataset']['source']!r}"
            )
        if merged["dataset"]["source"] == "file" and not merged["dataset"]["path"]:
            raise InvalidConfig("dataset source 'file' needs dataset.path")
        # recipes validate themselves, including stage kinds and params
        self.recipes = [CompressionRecipe.from_dict(r) for r in merged["recipes"]]
        names = [r.name for r in self.recipes]
        if len(set(names)) != len(names):
            raise InvalidConfig("recipe names must be unique")
        if "teacher" in names:
            raise InvalidConfig("recipe name 'teacher' is reserved")

    def __getitem__(self, key):
        return self._d[key]

    @property
    def seeds(self) -> list[int]:
        return list(self._d["seeds"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self._d)

    def config_hash(self) -> str:
        canon = json.dumps(self._d, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_yaml(cls, path: str) -> "BenchConfig":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
        return cls(raw)


METRIC_KEYS = (
    "speedup", "accuracy", "label_loyalty", "probability_loyalty",
    "after_attack_accuracy", "mean_query_number",
)
TIMING_KEYS = ("speedup",)


def _build_dataset(config: BenchConfig, seed: int):
    d = config["dataset"]
    if d["source"] == "file":
        return ingest(d["path"], format=d["format"])
    data_seed = int(np.random.SeedSequence([seed, _DATA_STREAM]).generate_state(1)[0])
    return generate_synthetic(
        seed=data_seed, n_examples=d["n_examples"], n_classes=d["n_classes"]
    )


def train_teacher(config: BenchConfig, dataset, seed: int) -> ClassifierModel:
    """Build tokenizer and teacher for one seed and finetune on train."""
    m = config["model"]
    tok = Tokenizer.build(
        dataset.texts("train"), max_vocab=m["max_vocab"], max_len=m["max_len"]
    )
    teacher = ClassifierModel(
        vocab_size=tok.vocab_size, num_classes=dataset.num_classes,
        hidden=m["hidden"], num_heads=m["num_heads"], num_layers=m["num_layers"],
        ffn=m["ffn"], max_len=m["max_len"], seed=seed, tokenizer=tok,
        provenance=f"teacher(seed={seed})",
    )
    t = config["train"]
    finetune(
        teacher, dataset, epochs=t["epochs"], seed=seed,
        lr=t["lr"], batch_size=t["batch_size"],
    )
    return teacher


def _evaluate_model(name, model, teacher, teacher_preds, dataset, table, config):
    """All report metrics for one model of one seed."""
    base = config["metrics"]["log_base"]
    preds = predict_set(model, dataset, split="test")
    rep = loyalty_report(teacher_preds, preds, dataset.labels("test"), base=base)

    if model is teacher:
        speed = {"ratio": 1.0, "timed": False}
    else:
        s = config["speedup"]
        ids, mask = teacher.tokenizer.encode_batch(
            dataset.texts("test")[: s["batch"]]
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = measure_speedup(teacher, model, (ids, mask), runs=s["runs"])
        speed = dict(result.as_dict(), timed=True)

    a = config["attack"]
    robustness, outcomes = evaluate_robustness(
        model, dataset, table, split="test",
        max_candidates=a["max_candidates"], max_examples=a["max_examples"],
    )
    return {
        "method": name,
        "n_layers": model.num_layers,
        "quantized": model.is_quantized(),
        "speedup": speed,
        "accuracy": rep.accuracy,
        "label_loyalty": rep.label_loyalty,
        "probability_loyalty": rep.probability_loyalty,
        "after_attack_accuracy": robustness.after_attack_accuracy,
        "mean_query_number": robustness.mean_query_number,
        "robustness": robustness.as_dict(),
    }, preds, outcomes


def run_seed(config: BenchConfig, seed: int, out_dir: str | None = None) -> dict:
    """Train, compress, and score everything for a single seed.

    Returns {"teacher": cell, method: cell | {"error": msg}, ...} where a
    cell is the metric dict from :func:`_evaluate_model`.
    """
    t_start = time.perf_counter()
    dataset = _build_dataset(config, seed)
    teacher = train_teacher(config, dataset, seed)
    log.info("seed %d: teacher trained in %.1fs", seed, time.perf_counter() - t_start)

    emb = train_embeddings(
        dataset, dim=config["attack"]["embedding_dim"], seed=seed
    )
    table = build_synonym_table(
        emb, k=config["attack"]["k"], min_cosine=config["attack"]["min_cosine"]
    )
    teacher_preds = predict_set(teacher, dataset, split="test")

    seed_dir = None
    if out_dir is not None:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)

    def persist(name, model, preds, outcomes, stage_log=None):
        if seed_dir is None:
            return
        save_checkpoint(model, os.path.join(seed_dir, f"{name}.ckpt"))
        preds.to_jsonl(os.path.join(seed_dir, f"{name}_test_predictions.jsonl"))
        save_outcomes(outcomes, os.path.join(seed_dir, f"{name}_attack.jsonl"))
        if stage_log is not None:
            with open(os.path.join(seed_dir, f"{name}_stages.json"), "w") as fh:
                json.dump(stage_log, fh, indent=2, sort_keys=True)

    cells: dict[str, dict] = {}
    cell, preds, outcomes = _evaluate_model(
        "teacher", teacher, teacher, teacher_preds, dataset, table, config
    )
    cells["teacher"] = cell
    persist("teacher", teacher, preds, outcomes)

    for recipe in config.recipes:
        t0 = time.perf_counter()
        try:
            model, stage_log = run_recipe(recipe, teacher, dataset, seed=seed)
            cell, preds, outcomes = _evaluate_model(
                recipe.name, model, teacher, teacher_preds, dataset, table, config
            )
        except Exception as exc:
            log.warning("seed %d: recipe %s failed: %s", seed, recipe.name, exc)
            cells[recipe.name] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        cells[recipe.name] = cell
        persist(recipe.name, model, preds, outcomes, stage_log)
        log.info(
            "seed %d: %s done in %.1fs", seed, recipe.name, time.perf_counter() - t0
        )
    return cells


def _aggregate(method: str, seed_cells: list[tuple[int, dict]]) -> dict:
    """Fold per-seed cells for one method into a report row."""
    ok = [(s, c) for s, c in seed_cells if "error" not in c]
    failures = [
        {"seed": s, "error": c["error"]} for s, c in seed_cells if "error" in c
    ]
    row: dict = {"method": method, "failures": failures}
    if not ok:
        row["n_layers"] = None
        for key in METRIC_KEYS:
            row[key] = None
        return row
    row["n_layers"] = ok[0][1]["n_layers"]
    row["quantized"] = ok[0][1]["quantized"]
    for key in METRIC_KEYS:
        if key == "speedup":
            values = [c["speedup"]["ratio"] for _, c in ok]
        else:
            values = [c[key] for _, c in ok]
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        row[key] = {
            "values": [float(v) for v in values],
            "mean": mean,
            "std": std,
        }
    row["per_seed"] = {str(s): c for s, c in ok}
    return row


def run_bench(config: BenchConfig, out_dir: str | None = None) -> dict:
    """Full multi-seed bench; returns the report as a plain dict."""
    started = time.time()
    all_cells: dict[int, dict] = {}
    for seed in config.seeds:
        all_cells[seed] = run_seed(config, seed, out_dir=out_dir)

    methods = ["teacher"] + [r.name for r in config.recipes]
    rows = [
        _aggregate(m, [(s, all_cells[s][m]) for s in config.seeds])
        for m in methods
    ]
    report = {
        "rows": rows,
        "environment": {
            "package_version": __version__,
            "seeds": config.seeds,
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
            "hardware_note": "single-process CPU run; timings vary with load",
            "timing": {"wall_seconds": time.time() - started},
        },
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(report_to_json(report))
        with open(os.path.join(out_dir, "report.md"), "w") as fh:
            fh.write(report_to_markdown(report))
    return report


def bench_failures(report: dict) -> list[dict]:
    out = []
    for row in report["rows"]:
        for f in row.get("failures", []):
            out.append({"method": row["method"], **f})
    return out


def strip_timing(report: dict) -> dict:
    """Deep copy without wall-clock-dependent fields.

    Two runs with the same config and seeds agree byte for byte on the
    stripped form.
    """
    out = copy.deepcopy(report)
    out["environment"].pop("timing", None)
    for row in out["rows"]:
        for key in TIMING_KEYS:
            row.pop(key, None)
        for cell in row.get("per_seed", {}).values():
            cell.pop("speedup", None)
    return out


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> dict:
    return json.loads(text)


def _fmt(cell, decimals=1, suffix=""):
    if cell is None:
        return "—"
    mean = round(cell["mean"], decimals)
    std = round(cell["std"], decimals)
    if len(cell["values"]) > 1:
        return f"{mean:.{decimals}f}{suffix} (±{std:.{decimals}f})"
    return f"{mean:.{decimals}f}{suffix}"


def report_to_markdown(report: dict) -> str:
    lines = [
        "| Method | #Layer | Speed-up | Acc | Label | Probability | AA-Acc | #Query |",
        "|---|---|---|---|---|---|---|---|",
    ]
    notes = []
    for row in report["rows"]:
        layers = "—" if row["n_layers"] is None else str(row["n_layers"])
        cells = [
            row["method"],
            layers,
            _fmt(row.get("speedup"), decimals=1, suffix="x"),
            _fmt(row.get("accuracy")),
            _fmt(row.get("label_loyalty")),
            _fmt(row.get("probability_loyalty")),
            _fmt(row.get("after_attack_accuracy")),
            _fmt(row.get("mean_query_number")),
        ]
        lines.append("| " + " | ".join(cells) + " |")
        for f in row.get("failures", []):
            notes.append(
                f"- `{row['method']}` failed on seed {f['seed']}: {f['error']}"
            )
    env = report["environment"]
    lines.append("")
    lines.append(
        f"Seeds: {env['seeds']} · config {env['config_hash']} · "
        f"loyalbench {env['package_version']}"
    )
    if notes:
        lines.append("")
        lines.append("Failures:")
        lines.extend(notes)
    return "\n".join(lines) + "\n"


def compare(report_a: dict, report_b: dict) -> dict:
    """Per-method metric deltas (b minus a) over the shared methods."""
    rows_a = {r["method"]: r for r in report_a["rows"]}
    rows_b = {r["method"]: r for r in report_b["rows"]}
    shared = [m for m in rows_a if m in rows_b]
    if not shared:
        raise InvalidInput("reports share no method names")
    deltas = {}
    for m in shared:
        deltas[m] = {}
        for key in METRIC_KEYS:
            ca, cb = rows_a[m].get(key), rows_b[m].get(key)
            if ca is None or cb is None:
                deltas[m][key] = None
            else:
                deltas[m][key] = cb["mean"] - ca["mean"]
    return {
        "methods": deltas,
        "unmatched_a": sorted(set(rows_a) - set(rows_b)),
        "unmatched_b": sorted(set(rows_b) - set(rows_a)),
    }
