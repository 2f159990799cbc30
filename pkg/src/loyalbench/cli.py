"""Command-line interface.

Subcommands cover the pipeline stage by stage (train, compress,
evaluate, attack), end to end (bench), and offline over saved artifacts
(compare, report). Every stage writes into --out so later stages can
pick up where earlier ones stopped, which keeps each subcommand
independently testable.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
Set LOYALBENCH_LOG=debug|info|warning|error to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import yaml

from .attack import build_synonym_table, evaluate_robustness, save_outcomes
from .bench import (
    BenchConfig,
    _build_dataset,
    bench_failures,
    compare,
    report_from_json,
    report_to_json,
    report_to_markdown,
    run_bench,
    run_recipe,
    train_teacher,
)
from .data import train_embeddings
from .errors import FormatError, InvalidConfig, InvalidInput, StageFailure
from .metrics import loyalty_report
from .model import load as load_checkpoint
from .model import save as save_checkpoint
from .predict import predict_set

log = logging.getLogger("loyalbench")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _setup_logging() -> None:
    level = os.environ.get("LOYALBENCH_LOG", "warning").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "WARNING"
    logging.basicConfig(
        level=getattr(logging, level),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_config(args) -> BenchConfig:
    if getattr(args, "config", None):
        config = BenchConfig.from_yaml(args.config)
    else:
        config = BenchConfig()
    overrides = {}
    if getattr(args, "seed", None):
        overrides["seeds"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if overrides:
        merged = config.to_dict()
        merged.update(overrides)
        config = BenchConfig(merged)
    return config


def _out_dir(config: BenchConfig, args) -> str:
    return getattr(args, "out", None) or config["out_dir"]


def _seed_dir(out_dir: str, seed: int) -> str:
    path = os.path.join(out_dir, f"seed_{seed}")
    os.makedirs(path, exist_ok=True)
    return path


def _pick_recipes(config: BenchConfig, methods: list[str] | None):
    if not methods:
        return config.recipes
    known = {r.name: r for r in config.recipes}
    missing = [m for m in methods if m not in known]
    if missing:
        raise InvalidConfig(
            f"unknown method {missing[0]!r}; configured: {sorted(known)}"
        )
    return [known[m] for m in methods]


def _emit(payload: dict, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(payload, sort_keys=True, indent=2))
    else:
        for key, value in payload.items():
            print(f"{key}: {value}")


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _out_dir(config, args)
    for seed in config.seeds:
        dataset = _build_dataset(config, seed)
        teacher = train_teacher(config, dataset, seed)
        seed_dir = _seed_dir(out, seed)
        save_checkpoint(teacher, os.path.join(seed_dir, "teacher.ckpt"))
        preds = predict_set(teacher, dataset, split="test")
        preds.to_jsonl(os.path.join(seed_dir, "teacher_test_predictions.jsonl"))
        acc = 100.0 * float(
            (preds.labels == dataset.labels("test")).mean()
        )
        _emit({"seed": seed, "teacher_accuracy": round(acc, 2),
               "checkpoint": os.path.join(seed_dir, "teacher.ckpt")}, args.format)
    return EXIT_OK


def cmd_compress(args) -> int:
    config = _load_config(args)
    out = _out_dir(config, args)
    recipes = _pick_recipes(config, args.methods)
    failed = False
    for seed in config.seeds:
        seed_dir = _seed_dir(out, seed)
        teacher_path = os.path.join(seed_dir, "teacher.ckpt")
        if not os.path.exists(teacher_path):
            raise InvalidConfig(
                f"missing {teacher_path}; run the train subcommand first"
            )
        teacher = load_checkpoint(teacher_path)
        dataset = _build_dataset(config, seed)
        for recipe in recipes:
            try:
                model, stage_log = run_recipe(recipe, teacher, dataset, seed=seed)
            except Exception as exc:
                failed = True
                _emit({"seed": seed, "method": recipe.name,
                       "error": f"{type(exc).__name__}: {exc}"}, args.format)
                continue
            save_checkpoint(model, os.path.join(seed_dir, f"{recipe.name}.ckpt"))
            with open(os.path.join(seed_dir, f"{recipe.name}_stages.json"), "w") as fh:
                json.dump(stage_log, fh, indent=2, sort_keys=True)
            _emit({"seed": seed, "method": recipe.name,
                   "n_layers": model.num_layers,
                   "quantized": model.is_quantized()}, args.format)
    return EXIT_STAGE if failed else EXIT_OK


def _methods_on_disk(seed_dir: str, config: BenchConfig, methods) -> list[str]:
    wanted = methods or [r.name for r in config.recipes]
    return [
        m for m in wanted
        if os.path.exists(os.path.join(seed_dir, f"{m}.ckpt"))
    ]


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    out = _out_dir(config, args)
    for seed in config.seeds:
        seed_dir = os.path.join(out, f"seed_{seed}")
        teacher_path = os.path.join(seed_dir, "teacher.ckpt")
        if not os.path.exists(teacher_path):
            raise InvalidConfig(
                f"missing {teacher_path}; run the train subcommand first"
            )
        teacher = load_checkpoint(teacher_path)
        dataset = _build_dataset(config, seed)
        teacher_preds = predict_set(teacher, dataset, split="test")
        gold = dataset.labels("test")
        base = config["metrics"]["log_base"]
        for name in _methods_on_disk(seed_dir, config, args.methods):
            model = load_checkpoint(os.path.join(seed_dir, f"{name}.ckpt"))
            rep = loyalty_report(
                teacher_preds, predict_set(model, dataset, split="test"),
                gold, base=base,
            )
            _emit({"seed": seed, "method": name, **rep.as_dict()}, args.format)
    return EXIT_OK


def cmd_attack(args) -> int:
    config = _load_config(args)
    out = _out_dir(config, args)
    a = config["attack"]
    for seed in config.seeds:
        seed_dir = os.path.join(out, f"seed_{seed}")
        dataset = _build_dataset(config, seed)
        emb = train_embeddings(dataset, dim=a["embedding_dim"], seed=seed)
        table = build_synonym_table(emb, k=a["k"], min_cosine=a["min_cosine"])
        names = ["teacher"] + _methods_on_disk(seed_dir, config, args.methods)
        for name in names:
            path = os.path.join(seed_dir, f"{name}.ckpt")
            if not os.path.exists(path):
                raise InvalidConfig(f"missing checkpoint {path}")
            model = load_checkpoint(path)
            report, outcomes = evaluate_robustness(
                model, dataset, table, split="test",
                max_candidates=a["max_candidates"],
                max_examples=a["max_examples"],
            )
            save_outcomes(outcomes, os.path.join(seed_dir, f"{name}_attack.jsonl"))
            _emit({"seed": seed, "method": name, **report.as_dict()}, args.format)
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _load_config(args)
    out = _out_dir(config, args)
    report = run_bench(config, out_dir=out)
    if args.format == "json":
        print(report_to_json(report), end="")
    else:
        print(report_to_markdown(report), end="")
    return EXIT_STAGE if bench_failures(report) else EXIT_OK


def cmd_compare(args) -> int:
    with open(args.report_a, encoding="utf-8") as fh:
        a = report_from_json(fh.read())
    with open(args.report_b, encoding="utf-8") as fh:
        b = report_from_json(fh.read())
    print(json.dumps(compare(a, b), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.report, encoding="utf-8") as fh:
        report = report_from_json(fh.read())
    text = (
        report_to_json(report) if args.format == "json"
        else report_to_markdown(report)
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loyalbench",
        description="Benchmark compressed text classifiers for loyalty and robustness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, methods=False):
        p.add_argument("--config", help="YAML config path (defaults apply if omitted)")
        p.add_argument("--seed", type=int, action="append",
                       help="seed to run; repeatable, overrides config seeds")
        p.add_argument("--out", help="artifact directory")
        p.add_argument("--format", choices=("json", "markdown"), default="json")
        if methods:
            p.add_argument("--methods", action="append",
                           help="method name filter; repeatable")

    common(sub.add_parser("train", help="train and save the teacher per seed"))
    common(sub.add_parser("compress", help="run compression recipes"), methods=True)
    common(sub.add_parser("evaluate", help="loyalty metrics from checkpoints"),
           methods=True)
    common(sub.add_parser("attack", help="robustness from checkpoints"), methods=True)
    bench_p = sub.add_parser("bench", help="full multi-seed benchmark")
    common(bench_p)
    bench_p.set_defaults(format="markdown")

    cmp_p = sub.add_parser("compare", help="diff two JSON reports")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")

    rep_p = sub.add_parser("report", help="re-render a saved JSON report")
    rep_p.add_argument("report")
    rep_p.add_argument("--format", choices=("json", "markdown"), default="markdown")
    rep_p.add_argument("--out")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "compress": cmd_compress,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "bench": cmd_bench,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (InvalidConfig, FormatError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
