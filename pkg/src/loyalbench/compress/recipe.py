"""Composable compression recipes.

A recipe is a named list of stages, each a compression operator with
parameters. :func:`run_recipe` ekes them out in order against a fixed
original teacher, snapshotting dev-set accuracy and loyalty after every
stage. Stages share one master seed; every operator draws its
randomness from named substreams of that seed, so running the stages
one at a time against intermediate checkpoints is bit-identical to
running the whole recipe in one call.

Precision rules: a quantization stage may carry ``final_precision``.
Before that flag is set, later training stages on an int8 model are
legal; they expand the weights, train with the quantization simulated
in the forward pass, and re-export int8 when they finish. After the
flag is set the precision is settled: any stage that would alter the
model again raises :class:`InvalidConfig` naming the offending stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import InvalidConfig
from ..metrics import loyalty_report
from ..model import ClassifierModel, truncate
from ..predict import predict_set
from .distill import distill
from .prune import head_prune
from .quantize import dequantize_model, quantize_ptq, train_qat
from .theseus import ReplacementSchedule, theseus_train
from .trainer import encode_split, finetune, run_training

_STAGE_PARAMS: dict[str, dict] = {
    "truncate-finetune": {
        "keep_layers": None, "epochs": 4, "lr": 1e-3, "batch_size": 64,
    },
    "pure-kd": {
        "student_layers": None, "temperature": 10.0, "alpha": 1.0,
        "epochs": 4, "lr": 1e-3, "batch_size": 64,
    },
    "patient-kd": {
        "student_layers": None, "temperature": 10.0, "alpha": 1.0,
        "beta": 500.0, "epochs": 4, "lr": 1e-3, "batch_size": 64,
    },
    "ptq": {"final_precision": False},
    "qat": {
        "loss": "cross-entropy", "epochs": 3, "lr": 1e-3, "batch_size": 64,
        "temperature": 10.0, "alpha": 1.0, "final_precision": False,
    },
    "head-prune": {"fraction": 0.45, "split": "dev"},
    "theseus": {
        "b": 0.5, "k": 0.002, "epochs": 2, "post_epochs": 2,
        "loss": "cross-entropy", "lr": 1e-3, "batch_size": 64,
    },
    "finetune": {"epochs": 3, "lr": 1e-3, "batch_size": 64, "split": "train"},
}

# Stages that change weights or structure, hence are forbidden once the
# precision is finalized. Only a repeated (no-op) ptq is exempt.
_ALTERING = frozenset(_STAGE_PARAMS) - {"ptq"}
_TRAINS = frozenset(
    ("truncate-finetune", "pure-kd", "patient-kd", "qat", "theseus", "finetune")
)


@dataclass
class Stage:
    """One compression operator plus its parameter overrides."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _STAGE_PARAMS:
            raise InvalidConfig(
                f"unknown stage kind {self.kind!r}; expected one of "
                f"{sorted(_STAGE_PARAMS)}"
            )
        allowed = _STAGE_PARAMS[self.kind]
        for key in self.params:
            if key not in allowed:
                raise InvalidConfig(
                    f"stage {self.kind!r} does not take parameter {key!r}"
                )

    def resolved(self) -> dict:
        merged = dict(_STAGE_PARAMS[self.kind])
        merged.update(self.params)
        return merged

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "Stage":
        extra = set(d) - {"kind", "params"}
        if extra:
            raise InvalidConfig(f"unknown stage fields {sorted(extra)}")
        if "kind" not in d:
            raise InvalidConfig("stage is missing its kind")
        return cls(kind=d["kind"], params=dict(d.get("params", {})))


@dataclass
class CompressionRecipe:
    """Named ordered list of compression stages."""

    name: str
    stages: list[Stage] = field(default_factory=list)

    def __post_init__(self):
        self.stages = [
            s if isinstance(s, Stage) else Stage.from_dict(s) for s in self.stages
        ]
        finals = [
            i for i, s in enumerate(self.stages)
            if s.kind in ("ptq", "qat") and s.resolved()["final_precision"]
        ]
        if len(finals) > 1:
            raise InvalidConfig(
                f"recipe {self.name!r} flags final precision more than once "
                f"(stages {finals})"
            )

    def to_dict(self) -> dict:
        return {"name": self.name, "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionRecipe":
        extra = set(d) - {"name", "stages"}
        if extra:
            raise InvalidConfig(f"unknown recipe fields {sorted(extra)}")
        if "name" not in d:
            raise InvalidConfig("recipe is missing its name")
        return cls(name=d["name"], stages=list(d.get("stages", [])))


def _snapshot(index, stage, model, teacher_preds, dataset):
    preds = predict_set(model, dataset, split="dev")
    rep = loyalty_report(teacher_preds, preds, dataset.labels("dev"))
    return {
        "stage": index,
        "kind": stage.kind,
        "params": stage.resolved(),
        "accuracy": rep.accuracy,
        "label_loyalty": rep.label_loyalty,
        "probability_loyalty": rep.probability_loyalty,
        "n_layers": model.num_layers,
        "quantized": model.is_quantized(),
        "provenance": model.provenance,
    }


def _run_stage(stage, current, teacher, dataset, seed):
    """Apply one stage to ``current``; ``teacher`` is the fixed original."""
    p = stage.resolved()
    was_quantized = current.is_quantized()

    if stage.kind == "ptq":
        calib = dataset.texts("dev")[:32] or dataset.texts("train")[:32]
        return quantize_ptq(current, calib)

    if stage.kind == "qat":
        loss = p["loss"]
        model, _ = train_qat(
            current, dataset, loss_choice=loss, epochs=p["epochs"],
            teacher=teacher if loss != "cross-entropy" else None,
            seed=seed, lr=p["lr"], batch_size=p["batch_size"],
            temperature=p["temperature"], alpha=p["alpha"],
        )
        return model

    if stage.kind == "head-prune":
        return head_prune(
            current, dataset, fraction=p["fraction"], split=p["split"]
        )

    if stage.kind == "theseus":
        model, _ = theseus_train(
            current, dataset,
            schedule=ReplacementSchedule(b=p["b"], k=p["k"]),
            loss_choice=p["loss"], epochs=p["epochs"],
            post_epochs=p["post_epochs"], seed=seed,
            lr=p["lr"], batch_size=p["batch_size"],
        )
        return model

    if stage.kind == "truncate-finetune":
        work = dequantize_model(current) if was_quantized else current.clone()
        keep = p["keep_layers"]
        if keep is None:
            keep = max(1, work.num_layers // 2)
        work = truncate(work, keep)
        if was_quantized:
            model, _ = train_qat(
                work, dataset, loss_choice="cross-entropy",
                epochs=p["epochs"], seed=seed, lr=p["lr"],
                batch_size=p["batch_size"],
            )
            return model
        finetune(
            work, dataset, epochs=p["epochs"], seed=seed,
            lr=p["lr"], batch_size=p["batch_size"],
        )
        return work

    if stage.kind in ("pure-kd", "patient-kd"):
        work = dequantize_model(current) if was_quantized else current.clone()
        target = p["student_layers"]
        if target is not None and target != work.num_layers:
            work = truncate(work, target)
        variant = "pure" if stage.kind == "pure-kd" else "patient"
        beta = p["beta"] if variant == "patient" else 0.0
        if was_quantized:
            model, _ = train_qat(
                work, dataset, loss_choice="kd", epochs=p["epochs"],
                teacher=teacher, seed=seed, lr=p["lr"],
                batch_size=p["batch_size"], temperature=p["temperature"],
                alpha=p["alpha"], beta=beta,
            )
            return model
        model, _ = distill(
            teacher, work, dataset, variant=variant,
            temperature=p["temperature"], alpha=p["alpha"], beta=beta,
            epochs=p["epochs"], seed=seed, lr=p["lr"],
            batch_size=p["batch_size"],
        )
        return model

    # finetune
    work = dequantize_model(current) if was_quantized else current.clone()
    ids, mask = encode_split(work.tokenizer, dataset.texts(p["split"]))
    run_training(
        work, ids, mask, dataset.labels(p["split"]), epochs=p["epochs"],
        seed=seed, lr=p["lr"], batch_size=p["batch_size"],
        fake_quant=was_quantized,
    )
    if was_quantized:
        calib = dataset.texts("dev")[:32] or dataset.texts("train")[:32]
        out = quantize_ptq(work, calib)
        out.provenance = f"finetune({current.provenance}, epochs={p['epochs']})"
        return out
    work.provenance = f"finetune({current.provenance}, epochs={p['epochs']})"
    return work


def run_recipe(
    recipe: CompressionRecipe,
    model: ClassifierModel,
    dataset,
    seed: int = 0,
    teacher: ClassifierModel | None = None,
) -> tuple[ClassifierModel, list[dict]]:
    """Apply every stage in order; returns the final model and a stage log.

    ``model`` is the starting point; ``teacher`` is the reference that
    distillation stages target and loyalty snapshots compare against,
    defaulting to ``model`` itself. Pass the original teacher explicitly
    when resuming a recipe from an intermediate checkpoint: with the
    same seed, running a recipe's stages one at a time that way is
    bit-identical to one end-to-end call. Each log entry records the
    stage, its resolved parameters, and the model's dev accuracy and
    loyalty right after that stage. The same ``seed`` feeds every stage;
    operators split it into their own named substreams internally.

    A resumed run treats its starting model as not yet
    precision-finalized; split recipes after, not across, a stage that
    sets ``final_precision``.
    """
    if teacher is None:
        teacher = model
    teacher_preds = predict_set(teacher, dataset, split="dev")
    current = model.clone()
    finalized = False
    log: list[dict] = []

    for i, stage in enumerate(recipe.stages):
        if finalized and stage.kind in _ALTERING:
            raise InvalidConfig(
                f"recipe {recipe.name!r} stage {i} ({stage.kind}) cannot "
                f"modify an int8-finalized model"
            )
        if stage.kind == "theseus" and current.is_quantized():
            raise InvalidConfig(
                f"recipe {recipe.name!r} stage {i} (theseus) needs a float "
                f"model to mix layers from"
            )
        current = _run_stage(stage, current, teacher, dataset, seed)
        if stage.kind in ("ptq", "qat") and stage.resolved()["final_precision"]:
            finalized = True
        log.append(_snapshot(i, stage, current, teacher_preds, dataset))
    return current, log
