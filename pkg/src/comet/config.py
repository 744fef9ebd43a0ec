"""JSON run configuration: schema, validation and conversion to stage plans."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import jsonschema

from . import synthgen
from .evalsuite import METRICS
from .trainer import ABLATIONS, ModelConfig, StagePlan, TrainConfig
from .objectives import COMPONENTS

OUT_ENV = "COMET_OUT"


class ConfigError(ValueError):
    """Raised for any configuration problem; the message names the offending field."""


def _numeric_props(dc, positive: tuple[str, ...] = ()) -> dict:
    """Non-negative numeric schema per dataclass field; integer when the default is an int."""
    props = {}
    for f in fields(dc):
        kind = "integer" if isinstance(f.default, int) else "number"
        props[f.name] = {"type": kind, "minimum": 1 if f.name in positive else 0}
    return props


_DATA_PROPS = _numeric_props(synthgen.DataConfig, ("d_raw",))
_DATA_PROPS.update(
    {k: {"type": "integer", "minimum": 2} for k in ("seq_len", "categories_per_stage", "pairs_per_stage", "eval_pairs")}
)
_DATA_PROPS["p_stay"]["maximum"] = 1
_DATA_PROPS["overlap"]["maximum"] = 1

_MODEL_PROPS = _numeric_props(
    ModelConfig, ("d_raw", "d_code", "d_spec", "hidden", "context_dim", "experts", "k_steps", "codebook_size")
)

_TRAIN_PROPS = {
    "lr": {"type": "number", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 2},
    "epochs": {"type": "integer", "minimum": 0},
    "gamma": {"type": "number", "minimum": 0, "maximum": 1},
    "beta": {"type": "number", "minimum": 0},
    "ewc_lambda": {"type": "number", "minimum": 0},
    "fisher_samples": {"type": "integer", "minimum": 2},
    "k2": {"type": "integer", "minimum": 0},
    "weights": {
        "type": "object",
        "propertyNames": {"enum": [*COMPONENTS, "pmr"]},
        "additionalProperties": {"type": "number", "minimum": 0},
    },
    "ablate": {"type": "array", "items": {"enum": list(ABLATIONS)}, "uniqueItems": True},
}

_MODALITY = {"type": "string", "pattern": "^[A-Za-z][A-Za-z0-9_-]*$"}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "comet run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["stages"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string", "minLength": 1},
        "data": {"type": "object", "additionalProperties": False, "properties": _DATA_PROPS},
        "model": {"type": "object", "additionalProperties": False, "properties": _MODEL_PROPS},
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_PROPS},
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["index", "mediator", "partner"],
                "properties": {
                    "index": {"type": "integer", "minimum": 1},
                    "mediator": _MODALITY,
                    "partner": _MODALITY,
                    "epochs": {"type": "integer", "minimum": 0},
                    "k2": {"type": "integer", "minimum": 0},
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "metrics": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
                "activation_threshold": {"type": "number", "minimum": 0},
            },
        },
    },
}


@dataclass(frozen=True)
class StageEntry:
    index: int
    mediator: str
    partner: str
    epochs: int | None = None
    k2: int | None = None


@dataclass(frozen=True)
class RunConfig:
    stages: tuple[StageEntry, ...]
    seed: int = 0
    out_dir: Path = Path("runs/default")
    data: synthgen.DataConfig = synthgen.DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    metrics: tuple[str, ...] = METRICS
    activation_threshold: float = 1e-3

    @property
    def modalities(self) -> list[str]:
        out: dict[str, None] = {}
        for s in self.stages:
            out[s.mediator] = None
            out[s.partner] = None
        return list(out)

    @property
    def n_categories(self) -> int:
        return len(self.stages) * self.data.categories_per_stage

    def stage(self, index: int) -> StageEntry:
        for s in self.stages:
            if s.index == index:
                return s
        raise ConfigError(f"stages: no stage with index {index}")

    def stage_specs(self, n_pairs: int | None = None) -> list[synthgen.StageSpec]:
        return synthgen.plan_stage_specs([(s.mediator, s.partner) for s in self.stages], self.data, n_pairs)

    def renderers(self) -> dict[str, synthgen.ModalityRenderer]:
        return synthgen.build_renderers(self.modalities, self.n_categories, self.data)

    def dataset_path(self, index: int) -> Path:
        return self.out_dir / "data" / f"stage{index}.cmtd"

    def checkpoint_path(self, index: int) -> Path:
        return self.out_dir / "checkpoints" / f"stage{index}.ckpt"

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    def plan(self, index: int, ablate: frozenset[str] | None = None) -> StagePlan:
        entry = self.stage(index)
        train = self.train
        if entry.epochs is not None:
            train = replace(train, epochs=entry.epochs)
        if entry.k2 is not None:
            train = replace(train, k2=entry.k2)
        if ablate is not None:
            train = replace(train, ablate=frozenset(ablate))
        model = replace(self.model, d_raw=self.data.d_raw)
        return StagePlan(index, entry.mediator, entry.partner, self.dataset_path(index), train, model, self.seed)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train["weights"] = dict(self.train.weights)
        train["ablate"] = sorted(self.train.ablate)
        return {
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": train,
            "stages": [{k: v for k, v in asdict(s).items() if v is not None} for s in self.stages],
            "eval": {"metrics": list(self.metrics), "activation_threshold": self.activation_threshold},
        }


def _field_path(err: jsonschema.ValidationError) -> str:
    path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return path.lstrip(".") or "<root>"


def validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_field_path(e)}: {e.message}")
    indices = [s["index"] for s in doc["stages"]]
    dup = sorted({i for i in indices if indices.count(i) > 1})
    if dup:
        raise ConfigError(f"stages: duplicate stage index {dup[0]}")
    if sorted(indices) != list(range(1, len(indices) + 1)):
        raise ConfigError("stages: indices must be 1..n without gaps")
    stages = sorted(doc["stages"], key=lambda s: s["index"])
    mediators = {s["mediator"] for s in stages}
    if len(mediators) > 1:
        raise ConfigError(f"stages: mediator must be identical across stages, got {sorted(mediators)}")
    for s in stages:
        if s["mediator"] == s["partner"]:
            raise ConfigError(f"stages[{s['index']}]: partner equals the mediator")
        if s["partner"] == "pseudo" or s["mediator"] == "pseudo":
            raise ConfigError(f"stages[{s['index']}]: 'pseudo' is a reserved modality id")
    unknown = [m for m in doc.get("eval", {}).get("metrics", []) if m not in METRICS]
    if unknown:
        raise ConfigError(f"eval.metrics: unknown metric {unknown[0]!r}; valid: {', '.join(METRICS)}")


def from_dict(doc: dict, env: dict | None = None) -> RunConfig:
    validate(doc)
    env = os.environ if env is None else env
    train_doc = dict(doc.get("train", {}))
    train_doc["weights"] = tuple(sorted(train_doc.get("weights", {}).items()))
    train_doc["ablate"] = frozenset(train_doc.get("ablate", ()))
    stages = tuple(StageEntry(**s) for s in sorted(doc["stages"], key=lambda s: s["index"]))
    out_dir = env.get(OUT_ENV) or doc.get("out_dir") or "runs/default"
    ev = doc.get("eval", {})
    try:
        return RunConfig(
            stages=stages,
            seed=doc.get("seed", 0),
            out_dir=Path(out_dir),
            data=synthgen.DataConfig(**doc.get("data", {})),
            model=ModelConfig(**doc.get("model", {})),
            train=TrainConfig(**train_doc),
            metrics=tuple(ev.get("metrics", METRICS)),
            activation_threshold=ev.get("activation_threshold", 1e-3),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return from_dict(doc, env)
