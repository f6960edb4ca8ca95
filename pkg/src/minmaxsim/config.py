"""Run configuration files.

A run config is a JSON object with a mandatory integer ``seed`` and optional
sections ``data``, ``augment``, ``model``, ``train`` and ``eval``. Every key
inside a section is optional; unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import AugmentConfig
from .errors import ValidationError
from .evaluation import EvalSettings
from .losses import LossWeights
from .models import HeadConfig, ModelConfig, SegNetConfig
from .synthdata import SynthConfig
from .training import TrainConfig

SECTIONS = ("data", "augment", "model", "train", "eval")


class ConfigError(ValidationError):
    pass


@dataclass(frozen=True)
class DataSection:
    synth: SynthConfig = field(default_factory=SynthConfig)
    unlabeled_per_image: int = 0
    test_images: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        synth = self.data.synth.to_dict()
        synth.pop("seed")
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seed": self.seed,
            "data": {**synth, "unlabeled_per_image": self.data.unlabeled_per_image,
                     "test_images": self.data.test_images},
            "augment": self.augment.to_dict(),
            "model": self.model.to_dict(),
            "train": train,
            "eval": {"threshold": self.eval.threshold, "mode": self.eval.mode},
        }


def _strict(cls, section: str, values: dict, exclude=()) -> dict:
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}")
    return values


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key {unknown[0]!r}")
    if "seed" not in doc or not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
        raise ConfigError("an integer 'seed' is required")
    seed = doc["seed"]
    try:
        d = dict(doc.get("data", {}))
        extra = {k: d.pop(k) for k in ("unlabeled_per_image", "test_images") if k in d}
        synth = SynthConfig(seed=seed, **_strict(SynthConfig, "data", d, exclude=("seed",)))
        data = DataSection(synth=synth, **extra)

        augment = AugmentConfig(**_strict(AugmentConfig, "augment", doc.get("augment", {})))

        m = _strict(ModelConfig, "model", doc.get("model", {}))
        model = ModelConfig(
            seg=SegNetConfig(**_strict(SegNetConfig, "model.seg", m.get("seg", {}))),
            classifier=HeadConfig(**{**vars(ModelConfig().classifier),
                                     **_strict(HeadConfig, "model.classifier", m.get("classifier", {}))}),
            projector=HeadConfig(**{**vars(ModelConfig().projector),
                                    **_strict(HeadConfig, "model.projector", m.get("projector", {}))}),
        )

        t = dict(_strict(TrainConfig, "train", doc.get("train", {}), exclude=("seed",)))
        if "loss_weights" in t:
            lw = t["loss_weights"]
            t["loss_weights"] = LossWeights(*lw) if isinstance(lw, list) else \
                LossWeights(**_strict(LossWeights, "train.loss_weights", lw))
        train = TrainConfig(seed=seed, **t)

        ev = EvalSettings(**_strict(EvalSettings, "eval", doc.get("eval", {}), exclude=("dump_dir",)))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(seed=seed, data=data, augment=augment, model=model, train=train, eval=ev)


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc)


def write_resolved(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
