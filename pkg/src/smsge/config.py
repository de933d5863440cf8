"""Training configuration and ablation switches."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .graph import BODY, JOINT, NUM_SCALES

LR_SMALL_DATASETS = 0.0025  # IAS-Lab, KGBD
LR_LARGE_DATASETS = 0.0005  # KS20, CASIA B

ABLATION_FLAGS = ("multi_graph", "structural_relations", "collaborative_relations",
                  "cross_scale_inference", "subsequence_reconstruction")
ABLATION_ALIASES = {
    "mg": "multi_graph", "sr": "structural_relations", "cr": "collaborative_relations",
    "csi": "cross_scale_inference", "ssr": "subsequence_reconstruction",
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = LR_SMALL_DATASETS
    epochs: int = 300
    batch_size: int = 8
    seed: int = 0
    frames: int = 6
    rounds: int = 1
    temperature_struct: float = 1.0
    temperature_collab: float = 1.0
    fusion_coefficient: float = 1.0
    heads: int = 8
    feature_dim: int = 8
    hidden_dim: int = 256
    lstm_layers: int = 2
    head_hidden: int = 256
    grad_clip: float | None = 5.0
    dtype: str = "float64"
    threads: int = 1
    multi_graph: bool = True
    structural_relations: bool = True
    collaborative_relations: bool = True
    cross_scale_inference: bool = True
    subsequence_reconstruction: bool = True

    def validate(self) -> None:
        problems = []
        if not self.learning_rate >= 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "rounds", "heads", "feature_dim",
                     "hidden_dim", "lstm_layers", "head_hidden", "threads"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.frames < 2:
            problems.append(f"frames must be >= 2, got {self.frames}")
        for name in ("temperature_struct", "temperature_collab"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.fusion_coefficient < 0:
            problems.append(f"fusion_coefficient must be >= 0, got {self.fusion_coefficient}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            problems.append(f"grad_clip must be positive or null, got {self.grad_clip}")
        if self.dtype not in ("float64", "float32"):
            problems.append(f"dtype must be float64 or float32, got {self.dtype!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_ablations(self, names) -> "TrainConfig":
        """Copy with the named components switched off (aliases mg/sr/cr/csi/ssr accepted)."""
        changes = {}
        for name in names:
            key = ABLATION_ALIASES.get(name.lower(), name.lower())
            if key not in ABLATION_FLAGS:
                raise ConfigError(f"unknown ablation {name!r}")
            changes[key] = False
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class AblationPlan:
    """Effective computation graph for a config."""

    scales: tuple[int, ...]
    structural: bool
    collaborative: bool
    head_pairs: tuple[tuple[int, int], ...]
    subsequences: bool
    notes: tuple[str, ...] = field(default=())

    def describe(self) -> str:
        return "\n".join(self.notes)


def apply_ablation(config: TrainConfig) -> AblationPlan:
    scales = tuple(range(NUM_SCALES)) if config.multi_graph else (JOINT,)
    if config.cross_scale_inference:
        pairs = tuple((a, b) for a in scales for b in range(a, BODY + 1) if b in scales)
    else:
        pairs = tuple((a, a) for a in scales)
    notes = [
        f"scales: {list(scales)}" + ("" if config.multi_graph else " (joint scale only)"),
        "attention: structural relations" if config.structural_relations
        else "attention: uniform neighbor averaging",
        "fusion: collaborative relations" if config.collaborative_relations else "fusion: skipped",
        f"reconstruction heads: {[f'{a}->{b}' for a, b in pairs]}",
        "samples: random subsequences of every length 1..f-1" if config.subsequence_reconstruction
        else "samples: full-length sequences only",
    ]
    if not any(getattr(config, f) for f in ABLATION_FLAGS):
        notes.append("baseline: LSTM with plain skeleton reconstruction")
    return AblationPlan(scales, config.structural_relations, config.collaborative_relations,
                        pairs, config.subsequence_reconstruction, tuple(notes))
