"""Experiment configuration: one flat, strictly validated JSON document."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import TASKS
from .losses import Ablation, LossWeights
from .transformer import ModelConfig

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "ValidationError"]


class ConfigError(ValueError):
    """A config file could not be read or failed validation."""


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # task
    task: Literal["parity", "majority", "first-token"] = "parity"
    task_size: int = Field(2560, ge=1, description="pool size before the 8:1:1 split")
    seq_len: int = Field(6, ge=1)
    train_size: Optional[int] = Field(None, ge=1, description="nested prefix of the train split")
    data_seed: int = Field(0, ge=0)

    # model
    hidden_size: int = Field(16, ge=1)
    num_layers: int = Field(2, ge=1)
    num_heads: int = Field(2, ge=1)
    ffn_size: int = Field(32, ge=1)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    attention_capture: Literal["pre", "post"] = "pre"

    # objective
    alpha: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    beta: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    gamma: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    coef_grid: list[float] = [0.01, 0.05, 0.1, 0.5]
    hsr_on: bool = True
    mhar_on: bool = True
    or_on: bool = True
    hsr_layers: Literal["all", "last"] = "all"
    k: int = Field(2, ge=1)

    # optimizer
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    clip_norm: Optional[float] = Field(1.0, gt=0.0)

    # schedule
    seeds: list[int] = [1, 2, 3, 4, 5]
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(16, ge=1)
    workers: int = Field(1, ge=1)

    # studies and landscape
    study_sizes: list[int] = [64, 128, 256, 512]
    grid_points: int = Field(21, ge=1)
    grid_range: float = Field(1.0, gt=0.0)
    direction_norm: Literal["filter", "variance"] = "filter"

    out_dir: str = "runs/default"

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        return v

    @field_validator("grid_points")
    @classmethod
    def _odd_grid(cls, v):
        if v % 2 == 0:
            raise ValueError("grid_points must be odd so the center lies on the grid")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        train_pool = self.task_size * 8 // 10
        if self.train_size is not None and self.train_size > train_pool:
            raise ValueError(f"train_size {self.train_size} exceeds the train split ({train_pool})")
        return self

    # -- derived views -----------------------------------------------------
    def model(self) -> ModelConfig:
        vocab, classes = TASKS[self.task]
        return ModelConfig(
            vocab_size=vocab,
            max_len=self.seq_len,
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            ffn_size=self.ffn_size,
            num_classes=classes,
            dropout_rate=self.dropout_rate,
            attention_capture=self.attention_capture,
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def ablation(self) -> Ablation:
        return Ablation(self.hsr_on, self.mhar_on, self.or_on)

    def variant(self, **changes) -> "ExperimentConfig":
        # re-validate rather than model_copy(update=...) which skips validation
        return ExperimentConfig.model_validate({**self.model_dump(), **changes})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"


def format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {format_errors(exc)}") from exc
