#!/usr/bin/env python3
"""
run_config.py
-------------

One YAML file configures a whole run. Top-level keys:

    seed, dataset, sbm, graph_set, model, train, retrain, surrogate, search, sample

Every section is a frozen pydantic model; unknown keys are rejected so typos surface early.
"""

import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, model_validator

from evo_search import SearchConfig
from graph_datasets import GraphSetConfig, SbmConfig
from gt_model import ModelConfig
from surrogate import SurrogateConfig
from trainer import TrainConfig


class ConfigError(ValueError):
    pass


class DatasetConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["sbm", "graph_set", "file"] = "sbm"
    path: Optional[str] = None
    task: Literal["NC", "GC"] = "NC"
    metric: Literal["acc", "auc", "mae"] = "acc"

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "file" and not self.path:
            raise ValueError("dataset.kind = file needs dataset.path")
        if self.task == "NC" and self.metric == "mae":
            raise ValueError("mae is a regression metric; node classification uses acc or auc")
        return self


class SampleConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_samples: PositiveInt = 30
    workers: PositiveInt = 1
    evaluator_cmd: Optional[str] = None
    timeout_floor: float = Field(default=60.0, gt=0.0)
    initial_timeout: float = Field(default=600.0, gt=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = 0
    dataset: DatasetConfig = DatasetConfig()
    sbm: SbmConfig = SbmConfig()
    graph_set: GraphSetConfig = GraphSetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    retrain: TrainConfig = TrainConfig()
    surrogate: SurrogateConfig = SurrogateConfig()
    search: SearchConfig = SearchConfig()
    sample: SampleConfig = SampleConfig()

    @model_validator(mode="after")
    def _retrain_budget(self):
        if self.retrain.max_steps < self.train.max_steps:
            raise ValueError(
                f"retrain.max_steps ({self.retrain.max_steps}) must be >= "
                f"train.max_steps ({self.train.max_steps})"
            )
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with every seed replaced by `seed`."""
        seeded = {
            name: getattr(self, name).model_copy(update={"seed": seed})
            for name in ("sbm", "graph_set", "train", "retrain", "surrogate", "search")
        }
        return self.model_copy(update={"seed": seed, **seeded})

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def load_run_config(path: Optional[Union[str, Path]] = None,
                    seed: Optional[int] = None) -> RunConfig:
    """Defaults when `path` is None; `seed` overrides every seed in the file."""
    data = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
            data = yaml.safe_load(text) if path.suffix in {".yaml", ".yml"} else json.loads(text)
        except (OSError, yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    try:
        config = RunConfig(**(data or {}))
    except ValidationError as exc:
        raise ConfigError(f"Invalid config {path}:\n{exc}") from exc
    return config.with_seed(seed) if seed is not None else config
