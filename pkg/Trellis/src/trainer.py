#!/usr/bin/env python3
"""
trainer.py
----------

Lower-level optimization: trains one decoded architecture and measures it on the
validation split.

Input:
    - ArchitectureEncoding + dataset (GraphInstance for NC, GraphSet for GC)
    - TrainConfig (steps, warm-up, learning rate, weight decay, batch size, dropout, seed)

Output:
    - FitnessRecord (metric_name, value, minimize flag, wall time, seed, diverged flag)

Metrics:
    acc  fraction of correct argmax predictions (GC: scalar output thresholded at 0.5)
    auc  area under the ROC curve, binary tasks only
    mae  mean absolute error, regression targets
"""

import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt, model_validator
from sklearn.metrics import mean_absolute_error, roc_auc_score

import gt_model
from graph_core import GraphInstance
from graph_datasets import GraphSet
from gt_model import GraphTransformerModel, ModelConfig
from search_space import ArchitectureEncoding, decode, encode

METRICS = ("acc", "auc", "mae")
Dataset = Union[GraphInstance, GraphSet]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str = ""):
        self.step = step
        super().__init__(f"Training diverged at step {step}" + (f": {reason}" if reason else ""))


class NonFiniteOutputError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


# Any of these during train or evaluate scores the run as diverged.
DIVERGENCE_ERRORS = (TrainingDiverged, NonFiniteOutputError,
                     gt_model.NonFiniteActivationError, gt_model.NonFiniteLossError)


class DropoutRates(BaseModel):
    model_config = ConfigDict(frozen=True)

    attention: float = Field(default=0.1, ge=0.0, lt=1.0)
    ffn: float = Field(default=0.1, ge=0.0, lt=1.0)
    gnn: float = Field(default=0.1, ge=0.0, lt=1.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_steps: NonNegativeInt = 300
    warmup_steps: NonNegativeInt = 30
    learning_rate: float = Field(default=2e-4, ge=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    batch_size: PositiveInt = 16
    dropout: DropoutRates = DropoutRates()
    seed: int = 0

    @model_validator(mode="after")
    def _warmup_within_budget(self):
        if self.warmup_steps > self.max_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must not exceed max_steps ({self.max_steps})"
            )
        return self


@dataclass
class FitnessRecord:
    encoding: ArchitectureEncoding
    metric_name: str
    value: float
    minimize: bool
    wall_time: float
    seed: Optional[int]
    diverged: bool = False
    id: Optional[str] = None

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "encoding": self.encoding.to_list(),
            "metric_name": self.metric_name,
            "value": self.value,
            "minimize": self.minimize,
            "wall_time": self.wall_time,
            "seed": self.seed,
            "diverged": self.diverged,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "FitnessRecord":
        return cls(
            encoding=ArchitectureEncoding(tuple(d["encoding"])),
            metric_name=d["metric_name"],
            value=float(d["value"]),
            minimize=bool(d["minimize"]),
            wall_time=float(d["wall_time"]),
            seed=None if d.get("seed") is None else int(d["seed"]),
            diverged=bool(d.get("diverged", False)),
            id=d.get("id"),
        )


def worst_value(metric_name: str) -> float:
    return float("inf") if metric_name == "mae" else 0.0


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Multiplier on the peak learning rate for 1-based optimizer step `step`."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig):
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )
    # LambdaLR passes the number of completed steps
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda done: warmup_factor(done + 1, cfg.warmup_steps)
    )
    return optimizer, scheduler


# --- Metrics --------------------------------------------------------------------------

def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predicted) == np.asarray(labels)))


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) > 2:
        raise MetricError(f"auc needs a binary task, found {len(classes)} classes")
    if len(classes) < 2:
        raise MetricError("auc is undefined when the split holds a single class")
    return float(roc_auc_score(labels, np.asarray(scores)))


def mae(predicted: np.ndarray, targets: np.ndarray) -> float:
    return float(mean_absolute_error(np.asarray(targets), np.asarray(predicted)))


# --- Dataset helpers ------------------------------------------------------------------

def dataset_dims(dataset: Dataset, task: str) -> Tuple[int, int]:
    """(input feature width, output width) for a dataset/task pair."""
    if task == "NC":
        if dataset.node_labels is None:
            raise ValueError("Node classification needs node_labels")
        return dataset.feature_dim, int(dataset.node_labels.max()) + 1
    if task == "GC":
        return dataset.graphs[0].feature_dim, 1
    raise ValueError(f"Unknown task '{task}'")


def _require_splits(dataset: Dataset, task: str):
    if task == "NC":
        if dataset.split_masks is None or "train" not in dataset.split_masks:
            raise ValueError("Node classification needs train/val/test split masks")
    elif not dataset.splits.get("train"):
        raise ValueError("Graph classification needs a non-empty train split")


# --- Training -------------------------------------------------------------------------

def train(model: GraphTransformerModel, dataset: Dataset, task: str, cfg: TrainConfig,
          verbose: bool = False) -> GraphTransformerModel:
    """Train in place for cfg.max_steps optimizer steps; returns the final-step parameters."""
    _require_splits(dataset, task)
    model.set_dropout(cfg.dropout.attention, cfg.dropout.ffn, cfg.dropout.gnn)
    model.train()
    optimizer, scheduler = make_optimizer(model, cfg)

    if task == "NC":
        pre = gt_model.precompute(dataset, model.config)
        labels = torch.as_tensor(dataset.node_labels)
        mask = torch.as_tensor(dataset.split_masks["train"])
    else:
        train_idx = np.asarray(dataset.splits["train"])
        pres = {int(i): gt_model.precompute(dataset.graphs[i], model.config) for i in train_idx}
        order_rng = np.random.default_rng(cfg.seed)
        queue: List[int] = []

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for step in range(1, cfg.max_steps + 1):
            optimizer.zero_grad()
            try:
                if task == "NC":
                    loss = gt_model.compute_loss(model, pre, labels, mask)
                else:
                    while len(queue) < cfg.batch_size:
                        queue.extend(order_rng.permutation(train_idx).tolist())
                    batch, queue = queue[:cfg.batch_size], queue[cfg.batch_size:]
                    loss = torch.stack([
                        gt_model.compute_loss(model, pres[i], dataset.graphs[i].graph_label)
                        for i in batch
                    ]).mean()
            except (gt_model.NonFiniteLossError, gt_model.NonFiniteActivationError) as exc:
                raise TrainingDiverged(step, str(exc)) from exc

            loss.backward()
            optimizer.step()
            scheduler.step()

            if verbose and (step == 1 or step % 50 == 0 or step == cfg.max_steps):
                print(f"   step {step:6d}  loss {loss.item():.4f}  "
                      f"lr {scheduler.get_last_lr()[0]:.2e}")

    model.eval()
    return model


def _predictions(model: GraphTransformerModel, dataset: Dataset, task: str,
                 split: str) -> Tuple[np.ndarray, np.ndarray]:
    """Raw model outputs and targets on one split."""
    model.eval()
    with torch.no_grad():
        if task == "NC":
            mask = dataset.split_masks[split]
            output = model(gt_model.precompute(dataset, model.config)).numpy()
            return output[mask], dataset.node_labels[mask]
        idx = dataset.splits[split]
        outputs = [model(gt_model.precompute(dataset.graphs[i], model.config)).item() for i in idx]
        targets = [dataset.graphs[i].graph_label for i in idx]
        return np.asarray(outputs), np.asarray(targets, dtype=float)


def metric_value(model: GraphTransformerModel, dataset: Dataset, task: str,
                 metric_name: str, split: str = "val") -> float:
    if metric_name not in METRICS:
        raise MetricError(f"Unknown metric '{metric_name}', expected one of {METRICS}")
    output, targets = _predictions(model, dataset, task, split)
    if not np.isfinite(output).all():
        raise NonFiniteOutputError(f"Model output on the {split} split is not finite")

    if task == "NC":
        if metric_name == "acc":
            return accuracy(output.argmax(axis=1), targets)
        if metric_name == "auc":
            if output.shape[1] > 2:
                raise MetricError(f"auc needs a binary task, model has {output.shape[1]} classes")
            probs = torch.softmax(torch.as_tensor(output), dim=1)[:, -1].numpy()
            return auc(probs, targets)
        raise MetricError("mae is not defined for node classification")

    if metric_name == "acc":
        return accuracy((output >= 0.5).astype(int), targets.astype(int))
    if metric_name == "auc":
        return auc(output, targets)
    return mae(output, targets)


def evaluate(model: GraphTransformerModel, dataset: Dataset, task: str,
             metric_name: str, split: str = "val") -> FitnessRecord:
    value = metric_value(model, dataset, task, metric_name, split)
    return FitnessRecord(
        encoding=encode(model.spec),
        metric_name=metric_name,
        value=value,
        minimize=metric_name == "mae",
        wall_time=0.0,
        seed=None,
    )


def fit_and_evaluate(encoding: ArchitectureEncoding, dataset: Dataset, task: str,
                     cfg: TrainConfig, metric_name: str, scale_override: Optional[str] = None,
                     model_config: ModelConfig = ModelConfig(),
                     verbose: bool = False) -> Tuple[FitnessRecord, Optional[GraphTransformerModel]]:
    """decode -> build -> train -> evaluate. The model is None when training diverged."""
    start = time.perf_counter()
    if scale_override is not None:
        model_config = model_config.model_copy(update={"scale_override": scale_override})
    spec = decode(encoding)
    in_dim, out_dim = dataset_dims(dataset, task)
    model = gt_model.build_model(spec, gt_model.resolve_scale(spec, model_config), cfg.seed,
                                 in_dim, out_dim, task, model_config)
    try:
        train(model, dataset, task, cfg, verbose=verbose)
        value, diverged = metric_value(model, dataset, task, metric_name), False
    except DIVERGENCE_ERRORS as exc:
        if verbose:
            print(f"⚠️  {exc}")
        value, diverged, model = worst_value(metric_name), True, None

    record = FitnessRecord(
        encoding=encoding,
        metric_name=metric_name,
        value=value,
        minimize=metric_name == "mae",
        wall_time=max(time.perf_counter() - start, 1e-9),
        seed=cfg.seed,
        diverged=diverged,
    )
    return record, model


def fitness(encoding: ArchitectureEncoding, dataset: Dataset, task: str, cfg: TrainConfig,
            metric_name: str = "acc", scale_override: Optional[str] = None,
            model_config: ModelConfig = ModelConfig(), verbose: bool = False) -> FitnessRecord:
    record, _ = fit_and_evaluate(encoding, dataset, task, cfg, metric_name, scale_override,
                                 model_config, verbose)
    return record
