#!/usr/bin/env python3
"""
evo_search.py
-------------

Surrogate-scored genetic search over architecture encodings.

    P  <- N_p uniform samples, scored by the surrogate
    for t in 1..T:
        P' <- shuffle P, pair adjacently, two-point crossover (p_c), polynomial mutation (p_m)
        score P' with the surrogate
        P  <- best N_p of P + P'            (mu + lambda, elitist)
    return best of P, then retrain it with the real trainer

Input:
    - SearchConfig, OperationTable, a scorer exposing `minimize` and `predict_many`

Output:
    - best encoding, SearchState (final population, best ever, audit log), per-generation history
    - operation frequency table for the top of the final population
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, model_validator

import trainer
from gt_model import ModelConfig, save_checkpoint
from search_space import (
    DEFAULT_TABLE,
    GENE_NAMES,
    MACRO_GENES,
    MICRO_GENES,
    ArchitectureEncoding,
    OperationTable,
    gene_position,
    sample_uniform,
)


class Scorer(Protocol):
    minimize: bool

    def predict_many(self, encodings: Sequence[ArchitectureEncoding]) -> np.ndarray: ...


class SearchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    population_size: int = Field(default=20, ge=2)
    generations: NonNegativeInt = 30
    crossover_prob: float = Field(default=0.7, ge=0.0, le=1.0)
    mutation_prob: float = Field(default=1.0 / 6.0, ge=0.0, le=1.0)
    mutation_eta: float = Field(default=20.0, ge=0.0)
    seed: int = 0
    elitism: bool = True
    scope: Literal["full", "macro", "micro"] = "full"
    frozen_genes: Dict[str, int] = {}

    @model_validator(mode="after")
    def _check(self):
        if self.population_size % 2:
            raise ValueError(f"population_size must be even, got {self.population_size}")
        unknown = sorted(set(self.frozen_genes) - set(GENE_NAMES))
        if unknown:
            raise ValueError(f"Unknown gene names in frozen_genes: {unknown}")
        return self


@dataclass
class Individual:
    encoding: ArchitectureEncoding
    predicted: float
    generation: int
    audit_index: int

    def to_dict(self) -> Dict:
        return {"encoding": self.encoding.to_list(), "predicted": self.predicted,
                "generation": self.generation, "audit_index": self.audit_index}


@dataclass
class SearchState:
    generation: int
    population: List[Individual]
    best_ever: Individual
    rng: np.random.Generator
    minimize: bool
    frozen: Dict[int, int] = field(default_factory=dict)
    audit: List[Individual] = field(default_factory=list)


def _rank_key(ind: Individual, minimize: bool):
    score = ind.predicted if minimize else -ind.predicted
    return (score, ind.generation, ind.audit_index)


def _better(a: Individual, b: Individual, minimize: bool) -> bool:
    return _rank_key(a, minimize) < _rank_key(b, minimize)


def resolve_frozen_genes(cfg: SearchConfig, table: OperationTable = DEFAULT_TABLE) -> Dict[int, int]:
    """{gene position: fixed index}. Scoped searches freeze the other half at values drawn from
    the seed; explicit frozen_genes win over drawn values."""
    rng = np.random.default_rng((cfg.seed, 1))
    drawn = sample_uniform(table, rng)
    frozen_names = {"full": (), "macro": MICRO_GENES, "micro": MACRO_GENES}[cfg.scope]
    frozen = {gene_position(name): drawn[gene_position(name)] for name in frozen_names}
    for name, value in cfg.frozen_genes.items():
        position = gene_position(name)
        bound = table.bounds[position]
        if not 0 <= value < bound:
            raise ValueError(f"frozen_genes[{name}] = {value} is outside [0, {bound})")
        frozen[position] = int(value)
    return frozen


def _apply_frozen(enc: ArchitectureEncoding, frozen: Dict[int, int]) -> ArchitectureEncoding:
    for position, value in frozen.items():
        enc = enc.replace(position, value)
    return enc


def _score(scorer: Scorer, encodings: List[ArchitectureEncoding]) -> List[float]:
    # predictions keyed by position in `encodings`
    return [float(v) for v in scorer.predict_many(encodings)]


def init_population(cfg: SearchConfig, table: OperationTable, scorer: Scorer) -> SearchState:
    rng = np.random.default_rng(cfg.seed)
    frozen = resolve_frozen_genes(cfg, table)
    encodings = [_apply_frozen(sample_uniform(table, rng), frozen)
                 for _ in range(cfg.population_size)]
    population = [Individual(enc, pred, 0, i)
                  for i, (enc, pred) in enumerate(zip(encodings, _score(scorer, encodings)))]
    best = min(population, key=lambda ind: _rank_key(ind, scorer.minimize))
    return SearchState(generation=0, population=population, best_ever=best, rng=rng,
                       minimize=scorer.minimize, frozen=frozen, audit=list(population))


# --- Operators ------------------------------------------------------------------------

def two_point_crossover(p1: ArchitectureEncoding, p2: ArchitectureEncoding,
                        cuts: Tuple[int, int],
                        rng: Optional[np.random.Generator] = None
                        ) -> Tuple[ArchitectureEncoding, ArchitectureEncoding]:
    i, j = cuts
    if not 0 <= i < j <= len(p1):
        raise ValueError(f"Invalid cuts {cuts}: need 0 <= i < j <= {len(p1)}")
    a, b = p1.to_list(), p2.to_list()
    a[i:j], b[i:j] = b[i:j], a[i:j]
    return ArchitectureEncoding(tuple(a)), ArchitectureEncoding(tuple(b))


def _mutate_gene(y: float, upper: float, eta: float, u: float) -> float:
    # bounded polynomial perturbation on [0, upper]
    d1, d2 = y / upper, (upper - y) / upper
    power = 1.0 / (eta + 1.0)
    if u < 0.5:
        val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
        delta = val ** power - 1.0
    else:
        val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
        delta = 1.0 - val ** power
    return y + delta * upper


def polynomial_mutation(enc: ArchitectureEncoding, bounds: Sequence[int], p_m: float, eta: float,
                        rng: np.random.Generator,
                        frozen_positions: Sequence[int] = ()) -> ArchitectureEncoding:
    genes = enc.to_list()
    for position, bound in enumerate(bounds):
        if rng.random() >= p_m or position in frozen_positions or bound < 2:
            continue
        upper = float(bound - 1)
        mutated = _mutate_gene(float(genes[position]), upper, eta, rng.random())
        genes[position] = int(min(max(round(mutated), 0), bound - 1))
    return ArchitectureEncoding(tuple(genes))


def reproduce(state: SearchState, cfg: SearchConfig,
              table: OperationTable) -> List[ArchitectureEncoding]:
    rng = state.rng
    parents = [ind.encoding for ind in state.population]
    order = rng.permutation(len(parents))
    children = []
    for a, b in zip(order[0::2], order[1::2]):
        c1, c2 = parents[a], parents[b]
        if rng.random() < cfg.crossover_prob:
            cuts = tuple(int(c) for c in np.sort(rng.choice(len(c1) + 1, size=2, replace=False)))
            c1, c2 = two_point_crossover(c1, c2, cuts)
        for child in (c1, c2):
            children.append(polynomial_mutation(child, table.bounds, cfg.mutation_prob,
                                                cfg.mutation_eta, rng, tuple(state.frozen)))
    return children


def environmental_selection(parents: Sequence[Individual], offspring: Sequence[Individual],
                            n_p: int, minimize: bool) -> List[Individual]:
    """Best n_p of the merged pool; ties go to the earlier generation, then lower audit index."""
    pool = list(parents) + list(offspring)
    return sorted(pool, key=lambda ind: _rank_key(ind, minimize))[:n_p]


# --- Loop -----------------------------------------------------------------------------

def _history_row(state: SearchState) -> Dict:
    preds = np.asarray([ind.predicted for ind in state.population])
    best = min(state.population, key=lambda ind: _rank_key(ind, state.minimize))
    return {
        "generation": state.generation,
        "best_pred": float(best.predicted),
        "mean_pred": float(preds.mean()),
        "best_encoding": best.encoding.to_list(),
    }


def step_generation(state: SearchState, cfg: SearchConfig, table: OperationTable,
                    scorer: Scorer) -> SearchState:
    children = reproduce(state, cfg, table)
    generation = state.generation + 1
    start = len(state.audit)
    offspring = [Individual(enc, pred, generation, start + i)
                 for i, (enc, pred) in enumerate(zip(children, _score(scorer, children)))]
    state.audit.extend(offspring)
    if cfg.elitism:
        state.population = environmental_selection(state.population, offspring,
                                                   cfg.population_size, state.minimize)
    else:
        state.population = sorted(offspring, key=lambda ind: _rank_key(ind, state.minimize))
    state.generation = generation
    best = state.population[0]
    if _better(best, state.best_ever, state.minimize):
        state.best_ever = best
    return state


def run_search(cfg: SearchConfig, table: OperationTable,
               scorer: Scorer) -> Tuple[ArchitectureEncoding, SearchState, List[Dict]]:
    state = init_population(cfg, table, scorer)
    history = []
    for _ in range(cfg.generations):
        step_generation(state, cfg, table, scorer)
        history.append(_history_row(state))
    best = min(state.population, key=lambda ind: _rank_key(ind, state.minimize))
    return best.encoding, state, history


def retrain_best(best: ArchitectureEncoding, dataset: trainer.Dataset, task: str,
                 cfg: trainer.TrainConfig, metric_name: str = "acc",
                 model_config: ModelConfig = ModelConfig(),
                 checkpoint_path: Optional[Union[str, Path]] = None,
                 verbose: bool = False) -> trainer.FitnessRecord:
    """One full trainer run at the retraining budget; optionally checkpoints the weights."""
    record, model = trainer.fit_and_evaluate(best, dataset, task, cfg, metric_name,
                                             model_config=model_config, verbose=verbose)
    if checkpoint_path is not None and model is not None:
        save_checkpoint(model, checkpoint_path)
    return record


def operation_frequencies(population: Sequence[Individual], minimize: bool,
                          table: OperationTable = DEFAULT_TABLE,
                          top_fraction: float = 0.1) -> pd.DataFrame:
    """How often each operation appears among the top fraction of a population."""
    ranked = sorted(population, key=lambda ind: _rank_key(ind, minimize))
    top = ranked[:max(1, math.ceil(top_fraction * len(ranked)))]
    rows = []
    for position, (name, bound) in enumerate(zip(GENE_NAMES, table.bounds)):
        counts = np.bincount([ind.encoding[position] for ind in top], minlength=bound)
        for index, count in enumerate(counts):
            rows.append({
                "gene": name,
                "operation": table.option_label(position, index),
                "count": int(count),
                "frequency": count / len(top),
            })
    return pd.DataFrame(rows)
