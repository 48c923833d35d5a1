#!/usr/bin/env python3
"""
graph_datasets.py
-----------------

Synthetic desk-scale benchmarks and the JSON graph interchange format.

Input:
    - SbmConfig      : stochastic block model for node classification
    - GraphSetConfig : Erdos-Renyi graphs labelled by triangle density (graph classification)
    - JSON documents : {"n", "edges", "features", "node_labels", "graph_label", "masks"}
                       or {"graphs": [...], "splits": {"train", "val", "test"}}

Output:
    - GraphInstance (NC) with stratified 60/20/20 masks
    - GraphSet (GC) with stratified 60/20/20 index splits
"""

import json
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, model_validator
from sklearn.model_selection import train_test_split

from graph_core import SPLIT_NAMES, GraphInstance, graphs_equal, triangle_count


class GraphSchemaError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"Schema violation at '{path}': {message}")


# --- Configs --------------------------------------------------------------------------

class SbmConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    communities: PositiveInt = 3
    nodes_per_community: PositiveInt = 20
    p_in: float = Field(default=0.3, ge=0.0, le=1.0)
    p_out: float = Field(default=0.02, ge=0.0, le=1.0)
    feature_dim: PositiveInt = 8
    feature_noise: float = Field(default=0.5, ge=0.0)
    seed: int = 0
    allow_unlearnable: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.p_out > self.p_in and not self.allow_unlearnable:
            raise ValueError(f"p_out ({self.p_out}) > p_in ({self.p_in}); "
                             "set allow_unlearnable to keep it")
        if self.feature_dim < self.communities:
            raise ValueError(f"feature_dim ({self.feature_dim}) must hold the "
                             f"{self.communities}-way community indicator")
        if self.nodes_per_community < 5:
            raise ValueError("Need at least 5 nodes per community for a 60/20/20 split")
        return self


class GraphSetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_graphs: PositiveInt = 60
    nodes_min: PositiveInt = 8
    nodes_max: PositiveInt = 14
    edge_prob: float = Field(default=0.3, ge=0.0, le=1.0)
    # E[triangles / C(n,3)] = p^3 for G(n, p)
    triangle_density_threshold: float = Field(default=0.027, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.nodes_min > self.nodes_max:
            raise ValueError(f"nodes_min ({self.nodes_min}) > nodes_max ({self.nodes_max})")
        if self.num_graphs < 5:
            raise ValueError("Need at least 5 graphs for a 60/20/20 split")
        return self


@dataclass(frozen=True, eq=False)
class GraphSet:
    graphs: List[GraphInstance]
    splits: Dict[str, List[int]]

    def labels(self) -> np.ndarray:
        return np.asarray([g.graph_label for g in self.graphs])


Dataset = Union[GraphInstance, GraphSet]


# --- Generators -----------------------------------------------------------------------

def _stratified_split(items: np.ndarray, labels: np.ndarray,
                      seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """60/20/20 split, stratified when every class has enough members."""
    _, counts = np.unique(labels, return_counts=True)
    stratify = labels if counts.min() >= 5 else None
    train, rest, _, rest_labels = train_test_split(
        items, labels, test_size=0.4, stratify=stratify, random_state=seed
    )
    val, test = train_test_split(
        rest, test_size=0.5, stratify=rest_labels if stratify is not None else None,
        random_state=seed,
    )
    return np.sort(train), np.sort(val), np.sort(test)


def generate_sbm(cfg: SbmConfig = SbmConfig()) -> GraphInstance:
    rng = np.random.default_rng(cfg.seed)
    labels = np.repeat(np.arange(cfg.communities), cfg.nodes_per_community)
    n = len(labels)

    same = labels[:, None] == labels[None, :]
    probs = np.where(same, cfg.p_in, cfg.p_out)
    draws = rng.random((n, n)) < probs
    u, v = np.nonzero(np.triu(draws, k=1))
    edges = np.stack([u, v], axis=1)

    features = np.zeros((n, cfg.feature_dim))
    features[np.arange(n), labels] = 1.0
    features += rng.normal(0.0, cfg.feature_noise, size=features.shape)

    train, val, test = _stratified_split(np.arange(n), labels, cfg.seed)
    masks = {name: np.isin(np.arange(n), idx) for name, idx in zip(SPLIT_NAMES, (train, val, test))}
    return GraphInstance(n=n, edges=edges, features=features, node_labels=labels,
                         split_masks=masks)


def triangle_density(g: GraphInstance) -> float:
    triples = comb(g.n, 3)
    return triangle_count(g) / triples if triples else 0.0


def triangle_label(g: GraphInstance, threshold: float) -> int:
    return int(triangle_density(g) > threshold)


def degree_one_hot(edges: np.ndarray, n: int, width: int) -> np.ndarray:
    deg = np.bincount(edges.reshape(-1), minlength=n) if len(edges) else np.zeros(n, dtype=int)
    features = np.zeros((n, width))
    features[np.arange(n), np.minimum(deg, width - 1)] = 1.0
    return features


def generate_graph_set(cfg: GraphSetConfig = GraphSetConfig()) -> GraphSet:
    rng = np.random.default_rng(cfg.seed)
    graphs = []
    for _ in range(cfg.num_graphs):
        n = int(rng.integers(cfg.nodes_min, cfg.nodes_max + 1))
        u, v = np.nonzero(np.triu(rng.random((n, n)) < cfg.edge_prob, k=1))
        edges = np.stack([u, v], axis=1)
        g = GraphInstance(n=n, edges=edges, features=degree_one_hot(edges, n, cfg.nodes_max))
        graphs.append(GraphInstance(n=n, edges=edges, features=g.features,
                                    graph_label=triangle_label(g, cfg.triangle_density_threshold)))

    labels = np.asarray([g.graph_label for g in graphs])
    parts = _stratified_split(np.arange(len(graphs)), labels, cfg.seed)
    splits = {name: idx.tolist() for name, idx in zip(SPLIT_NAMES, parts)}
    return GraphSet(graphs=graphs, splits=splits)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if isinstance(a, GraphSet) != isinstance(b, GraphSet):
        return False
    if isinstance(a, GraphInstance):
        return graphs_equal(a, b)
    return (a.splits == b.splits and len(a.graphs) == len(b.graphs)
            and all(graphs_equal(x, y) for x, y in zip(a.graphs, b.graphs)))


# --- JSON interchange -----------------------------------------------------------------

class GraphDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int
    edges: List[Tuple[int, int]] = []
    features: List[List[float]]
    node_labels: Optional[List[int]] = None
    graph_label: Optional[float] = None
    masks: Optional[Dict[str, List[bool]]] = None


class GraphSetDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    graphs: List[GraphDocument]
    splits: Dict[str, List[int]]


def _schema_error(exc: ValidationError) -> GraphSchemaError:
    first = exc.errors()[0]
    return GraphSchemaError(".".join(str(p) for p in first["loc"]), first["msg"])


def _to_document(g: GraphInstance) -> Dict:
    doc = {
        "n": g.n,
        "edges": g.edges.tolist(),
        "features": g.features.tolist(),
    }
    if g.node_labels is not None:
        doc["node_labels"] = g.node_labels.tolist()
    if g.graph_label is not None:
        doc["graph_label"] = g.graph_label
    if g.split_masks is not None:
        doc["masks"] = {k: m.tolist() for k, m in g.split_masks.items()}
    return doc


def _from_document(doc: GraphDocument) -> GraphInstance:
    width = len(doc.features[0]) if doc.features else 0
    return GraphInstance(
        n=doc.n,
        edges=np.asarray(doc.edges, dtype=np.int64).reshape(-1, 2),
        features=np.asarray(doc.features, dtype=np.float64).reshape(len(doc.features), width),
        node_labels=None if doc.node_labels is None else np.asarray(doc.node_labels),
        graph_label=doc.graph_label,
        split_masks=None if doc.masks is None
        else {k: np.asarray(m, dtype=bool) for k, m in doc.masks.items()},
    )


def save_graph_json(g: GraphInstance, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_to_document(g)))
    return path


def load_graph_json(path: Union[str, Path]) -> GraphInstance:
    try:
        doc = GraphDocument.model_validate(json.loads(Path(path).read_text()))
    except ValidationError as exc:
        raise _schema_error(exc) from exc
    return _from_document(doc)


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    if isinstance(dataset, GraphInstance):
        return save_graph_json(dataset, path)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "graphs": [_to_document(g) for g in dataset.graphs],
        "splits": dataset.splits,
    }))
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or "graphs" not in raw:
        try:
            return _from_document(GraphDocument.model_validate(raw))
        except ValidationError as exc:
            raise _schema_error(exc) from exc
    try:
        doc = GraphSetDocument.model_validate(raw)
    except ValidationError as exc:
        raise _schema_error(exc) from exc
    return GraphSet(graphs=[_from_document(g) for g in doc.graphs], splits=doc.splits)
