#!/usr/bin/env python3
"""
gt_model.py
-----------

Desk-scale graph Transformer assembled from an ArchitectureSpec.

Each block follows
    A_h   = SoftMax( X Q_h (X K_h)^T / sqrt(d) + B )
    O     = ||_h (A_h X V_h) W_O + X
    X'    = GELU(O W_1 + b_1) W_2 + b_2
where B is one attention-bias matrix (SE + PEM + Mask terms, additive) shared by every
head and block. Graph structure also enters through the input embedding (LE / SVD
vectors concatenated to the features before the input projection, degree embeddings
added after it), through the GNN block of the chosen combination mode, and through
the block wiring of the chosen topology.

Input:
    - ArchitectureSpec, ModelScale, ModelConfig, seed
    - GraphTensors from precompute(graph, config)

Output:
    - ForwardTrace (block inputs/outputs, attention matrices, final node states, output)
    - loss and exact reverse-mode gradients for node (NC) or graph (GC) tasks
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

import graph_core
from graph_core import GraphInstance
from search_space import ArchitectureSpec

MASK_VALUE = -1e9
DTYPE = torch.float64
CHECKPOINT_VERSION = 1


class DimensionMismatchError(ValueError):
    pass


class GnnBlockMissingError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


class NonFiniteActivationError(RuntimeError):
    def __init__(self, block_index: int):
        self.block_index = block_index
        super().__init__(f"Non-finite activation in block {block_index}")


class NonFiniteLossError(RuntimeError):
    pass


class ModelScale(BaseModel):
    model_config = ConfigDict(frozen=True)

    layers: PositiveInt
    hidden_dim: PositiveInt
    heads: PositiveInt
    head_dim: PositiveInt
    ffn_dim: PositiveInt


SCALE_PRESETS: Dict[str, ModelScale] = {
    "Mini": ModelScale(layers=3, hidden_dim=64, heads=4, head_dim=5, ffn_dim=64),
    "Small": ModelScale(layers=6, hidden_dim=80, heads=8, head_dim=10, ffn_dim=80),
    "Middle": ModelScale(layers=12, hidden_dim=80, heads=8, head_dim=10, ffn_dim=80),
    "Large": ModelScale(layers=12, hidden_dim=512, heads=32, head_dim=16, ffn_dim=512),
    # test preset, not part of the search space
    "Desk": ModelScale(layers=2, hidden_dim=8, heads=2, head_dim=4, ffn_dim=16),
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k_le: int = Field(default=4, ge=0)
    k_svd: int = Field(default=4, ge=0)
    mask_threshold: int = Field(default=2, ge=0)
    gcnii_alpha: float = Field(default=0.1, ge=0.0, le=1.0)
    max_distance_bucket: int = Field(default=8, ge=1)
    max_degree: int = Field(default=32, ge=1)
    max_common_neighbors: int = Field(default=8, ge=1)
    pem_dim: int = Field(default=4, ge=1)
    gin_eps: float = 0.0
    scale_override: Optional[str] = None


def resolve_scale(spec: ArchitectureSpec, config: ModelConfig) -> ModelScale:
    name = config.scale_override or spec.scale
    if name not in SCALE_PRESETS:
        raise ValueError(f"Unknown model scale preset '{name}'")
    return SCALE_PRESETS[name]


# --- Graph precomputation -------------------------------------------------------------

@dataclass
class GraphTensors:
    n: int
    features: torch.Tensor
    adjacency: torch.Tensor
    le: torch.Tensor
    svd: torch.Tensor
    degree: torch.Tensor
    dist: torch.Tensor
    dist_bucket: torch.Tensor
    common_bucket: torch.Tensor
    mask_bias: torch.Tensor


def precompute(g: GraphInstance, config: ModelConfig) -> GraphTensors:
    """Embeddings and distance tables for one graph, zero-padded to the configured widths."""
    n = g.n

    le = np.zeros((n, config.k_le))
    k_le = min(config.k_le, n - 1, n - graph_core.trivial_eigenvalue_count(g))
    if k_le > 0:
        le[:, :k_le] = graph_core.normalized_laplacian_eig(g, k_le).vectors

    svd = np.zeros((n, 2 * config.k_svd))
    k_svd = min(config.k_svd, n)
    if k_svd > 0:
        emb = graph_core.adjacency_svd(g, k_svd)
        svd[:, :k_svd] = emb.left
        svd[:, config.k_svd:config.k_svd + k_svd] = emb.right

    degree, _ = graph_core.degree_vectors(g)
    distances = graph_core.bfs_all_pairs(g)
    common = graph_core.common_neighbor_counts(g)

    within = distances.reachable & (distances.dist <= config.mask_threshold)
    np.fill_diagonal(within, True)
    mask_bias = np.where(within, 0.0, MASK_VALUE)

    return GraphTensors(
        n=n,
        features=torch.as_tensor(g.features, dtype=DTYPE),
        adjacency=torch.as_tensor(g.adjacency(), dtype=DTYPE),
        le=torch.as_tensor(le, dtype=DTYPE),
        svd=torch.as_tensor(svd, dtype=DTYPE),
        degree=torch.as_tensor(np.minimum(degree, config.max_degree)),
        dist=torch.as_tensor(distances.dist),
        dist_bucket=torch.as_tensor(distances.buckets(config.max_distance_bucket)),
        common_bucket=torch.as_tensor(np.minimum(common, config.max_common_neighbors)),
        mask_bias=torch.as_tensor(mask_bias, dtype=DTYPE),
    )


# --- GNN blocks -----------------------------------------------------------------------

def _closed_neighborhood_softmax(scores: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
    closed = (adj + torch.eye(adj.shape[0], dtype=adj.dtype)) > 0
    return torch.softmax(scores.masked_fill(~closed, MASK_VALUE), dim=-1)


class GCNBlock(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(d, d, bias=False)
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x, adj):
        a_hat = adj + torch.eye(adj.shape[0], dtype=adj.dtype)
        inv_sqrt = a_hat.sum(dim=1).rsqrt()
        norm = inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]
        return F.relu(norm @ self.linear(x) + self.bias)


class SAGEBlock(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(2 * d, d)

    def forward(self, x, adj):
        deg = adj.sum(dim=1, keepdim=True)
        neighbor_mean = (adj @ x) / deg.clamp(min=1.0)
        return F.relu(self.linear(torch.cat([x, neighbor_mean], dim=1)))


class GATBlock(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(d, d, bias=False)
        self.att_src = nn.Parameter(torch.zeros(d))
        self.att_dst = nn.Parameter(torch.zeros(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def attention_weights(self, x, adj):
        h = self.linear(x)
        scores = F.leaky_relu((h @ self.att_src)[:, None] + (h @ self.att_dst)[None, :], 0.2)
        return _closed_neighborhood_softmax(scores, adj), h

    def forward(self, x, adj):
        alpha, h = self.attention_weights(x, adj)
        return F.relu(alpha @ h + self.bias)


class GATv2Block(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.source = nn.Linear(d, d, bias=False)
        self.target = nn.Linear(d, d, bias=False)
        self.att = nn.Parameter(torch.zeros(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def attention_weights(self, x, adj):
        hs, ht = self.source(x), self.target(x)
        scores = F.leaky_relu(hs[:, None, :] + ht[None, :, :], 0.2) @ self.att
        return _closed_neighborhood_softmax(scores, adj), ht

    def forward(self, x, adj):
        alpha, ht = self.attention_weights(x, adj)
        return F.relu(alpha @ ht + self.bias)


class GINBlock(nn.Module):
    def __init__(self, d: int, eps: float):
        super().__init__()
        self.eps = eps
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))

    def forward(self, x, adj):
        return self.mlp((1.0 + self.eps) * x + adj @ x)


def _make_gnn_block(name: str, d: int, config: ModelConfig) -> nn.Module:
    if name == "GCN":
        return GCNBlock(d)
    if name == "SAGE":
        return SAGEBlock(d)
    if name == "GAT":
        return GATBlock(d)
    if name == "GATv2":
        return GATv2Block(d)
    if name == "GIN":
        return GINBlock(d, config.gin_eps)
    raise GnnBlockMissingError(f"No GNN block named '{name}'")


# --- Transformer block ----------------------------------------------------------------

class TransformerBlock(nn.Module):
    def __init__(self, scale: ModelScale):
        super().__init__()
        d, width = scale.hidden_dim, scale.heads * scale.head_dim
        self.heads, self.head_dim, self.scaling = scale.heads, scale.head_dim, math.sqrt(d)
        self.query = nn.Linear(d, width, bias=False)
        self.key = nn.Linear(d, width, bias=False)
        self.value = nn.Linear(d, width, bias=False)
        self.out = nn.Linear(width, d, bias=False)
        self.ffn_in = nn.Linear(d, scale.ffn_dim)
        self.ffn_out = nn.Linear(scale.ffn_dim, d)

    def _split(self, t):
        return t.view(t.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def attend(self, x, bias, dropout: nn.Module) -> Tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / self.scaling + bias
        scores = scores - scores.amax(dim=-1, keepdim=True)
        attn = torch.softmax(scores, dim=-1)
        heads = (dropout(attn) @ v).transpose(0, 1).reshape(x.shape[0], -1)
        return self.out(heads) + x, attn

    def feed_forward(self, o, dropout: nn.Module):
        return self.ffn_out(dropout(F.gelu(self.ffn_in(o))))


# --- Model ----------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    initial: torch.Tensor
    block_inputs: List[torch.Tensor] = field(default_factory=list)
    block_outputs: List[torch.Tensor] = field(default_factory=list)
    attention: List[torch.Tensor] = field(default_factory=list)
    final: Optional[torch.Tensor] = None
    output: Optional[torch.Tensor] = None


def _fan_in(module: nn.Module, param: torch.Tensor) -> int:
    if isinstance(module, nn.Linear):
        return module.in_features
    if isinstance(module, nn.Embedding):
        return module.embedding_dim
    return param.shape[-1]


class GraphTransformerModel(nn.Module):
    def __init__(self, spec: ArchitectureSpec, scale: ModelScale, in_dim: int, out_dim: int,
                 task: str = "NC", config: ModelConfig = ModelConfig()):
        super().__init__()
        if task not in ("NC", "GC"):
            raise ValueError(f"Unknown task '{task}'")
        self.spec, self.scale, self.config, self.task = spec, scale, config, task
        self.in_dim, self.out_dim = in_dim, out_dim
        d, L = scale.hidden_dim, scale.layers

        # registration order fixes the initialization stream; keep it stable
        proj_in = in_dim
        if "LE" in spec.pe_set:
            proj_in += config.k_le
        if "SVD" in spec.pe_set:
            proj_in += 2 * config.k_svd
        self.input_proj = nn.Linear(proj_in, d, bias=False)
        if "DC" in spec.pe_set:
            self.degree_in = nn.Embedding(config.max_degree + 1, d)
            self.degree_out = nn.Embedding(config.max_degree + 1, d)
        if "SE" in spec.am_set:
            self.spatial_bias = nn.Embedding(config.max_distance_bucket + 2, 1)
        if "PEM" in spec.am_set:
            self.pem_distance = nn.Embedding(config.max_distance_bucket + 2, config.pem_dim)
            self.pem_common = nn.Embedding(config.max_common_neighbors + 1, config.pem_dim)
            self.pem_b = nn.Parameter(torch.zeros(2 * config.pem_dim))

        self.blocks = nn.ModuleList(TransformerBlock(scale) for _ in range(L))
        if spec.has_gnn:
            self.gnn_blocks = nn.ModuleList(
                _make_gnn_block(spec.gnn_block, d, config) for _ in range(L)
            )
        self.readout = nn.Linear(d, out_dim)
        if spec.topology == "JK" and L > 1:
            self.jk_proj = nn.Linear(L * d, d, bias=False)

        self.attention_dropout = nn.Dropout(0.0)
        self.ffn_dropout = nn.Dropout(0.0)
        self.gnn_dropout = nn.Dropout(0.0)
        self.to(DTYPE)

    def reset_parameters(self, generator: torch.Generator):
        """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor, in registration order."""
        with torch.no_grad():
            for module in self.modules():
                for _, param in module.named_parameters(recurse=False):
                    bound = 1.0 / math.sqrt(_fan_in(module, param))
                    param.uniform_(-bound, bound, generator=generator)

    def set_dropout(self, attention: float = 0.0, ffn: float = 0.0, gnn: float = 0.0):
        self.attention_dropout.p = attention
        self.ffn_dropout.p = ffn
        self.gnn_dropout.p = gnn

    # -- graph-aware strategies --

    def apply_positional_embeddings(self, pre: GraphTensors) -> torch.Tensor:
        parts = [pre.features]
        if "LE" in self.spec.pe_set:
            parts.append(pre.le)
        if "SVD" in self.spec.pe_set:
            parts.append(pre.svd)
        x = torch.cat(parts, dim=1)
        if x.shape[1] != self.input_proj.in_features:
            raise DimensionMismatchError(
                f"Input width {x.shape[1]} does not match projection width "
                f"{self.input_proj.in_features}"
            )
        h = self.input_proj(x)
        if "DC" in self.spec.pe_set:
            h = h + self.degree_in(pre.degree) + self.degree_out(pre.degree)
        return h

    def attention_bias(self, pre: GraphTensors) -> torch.Tensor:
        bias = torch.zeros(pre.n, pre.n, dtype=DTYPE)
        if "SE" in self.spec.am_set:
            bias = bias + self.spatial_bias(pre.dist_bucket).squeeze(-1)
        if "PEM" in self.spec.am_set:
            psi = torch.cat(
                [self.pem_distance(pre.dist_bucket), self.pem_common(pre.common_bucket)], dim=-1
            )
            bias = bias + psi @ self.pem_b
        if "Mask" in self.spec.am_set:
            bias = bias + pre.mask_bias
        return bias

    # -- blocks --

    def transformer_block_forward(self, block_index: int, x: torch.Tensor,
                                  bias: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        block = self.blocks[block_index]
        o, attn = block.attend(x, bias, self.attention_dropout)
        out = block.feed_forward(o, self.ffn_dropout)
        if not torch.isfinite(out).all():
            raise NonFiniteActivationError(block_index)
        return out, attn

    def gnn_block_forward(self, block_index: int, x: torch.Tensor,
                          pre: GraphTensors) -> torch.Tensor:
        if not self.spec.has_gnn:
            raise GnnBlockMissingError("Architecture has gnn_block = None")
        return self.gnn_dropout(self.gnn_blocks[block_index](x, pre.adjacency))

    def _graph_transformer_block(self, block_index, x, bias, pre):
        mode = self.spec.combination
        if not self.spec.has_gnn or mode == "Before":
            return self.transformer_block_forward(block_index, x, bias)
        if mode == "Alternate":
            return self.transformer_block_forward(
                block_index, self.gnn_block_forward(block_index, x, pre), bias
            )
        # Parallel: attention and GNN read the same input, merged before the FFN
        block = self.blocks[block_index]
        o, attn = block.attend(x, bias, self.attention_dropout)
        o = o + self.gnn_block_forward(block_index, x, pre)
        out = block.feed_forward(o, self.ffn_dropout)
        if not torch.isfinite(out).all():
            raise NonFiniteActivationError(block_index)
        return out, attn

    def assemble_forward(self, pre: GraphTensors) -> ForwardTrace:
        x0 = self.apply_positional_embeddings(pre)
        bias = self.attention_bias(pre)
        if self.spec.has_gnn and self.spec.combination == "Before":
            for l in range(self.scale.layers):
                x0 = self.gnn_block_forward(l, x0, pre)

        trace = ForwardTrace(initial=x0)
        topology, alpha = self.spec.topology, self.config.gcnii_alpha
        state, previous = x0, torch.zeros_like(x0)
        for l in range(self.scale.layers):
            inp = state + previous if topology == "Residual" else state
            out, attn = self._graph_transformer_block(l, inp, bias, pre)
            if topology == "GCNII":
                out = alpha * x0 + (1.0 - alpha) * out
            trace.block_inputs.append(inp)
            trace.block_outputs.append(out)
            trace.attention.append(attn)
            previous, state = state, out

        # one block: its output is the fused state
        if topology == "JK" and self.scale.layers > 1:
            state = self.jk_proj(torch.cat(trace.block_outputs, dim=1))
        trace.final = state
        if self.task == "NC":
            trace.output = self.readout(state)
        else:
            trace.output = self.readout(state.mean(dim=0)).squeeze(-1)
        return trace

    def forward(self, pre: GraphTensors) -> torch.Tensor:
        return self.assemble_forward(pre).output


def build_model(spec: ArchitectureSpec, scale: ModelScale, init_rng: Union[int, torch.Generator],
                in_dim: int, out_dim: int, task: str = "NC",
                config: ModelConfig = ModelConfig()) -> GraphTransformerModel:
    if isinstance(init_rng, int):
        init_rng = torch.Generator().manual_seed(init_rng)
    model = GraphTransformerModel(spec, scale, in_dim, out_dim, task, config)
    model.reset_parameters(init_rng)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- Loss and gradients ---------------------------------------------------------------

def compute_loss(model: GraphTransformerModel, pre: GraphTensors, targets,
                 mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    output = model(pre)
    if model.task == "NC":
        labels = torch.as_tensor(targets, dtype=torch.long)
        mask = torch.ones(pre.n, dtype=torch.bool) if mask is None else torch.as_tensor(mask)
        if not mask.any():
            raise EmptyMaskError("Loss mask selects no nodes")
        loss = F.cross_entropy(output[mask], labels[mask])
    else:
        loss = (output - torch.as_tensor(float(targets), dtype=DTYPE)) ** 2
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"Loss is {loss.item()}")
    return loss


def loss_and_gradients(model: GraphTransformerModel, pre: GraphTensors, targets,
                       mask: Optional[torch.Tensor] = None,
                       training: bool = False) -> Tuple[float, Dict[str, torch.Tensor]]:
    model.train(training)
    loss = compute_loss(model, pre, targets, mask)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return loss.item(), {
        name: torch.zeros_like(p) if g is None else g
        for name, p, g in zip(names, params, grads)
    }


# --- Checkpoints ----------------------------------------------------------------------

def save_checkpoint(model: GraphTransformerModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "scale": model.scale.model_dump(),
        "model_config": model.config.model_dump(),
        "task": model.task,
        "in_dim": model.in_dim,
        "out_dim": model.out_dim,
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> GraphTransformerModel:
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {payload.get('format_version')}")
    s = payload["spec"]
    spec = ArchitectureSpec(s["topology"], s["combination"], s["gnn_block"],
                            frozenset(s["pe_set"]), frozenset(s["am_set"]), s["scale"])
    model = GraphTransformerModel(spec, ModelScale(**payload["scale"]), payload["in_dim"],
                                  payload["out_dim"], payload["task"],
                                  ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model
