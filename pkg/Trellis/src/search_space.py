#!/usr/bin/env python3
"""
search_space.py
---------------

Unified macro/micro graph-Transformer search space and its integer encoding.

An architecture is a fixed 6-gene chromosome; each gene is the index of the chosen
operation in its row of the operation table:

    gene 0  topology      Vanilla, JK, Residual, GCNII
    gene 1  combination   Before, Alternate, Parallel
    gene 2  gnn           GCN, SAGE, GAT, GATv2, GIN, None
    gene 3  pe            power set of {LE, SVD, DC}    (index = bit mask, LE = bit 0)
    gene 4  am            power set of {PEM, SE, Mask}  (index = bit mask, PEM = bit 0)
    gene 5  scale         Mini, Small, Middle, Large

Input:
    - ArchitectureSpec (named operations) or ArchitectureEncoding (6 ints)

Output:
    - the other representation; uniform samples; the full 18,432-point enumeration
"""

import itertools
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterator, List, Sequence, Tuple

import numpy as np


GENE_NAMES = ("topology", "combination", "gnn", "pe", "am", "scale")
MACRO_GENES = ("topology", "combination")
MICRO_GENES = ("gnn", "pe", "am", "scale")

PE_BASE = ("LE", "SVD", "DC")
AM_BASE = ("PEM", "SE", "Mask")


class UnknownOptionError(ValueError):
    def __init__(self, field: str, value):
        self.field = field
        self.value = value
        super().__init__(f"Unknown option {value!r} for field '{field}'")


class GeneBoundsError(ValueError):
    def __init__(self, position: int, value: int, bound: int):
        self.position = position
        self.value = value
        self.bound = bound
        super().__init__(
            f"Gene {position} ({GENE_NAMES[position] if position < len(GENE_NAMES) else '?'}) "
            f"= {value} is outside [0, {bound})"
        )


def power_set(base: Sequence[str]) -> Tuple[FrozenSet[str], ...]:
    """All subsets of `base`, index i holding the subset whose bit k is set iff base[k] is in it."""
    return tuple(
        frozenset(name for k, name in enumerate(base) if mask >> k & 1)
        for mask in range(2 ** len(base))
    )


@dataclass(frozen=True)
class OperationTable:
    topology_options: Tuple[str, ...] = ("Vanilla", "JK", "Residual", "GCNII")
    combination_options: Tuple[str, ...] = ("Before", "Alternate", "Parallel")
    gnn_options: Tuple[str, ...] = ("GCN", "SAGE", "GAT", "GATv2", "GIN", "None")
    pe_options: Tuple[FrozenSet[str], ...] = power_set(PE_BASE)
    am_options: Tuple[FrozenSet[str], ...] = power_set(AM_BASE)
    scale_options: Tuple[str, ...] = ("Mini", "Small", "Middle", "Large")

    def rows(self) -> Tuple[tuple, ...]:
        return (
            self.topology_options,
            self.combination_options,
            self.gnn_options,
            self.pe_options,
            self.am_options,
            self.scale_options,
        )

    @property
    def bounds(self) -> Tuple[int, ...]:
        return tuple(len(row) for row in self.rows())

    @property
    def size(self) -> int:
        return int(np.prod(self.bounds))

    def option_label(self, position: int, index: int) -> str:
        option = self.rows()[position][index]
        if isinstance(option, frozenset):
            base = PE_BASE if position == 3 else AM_BASE
            members = [name for name in base if name in option]
            return "[" + ",".join(members) + "]" if members else "None"
        return option

    def to_dict(self) -> Dict[str, List]:
        """Self-describing form used in run manifests."""
        return {
            name: [self.option_label(pos, i) for i in range(bound)]
            for pos, (name, bound) in enumerate(zip(GENE_NAMES, self.bounds))
        }


DEFAULT_TABLE = OperationTable()


@dataclass(frozen=True)
class ArchitectureEncoding:
    genes: Tuple[int, ...]

    def __post_init__(self):
        genes = tuple(int(g) for g in self.genes)
        if len(genes) != len(GENE_NAMES):
            raise ValueError(f"Encoding needs {len(GENE_NAMES)} genes, got {len(genes)}")
        if any(g < 0 for g in genes):
            raise ValueError(f"Genes must be non-negative: {list(genes)}")
        object.__setattr__(self, "genes", genes)

    def __iter__(self):
        return iter(self.genes)

    def __getitem__(self, i):
        return self.genes[i]

    def __len__(self):
        return len(self.genes)

    def to_list(self) -> List[int]:
        return list(self.genes)

    def replace(self, position: int, value: int) -> "ArchitectureEncoding":
        genes = list(self.genes)
        genes[position] = value
        return ArchitectureEncoding(tuple(genes))


@dataclass(frozen=True)
class ArchitectureSpec:
    topology: str
    combination: str
    gnn_block: str
    pe_set: FrozenSet[str]
    am_set: FrozenSet[str]
    scale: str

    def __post_init__(self):
        object.__setattr__(self, "pe_set", frozenset(self.pe_set))
        object.__setattr__(self, "am_set", frozenset(self.am_set))

    @property
    def has_gnn(self) -> bool:
        return self.gnn_block != "None"

    def describe(self) -> List[str]:
        """One line per search-space row, in table order."""
        pe = ",".join(n for n in PE_BASE if n in self.pe_set) or "None"
        am = ",".join(n for n in AM_BASE if n in self.am_set) or "None"
        return [
            f"Topology Design       {self.topology}",
            f"Combination Mode      {self.combination}",
            f"GNN Block             {self.gnn_block}",
            f"Positional Embedding  {pe}",
            f"Attention Matrix      {am}",
            f"Model Scale           {self.scale}",
        ]

    def to_dict(self) -> Dict:
        return {
            "topology": self.topology,
            "combination": self.combination,
            "gnn_block": self.gnn_block,
            "pe_set": sorted(self.pe_set),
            "am_set": sorted(self.am_set),
            "scale": self.scale,
        }


def validate_encoding(enc: ArchitectureEncoding, table: OperationTable = DEFAULT_TABLE) -> None:
    for position, (value, bound) in enumerate(zip(enc.genes, table.bounds)):
        if value >= bound:
            raise GeneBoundsError(position, value, bound)


def encode(spec: ArchitectureSpec, table: OperationTable = DEFAULT_TABLE) -> ArchitectureEncoding:
    values = (
        ("topology", spec.topology, table.topology_options),
        ("combination", spec.combination, table.combination_options),
        ("gnn_block", spec.gnn_block, table.gnn_options),
        ("pe_set", frozenset(spec.pe_set), table.pe_options),
        ("am_set", frozenset(spec.am_set), table.am_options),
        ("scale", spec.scale, table.scale_options),
    )
    genes = []
    for field, value, options in values:
        if value not in options:
            raise UnknownOptionError(field, value)
        genes.append(options.index(value))
    return ArchitectureEncoding(tuple(genes))


def decode(enc: ArchitectureEncoding, table: OperationTable = DEFAULT_TABLE) -> ArchitectureSpec:
    validate_encoding(enc, table)
    topology, combination, gnn, pe, am, scale = (row[g] for row, g in zip(table.rows(), enc.genes))
    return ArchitectureSpec(topology, combination, gnn, pe, am, scale)


def sample_uniform(table: OperationTable, rng: np.random.Generator) -> ArchitectureEncoding:
    return ArchitectureEncoding(tuple(int(rng.integers(0, b)) for b in table.bounds))


def enumerate_all(table: OperationTable = DEFAULT_TABLE) -> Iterator[ArchitectureEncoding]:
    for genes in itertools.product(*(range(b) for b in table.bounds)):
        yield ArchitectureEncoding(genes)


def gene_position(name: str) -> int:
    if name not in GENE_NAMES:
        raise UnknownOptionError("gene", name)
    return GENE_NAMES.index(name)
