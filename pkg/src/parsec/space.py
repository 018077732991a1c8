"""Cell search space: configuration, architecture samples, enumeration, genotype text."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

CELL_TYPES = ("normal", "reduction")

PAPER7 = (
    "identity",
    "avg_pool_3x3",
    "max_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
TOY = ("identity", "negate", "scale2")

OP_SETS = {"paper7": PAPER7, "toy": TOY}

DEFAULT_ENUMERATION_CAP = 10**6


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceConfig:
    N: int = 4
    P: int = 7
    op_set: str = "paper7"

    def __post_init__(self):
        if self.N < 1 or self.P < 1:
            raise SpaceError(f"need N >= 1 and P >= 1, got N={self.N} P={self.P}")
        if self.op_set == "paper7" and self.P != 7:
            raise SpaceError(f"op_set 'paper7' has exactly 7 primitives, got P={self.P}")
        if self.op_set == "toy" and self.P > len(TOY):
            raise SpaceError(f"op_set 'toy' has at most {len(TOY)} primitives, got P={self.P}")
        if self.op_set not in OP_SETS and self.op_set != "indexed":
            raise SpaceError(f"unknown op_set {self.op_set!r}")

    @property
    def op_names(self) -> tuple[str, ...]:
        if self.op_set == "indexed":
            return tuple(f"op{i}" for i in range(self.P))
        return OP_SETS[self.op_set][: self.P]

    @property
    def slots_per_cell(self) -> int:
        return 2 * self.N

    def slot_sizes(self) -> list[int]:
        """Category counts of every slot of one cell, node-major."""
        return [slot_cardinality(self, n) for n in range(1, self.N + 1) for _ in range(2)]

    def to_dict(self) -> dict:
        return {"N": self.N, "P": self.P, "op_set": self.op_set}


class PairChoice(NamedTuple):
    input_index: int
    op_index: int


@dataclass(frozen=True)
class CellSample:
    choices: tuple[PairChoice, ...]

    def node(self, n: int) -> tuple[PairChoice, PairChoice]:
        return self.choices[2 * (n - 1)], self.choices[2 * (n - 1) + 1]


@dataclass(frozen=True)
class ArchSample:
    normal: CellSample
    reduction: CellSample

    def cell(self, kind: str) -> CellSample:
        return self.normal if kind == "normal" else self.reduction

    def category_indices(self, P: int) -> tuple[int, ...]:
        """Flat per-slot category indices (normal slots first)."""
        return tuple(c.input_index * P + c.op_index for c in self.normal.choices + self.reduction.choices)

    @classmethod
    def from_category_indices(cls, indices, P: int) -> "ArchSample":
        pairs = [PairChoice(int(i) // P, int(i) % P) for i in indices]
        half = len(pairs) // 2
        return cls(CellSample(tuple(pairs[:half])), CellSample(tuple(pairs[half:])))


class Violation(NamedTuple):
    cell: str
    node: int
    slot: int
    message: str


def slot_cardinality(config: SpaceConfig, node: int) -> int:
    """Number of (input, op) categories for one slot of `node` (1-based)."""
    if not 1 <= node <= config.N:
        raise SpaceError(f"node {node} out of range [1, {config.N}]")
    return (node + 1) * config.P


def space_size(config: SpaceConfig) -> int:
    """Architectures per cell type: prod_n (P * (n + 1))**2."""
    return math.prod((config.P * (n + 1)) ** 2 for n in range(1, config.N + 1))


def joint_space_size(config: SpaceConfig) -> int:
    return space_size(config) ** 2


def validate(sample: ArchSample, config: SpaceConfig) -> list[Violation]:
    """Every out-of-range index in `sample`; an empty list means valid."""
    out: list[Violation] = []
    for kind in CELL_TYPES:
        cell = sample.cell(kind)
        if len(cell.choices) != 2 * config.N:
            out.append(Violation(kind, 0, -1, f"expected {2 * config.N} slots, got {len(cell.choices)}"))
            continue
        for s, choice in enumerate(cell.choices):
            node, slot = s // 2 + 1, s % 2
            if not 0 <= choice.input_index < node + 1:
                out.append(
                    Violation(kind, node, slot, f"input_index {choice.input_index} not in [0, {node + 1})")
                )
            if not 0 <= choice.op_index < config.P:
                out.append(Violation(kind, node, slot, f"op_index {choice.op_index} not in [0, {config.P})"))
    return out


def check_valid(sample: ArchSample, config: SpaceConfig):
    violations = validate(sample, config)
    if violations:
        v = violations[0]
        raise SpaceError(
            f"invalid sample ({len(violations)} violation(s)); first at "
            f"cell={v.cell} node={v.node} slot={v.slot}: {v.message}"
        )


def enumerate_space(config: SpaceConfig, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[ArchSample]:
    """All joint architectures in lexicographic order of their category indices."""
    total = joint_space_size(config)
    if total > cap:
        raise SpaceError(
            f"joint space has {total:,} architectures "
            f"({space_size(config):,} per cell, squared), above the enumeration cap {cap:,}"
        )
    ranges = [range(k) for k in config.slot_sizes() * 2]
    for idx in itertools.product(*ranges):
        yield ArchSample.from_category_indices(idx, config.P)


def describe(sample: ArchSample, config: SpaceConfig) -> str:
    """Canonical genotype text, one line per slot."""
    check_valid(sample, config)
    names = config.op_names
    lines = []
    for kind in CELL_TYPES:
        for s, c in enumerate(sample.cell(kind).choices):
            lines.append(
                f"cell={kind} node={s // 2 + 1} slot={s % 2} input={c.input_index} op={names[c.op_index]}"
            )
    return "\n".join(lines) + "\n"


def parse(text: str, config: SpaceConfig) -> ArchSample:
    """Inverse of `describe`."""
    names = {name: i for i, name in enumerate(config.op_names)}
    cells: dict[str, dict[tuple[int, int], PairChoice]] = {k: {} for k in CELL_TYPES}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            fields = dict(part.split("=", 1) for part in line.split())
            kind = fields["cell"]
            key = (int(fields["node"]), int(fields["slot"]))
            op = fields["op"]
            choice = PairChoice(int(fields["input"]), names[op])
        except (KeyError, ValueError) as exc:
            raise SpaceError(f"genotype line {lineno} malformed: {line!r}") from exc
        if kind not in cells:
            raise SpaceError(f"genotype line {lineno}: unknown cell type {kind!r}")
        if key in cells[kind]:
            raise SpaceError(f"genotype line {lineno}: duplicate slot {kind} {key}")
        cells[kind][key] = choice
    order = [(n, s) for n in range(1, config.N + 1) for s in (0, 1)]
    parts = []
    for kind in CELL_TYPES:
        missing = [k for k in order if k not in cells[kind]]
        if missing or len(cells[kind]) != len(order):
            raise SpaceError(f"genotype for {kind} cell has missing or extra slots: missing={missing}")
        parts.append(CellSample(tuple(cells[kind][k] for k in order)))
    sample = ArchSample(*parts)
    check_valid(sample, config)
    return sample
