"""Exact-enumeration oracles on small spaces.

A Landscape assigns a log-likelihood to every architecture with the weights
held fixed. On enumerable spaces the marginal likelihood under a distribution,
and its gradient with respect to the logits, can be computed exactly and used
to audit the sampled estimator and the search loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binomtest

from .distribution import ArchDistribution
from .space import (
    CELL_TYPES,
    DEFAULT_ENUMERATION_CAP,
    ArchSample,
    PairChoice,
    SpaceConfig,
    SpaceError,
    joint_space_size,
)
from .trainer import TrainerConfig, component_rng, importance_weights, make_pi_optimizer, pi_step


def slot_radix(config: SpaceConfig) -> np.ndarray:
    return np.array(config.slot_sizes() * 2, dtype=np.int64)


def all_indices(config: SpaceConfig, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Every architecture as an (J, num_slots) index array, lexicographic order."""
    J = joint_space_size(config)
    if J > cap:
        raise SpaceError(f"joint space has {J:,} architectures, above the enumeration cap {cap:,}")
    grids = np.meshgrid(*[np.arange(n) for n in slot_radix(config)], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def flat_index(config: SpaceConfig, idx: np.ndarray) -> np.ndarray:
    """Row-major position of each index row in the enumeration order."""
    return np.ravel_multi_index(tuple(np.atleast_2d(idx).T), tuple(slot_radix(config)))


# landscapes ---------------------------------------------------------------------

class Landscape:
    """Fixed log-likelihood over architectures.

    Either planted (log_lik = -tau * Hamming distance to `optimum` over slot
    choices) or an explicit table indexed in enumeration order.
    """

    def __init__(self, config: SpaceConfig, table: np.ndarray | None = None,
                 optimum: np.ndarray | None = None, tau: float = 1.0):
        if (table is None) == (optimum is None):
            raise ValueError("give exactly one of table or optimum")
        self.config = config
        self.tau = float(tau)
        radix = slot_radix(config)
        if table is not None:
            table = np.asarray(table, dtype=np.float64)
            if table.shape != (joint_space_size(config),):
                raise ValueError(f"table needs {joint_space_size(config)} values, got {table.shape}")
            if not np.all(np.isfinite(table)):
                raise ValueError("landscape values must be finite")
            self.table = table
            self.optimum = None
        else:
            optimum = np.asarray(optimum, dtype=np.int64)
            if optimum.shape != radix.shape or np.any(optimum < 0) or np.any(optimum >= radix):
                raise ValueError("planted optimum is not a valid index vector")
            if not np.isfinite(self.tau):
                raise ValueError("tau must be finite")
            self.table = None
            self.optimum = optimum

    @classmethod
    def planted(cls, config: SpaceConfig, rng: np.random.Generator, tau: float = 1.0) -> "Landscape":
        radix = slot_radix(config)
        return cls(config, optimum=np.array([rng.integers(0, n) for n in radix]), tau=tau)

    @classmethod
    def constant(cls, config: SpaceConfig, value: float = 0.0) -> "Landscape":
        return cls(config, table=np.full(joint_space_size(config), float(value)))

    def log_lik_indices(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        if self.table is not None:
            return self.table[flat_index(self.config, idx)]
        return -self.tau * (idx != self.optimum[None, :]).sum(axis=1).astype(np.float64)

    def log_lik(self, sample: ArchSample) -> float:
        return float(self.log_lik_indices(np.array([sample.category_indices(self.config.P)]))[0])

    def argmax_indices(self) -> np.ndarray:
        if self.optimum is not None:
            return self.optimum.copy()
        return all_indices(self.config)[int(np.argmax(self.table))]

    def to_table(self, cap: int = DEFAULT_ENUMERATION_CAP) -> "Landscape":
        return Landscape(self.config, table=self.log_lik_indices(all_indices(self.config, cap)))

    # text format: one architecture per line, "<slot> <slot> ... | <slot> ... <value>"
    # where each slot is "input:op" and "|" separates the normal and reduction cells.
    def dumps(self, cap: int = DEFAULT_ENUMERATION_CAP) -> str:
        idx = all_indices(self.config, cap)
        vals = self.log_lik_indices(idx)
        lines = [f"# landscape N={self.config.N} P={self.config.P} op_set={self.config.op_set}"]
        for row, v in zip(idx, vals):
            lines.append(f"{genotype_line(row, self.config)} {float(v)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, config: SpaceConfig) -> "Landscape":
        J = joint_space_size(config)
        table = np.full(J, np.nan)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            head, _, value = line.rpartition(" ")
            try:
                v = float(value)
                pos = int(flat_index(config, parse_genotype_line(head, config))[0])
            except (ValueError, SpaceError) as e:
                raise ValueError(f"line {lineno}: {e}") from None
            if not np.isnan(table[pos]):
                raise ValueError(f"line {lineno}: architecture listed twice")
            table[pos] = v
        missing = int(np.isnan(table).sum())
        if missing:
            raise ValueError(f"landscape table is missing {missing} of {J} architectures")
        return cls(config, table=table)

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path, config: SpaceConfig) -> "Landscape":
        return cls.loads(Path(path).read_text(encoding="utf-8"), config)


def genotype_line(idx, config: SpaceConfig) -> str:
    s = ArchSample.from_category_indices(np.asarray(idx), config.P)
    names = config.op_names
    cells = []
    for kind in CELL_TYPES:
        cells.append(" ".join(f"{c.input_index}:{names[c.op_index]}" for c in s.cell(kind).choices))
    return " | ".join(cells)


def parse_genotype_line(text: str, config: SpaceConfig) -> np.ndarray:
    parts = text.split("|")
    if len(parts) != 2:
        raise SpaceError("expected two cells separated by '|'")
    names = config.op_names
    out = []
    sizes = config.slot_sizes()
    for part in parts:
        toks = part.split()
        if len(toks) != len(sizes):
            raise SpaceError(f"expected {len(sizes)} slots per cell, got {len(toks)}")
        for s, tok in enumerate(toks):
            i, _, op = tok.partition(":")
            if op not in names:
                raise SpaceError(f"unknown op {op!r}")
            c = PairChoice(int(i), names.index(op))
            cat = c.input_index * config.P + c.op_index
            if c.input_index < 0 or cat >= sizes[s]:
                raise SpaceError(f"input {c.input_index} not available to node {s // 2 + 1}")
            out.append(cat)
    return np.array(out, dtype=np.int64)


# exact quantities ---------------------------------------------------------------

def posterior(landscape: Landscape, dist: ArchDistribution, cap: int = DEFAULT_ENUMERATION_CAP):
    """(index array, posterior weights, log marginal) over the full enumeration."""
    idx = all_indices(landscape.config, cap)
    joint = landscape.log_lik_indices(idx) + dist.log_prob_indices(idx)
    lm = float(logsumexp(joint))
    return idx, np.exp(joint - lm), lm


def exact_log_marginal(landscape: Landscape, dist: ArchDistribution, cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    return posterior(landscape, dist, cap)[2]


def _weighted_onehot(dist: ArchDistribution, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_j w_j * onehot(idx_j), accumulated per slot."""
    out = np.zeros_like(dist.logits)
    for s in range(dist.num_slots):
        np.add.at(out, dist.offsets[s] + idx[:, s], w)
    return out


def exact_grad_pi(landscape: Landscape, dist: ArchDistribution, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Posterior expectation of the score, i.e. d exact_log_marginal / d logits."""
    idx, post, _ = posterior(landscape, dist, cap)
    probs = np.concatenate(dist.slot_probs())
    return _weighted_onehot(dist, idx, post) - post.sum() * probs


# estimator audit --------------------------------------------------------------------

@dataclass
class AuditReport:
    K: int
    trials: int
    mean: np.ndarray
    stderr: np.ndarray
    variance: np.ndarray
    exact: np.ndarray

    @property
    def deviation(self) -> np.ndarray:
        return self.mean - self.exact

    @property
    def z(self) -> np.ndarray:
        dev = self.deviation
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(dev) / self.stderr
        return np.where(self.stderr > 0, z, np.where(dev == 0, 0.0, np.inf))

    @property
    def total_variance(self) -> float:
        return float(self.variance.sum())

    def within(self, n_se: float = 4.0) -> bool:
        return bool(np.all(self.z <= n_se))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "trials": self.trials,
            "total_variance": self.total_variance,
            "max_abs_z": float(self.z.max()),
            "bias_norm": float(np.linalg.norm(self.deviation)),
            "coordinates": [
                {"index": i, "mean": float(m), "stderr": float(s), "variance": float(v),
                 "exact": float(e), "deviation": float(m - e)}
                for i, (m, s, v, e) in enumerate(zip(self.mean, self.stderr, self.variance, self.exact))
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def iw_gradient_estimates(landscape: Landscape, dist: ArchDistribution, K: int, trials: int,
                          rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    """(trials, num_logits) array of independent K-sample estimates."""
    idx = dist.sample_indices(rng, trials * K)
    ll = landscape.log_lik_indices(idx).reshape(trials, K) / temperature
    z = np.exp(ll - ll.max(axis=1, keepdims=True))
    w = (z / z.sum(axis=1, keepdims=True)).ravel()
    probs = np.concatenate(dist.slot_probs())
    est = np.zeros((trials, dist.logits.size))
    trial = np.repeat(np.arange(trials), K)
    for s in range(dist.num_slots):
        np.add.at(est, (trial, dist.offsets[s] + idx[:, s]), w)
    return est - probs[None, :]


def estimator_audit(landscape: Landscape, dist: ArchDistribution, K: int, trials: int,
                    rng: np.random.Generator, chunk: int = 2000) -> AuditReport:
    """Bias and variance of the self-normalised estimator against the exact gradient."""
    if K < 1 or trials < 2:
        raise ValueError("need K >= 1 and at least 2 trials")
    parts = []
    for start in range(0, trials, chunk):
        parts.append(iw_gradient_estimates(landscape, dist, K, min(chunk, trials - start), rng))
    est = np.concatenate(parts)
    var = est.var(axis=0, ddof=1)
    return AuditReport(K, trials, est.mean(axis=0), np.sqrt(var / trials), var, exact_grad_pi(landscape, dist))


# planted recovery and random search ------------------------------------------------------

@dataclass
class RecoveryRun:
    seed: int
    recovered: bool
    mode: np.ndarray
    mode_log_lik: float
    initial_entropy: float
    final_entropy: float
    evaluations: int


@dataclass
class RecoveryReport:
    runs: list

    @property
    def rate(self) -> float:
        return float(np.mean([r.recovered for r in self.runs]))

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "runs": [
                {"seed": r.seed, "recovered": r.recovered, "mode": r.mode.tolist(),
                 "mode_log_lik": r.mode_log_lik, "initial_entropy": r.initial_entropy,
                 "final_entropy": r.final_entropy, "evaluations": r.evaluations}
                for r in self.runs
            ],
        }


def search_landscape(landscape: Landscape, config: TrainerConfig, steps: int, seed: int,
                     dist: ArchDistribution | None = None) -> ArchDistribution:
    """The distribution half of the search loop with the weights frozen."""
    dist = dist.copy() if dist is not None else ArchDistribution.uniform(landscape.config)
    opt = make_pi_optimizer(dist, config)
    rng = component_rng(seed, "arch")
    for _ in range(steps):
        idx = dist.sample_indices(rng, config.K)
        pi_step(dist, opt, idx, landscape.log_lik_indices(idx), config.weight_temperature)
    return dist


def planted_recovery(landscape: Landscape, config: TrainerConfig, steps: int, seeds) -> RecoveryReport:
    target = landscape.argmax_indices()
    runs = []
    for seed in seeds:
        start = ArchDistribution.uniform(landscape.config)
        dist = search_landscape(landscape, config, steps, seed, start)
        mode = dist.mode_indices()
        runs.append(RecoveryRun(int(seed), bool(np.array_equal(mode, target)), mode,
                                float(landscape.log_lik_indices(mode)[0]), start.entropy(), dist.entropy(),
                                steps * config.K))
    return RecoveryReport(runs)


def random_baseline(landscape: Landscape, budget: int, rng: np.random.Generator,
                    cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[np.ndarray, float]:
    """Best of `budget` uniform draws; a budget covering the space enumerates it instead."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    config = landscape.config
    if budget >= joint_space_size(config) and joint_space_size(config) <= cap:
        idx = all_indices(config, cap)
    else:
        idx = ArchDistribution.uniform(config).sample_indices(rng, budget)
    ll = landscape.log_lik_indices(idx)
    best = int(np.argmax(ll))
    return idx[best], float(ll[best])


@dataclass
class PairedComparison:
    search_scores: list
    random_scores: list

    @property
    def wins(self) -> int:
        return sum(a > b for a, b in zip(self.search_scores, self.random_scores))

    @property
    def losses(self) -> int:
        return sum(a < b for a, b in zip(self.search_scores, self.random_scores))

    @property
    def ties(self) -> int:
        return len(self.search_scores) - self.wins - self.losses

    @property
    def p_value(self) -> float:
        """One-sided sign test on the untied pairs."""
        n = self.wins + self.losses
        if n == 0:
            return 1.0
        return float(binomtest(self.wins, n, 0.5, alternative="greater").pvalue)


def compare_with_random(landscape: Landscape, config: TrainerConfig, steps: int, seeds) -> PairedComparison:
    """Search mode vs. best-of-budget random search, with budget = steps * K evaluations."""
    rec = planted_recovery(landscape, config, steps, seeds)
    rand = [random_baseline(landscape, r.evaluations, component_rng(r.seed, "random-baseline"))[1] for r in rec.runs]
    return PairedComparison([r.mode_log_lik for r in rec.runs], rand)
