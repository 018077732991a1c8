"""Factorised categorical distribution over architectures.

Every slot (cell type, node, input slot) holds an independent categorical over
(input, op) pairs, parameterised by unconstrained logits. All logits live in
one flat vector so that optimisers and estimators can treat them as a single
parameter; `offsets` delimit the slots (normal cell first, node-major).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .space import CELL_TYPES, ArchSample, SpaceConfig, SpaceError, check_valid

FORMAT_VERSION = 1


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


class ArchDistribution:
    def __init__(self, config: SpaceConfig, logits: np.ndarray | None = None):
        self.config = config
        self.sizes = config.slot_sizes() * 2
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)
        n = int(self.offsets[-1])
        if logits is None:
            logits = np.zeros(n)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != (n,):
            raise SpaceError(f"expected {n} logits for {config}, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        self.logits = logits

    @classmethod
    def uniform(cls, config: SpaceConfig) -> "ArchDistribution":
        return cls(config)

    @property
    def num_slots(self) -> int:
        return len(self.sizes)

    def copy(self) -> "ArchDistribution":
        return ArchDistribution(self.config, self.logits.copy())

    def slot_logits(self, s: int) -> np.ndarray:
        return self.logits[self.offsets[s] : self.offsets[s + 1]]

    def slot_log_probs(self) -> list[np.ndarray]:
        return [_log_softmax(self.slot_logits(s)) for s in range(self.num_slots)]

    def slot_probs(self) -> list[np.ndarray]:
        return [np.exp(lp) for lp in self.slot_log_probs()]

    # sampling ----------------------------------------------------------
    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """`n` independent draws as an (n, num_slots) array of category indices."""
        u = rng.random((n, self.num_slots))
        out = np.empty((n, self.num_slots), dtype=np.int64)
        for s, p in enumerate(self.slot_probs()):
            cdf = np.cumsum(p)
            out[:, s] = np.minimum(np.searchsorted(cdf, u[:, s], side="right"), len(p) - 1)
        return out

    def sample(self, rng: np.random.Generator) -> ArchSample:
        return ArchSample.from_category_indices(self.sample_indices(rng, 1)[0], self.config.P)

    # scoring -----------------------------------------------------------
    def _indices(self, sample: ArchSample) -> tuple[int, ...]:
        check_valid(sample, self.config)
        return sample.category_indices(self.config.P)

    def log_prob_indices(self, idx: np.ndarray) -> np.ndarray:
        """Log-probabilities of an (n, num_slots) index array."""
        idx = np.atleast_2d(idx)
        total = np.zeros(idx.shape[0])
        for s, lp in enumerate(self.slot_log_probs()):
            total += lp[idx[:, s]]
        return total

    def log_prob(self, sample: ArchSample) -> float:
        return float(self.log_prob_indices(np.array([self._indices(sample)]))[0])

    def grad_log_prob_indices(self, idx: np.ndarray) -> np.ndarray:
        """Score vectors d log p / d logits, shape (n, num_logits)."""
        idx = np.atleast_2d(idx)
        n = idx.shape[0]
        probs = np.concatenate(self.slot_probs())
        g = np.broadcast_to(-probs, (n, probs.size)).copy()
        g[np.arange(n)[:, None], self.offsets[:-1][None, :] + idx] += 1.0
        return g

    def grad_log_prob(self, sample: ArchSample) -> np.ndarray:
        return self.grad_log_prob_indices(np.array([self._indices(sample)]))[0]

    def entropy(self) -> float:
        """Sum of per-slot categorical entropies, in nats."""
        h = 0.0
        for lp in self.slot_log_probs():
            p = np.exp(lp)
            h -= float(np.sum(np.where(p > 0, p * lp, 0.0)))
        return h

    def mode_indices(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest index
        return np.array([int(np.argmax(self.slot_logits(s))) for s in range(self.num_slots)])

    def mode(self) -> ArchSample:
        return ArchSample.from_category_indices(self.mode_indices(), self.config.P)

    # persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        logits: dict = {}
        s = 0
        for kind in CELL_TYPES:
            logits[kind] = {}
            for node in range(1, self.config.N + 1):
                logits[kind][str(node)] = {}
                for slot in (0, 1):
                    logits[kind][str(node)][str(slot)] = [float(v) for v in self.slot_logits(s)]
                    s += 1
        return {"format_version": FORMAT_VERSION, "config": self.config.to_dict(), "logits": logits}

    @classmethod
    def from_dict(cls, doc: dict, expect: SpaceConfig | None = None) -> "ArchDistribution":
        if doc.get("format_version") != FORMAT_VERSION:
            raise SpaceError(f"unsupported distribution format_version {doc.get('format_version')!r}")
        config = SpaceConfig(**doc["config"])
        if expect is not None and expect != config:
            raise SpaceError(
                f"distribution was learned on {config.to_dict()} but the target space is {expect.to_dict()}; "
                "transfer requires identical N, P and op_set"
            )
        flat = []
        for kind in CELL_TYPES:
            for node in range(1, config.N + 1):
                for slot in (0, 1):
                    flat.extend(doc["logits"][kind][str(node)][str(slot)])
        return cls(config, np.array(flat, dtype=np.float64))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path, expect: SpaceConfig | None = None) -> "ArchDistribution":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), expect)
