"""Run configuration: nested JSON with every default filled in and echoed."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .network import NetworkConfig
from .space import SpaceConfig
from .trainer import FinalConfig, TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "cifar10-binary"  # or "synthetic"
    path: str | None = None
    subset: int | None = None
    test_subset: int | None = None
    seed: int = 0  # subsampling and synthetic generation
    # synthetic only
    n: int = 2000
    n_test: int = 1000
    num_classes: int = 10
    shape: tuple = (3, 32, 32)
    separation: float = 1.0
    noise: float = 1.0
    pattern: str = "template"

    def __post_init__(self):
        self.shape = tuple(self.shape)
        if self.kind not in ("cifar10-binary", "synthetic"):
            raise ConfigError(f"data.kind must be 'cifar10-binary' or 'synthetic', got {self.kind!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["shape"] = list(self.shape)
        return d


@dataclass
class RunConfig:
    space: SpaceConfig = field(default_factory=SpaceConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    final: FinalConfig = field(default_factory=FinalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs/out"

    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(),
            "network": self.network.to_dict(),
            "trainer": self.trainer.to_dict(),
            "final": self.final.to_dict(),
            "data": self.data.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


_SECTIONS = {
    "space": SpaceConfig,
    "network": NetworkConfig,
    "trainer": TrainerConfig,
    "final": FinalConfig,
    "data": DataConfig,
}


def _build(cls, section: str, values: dict, base):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    merged = {f.name: getattr(base, f.name) for f in fields(cls)}
    merged.update(values)
    for k in ("input_shape", "shape", "pi_betas"):
        if k in merged and isinstance(merged[k], list):
            merged[k] = tuple(merged[k])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from None


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay `doc` on `base` (defaults if None); unknown keys are rejected."""
    base = copy.deepcopy(base) if base is not None else RunConfig()
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seeds", "output_dir", "preset"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "preset" in doc:
        base = preset(doc["preset"])
    out = copy.deepcopy(base)
    for name, cls in _SECTIONS.items():
        if name in doc:
            setattr(out, name, _build(cls, name, doc[name], getattr(base, name)))
    if "seeds" in doc:
        seeds = doc["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        out.seeds = seeds
    if "output_dir" in doc:
        out.output_dir = str(doc["output_dir"])
    return out


def load(path, base: RunConfig | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return from_dict(doc, base)


def preset(name: str) -> RunConfig:
    """Desk-scale presets.

    toy-oracle: N=1, P=2 toy ops on small synthetic vectors.
    mini-cifar: N=2, P=7, 4 cells of 8 channels on a 2,000-image CIFAR-10 subset,
    10 search epochs with K=8.
    """
    if name == "toy-oracle":
        return RunConfig(
            space=SpaceConfig(N=1, P=2, op_set="toy"),
            network=NetworkConfig(num_cells=2, init_channels=4, num_classes=3, input_shape=(8,)),
            trainer=TrainerConfig(K=16, epochs=5, batch_size=32, augment=False),
            final=FinalConfig(epochs=5, batch_size=32, augment=False),
            data=DataConfig(kind="synthetic", n=600, n_test=300, num_classes=3, shape=(8,), separation=1.5),
            output_dir="runs/toy-oracle",
        )
    if name == "mini-cifar":
        return RunConfig(
            space=SpaceConfig(N=2, P=7, op_set="paper7"),
            network=NetworkConfig(num_cells=4, init_channels=8),
            trainer=TrainerConfig(K=8, epochs=10, batch_size=64),
            final=FinalConfig(epochs=5, batch_size=96),
            data=DataConfig(kind="cifar10-binary", subset=2000, test_subset=1000),
            output_dir="runs/mini-cifar",
        )
    raise ConfigError(f"unknown preset {name!r} (choose toy-oracle or mini-cifar)")


PRESETS = ("toy-oracle", "mini-cifar")
