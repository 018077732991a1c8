"""Importance-weighted Monte-Carlo search loop, fine-tuning and final training.

One search step samples K architectures from the distribution, scores each on
a search batch with the shared weights, turns the scores into normalised
importance weights and uses them to average the per-child gradients of the
weights (train batch) and of the distribution logits.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .data import DatasetHandle, augment_batch, cycle_batches, epoch_batches, split_data
from .distribution import ArchDistribution
from .network import NetworkConfig, ParentNetwork, WeightStore, backward_child
from .optim import SGD, Adam, NonFiniteGradient, clip_grad_norm
from .space import ArchSample, SpaceConfig, describe


# randomness -------------------------------------------------------------------

def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream for one component: the name is hashed into the stream id."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def component_seed(seed: int, name: str) -> int:
    return int(component_rng(seed, name).integers(0, 2**31 - 1))


# configuration ----------------------------------------------------------------

@dataclass
class TrainerConfig:
    K: int = 16
    epochs: int = 100
    pi_lr: float = 0.02
    pi_betas: tuple = (0.5, 0.999)
    v_lr: float = 0.025
    v_lr_min: float = 0.001
    v_momentum: float = 0.9
    v_weight_decay: float = 3e-4
    grad_clip: float = 5.0
    batch_size: int = 64
    search_batch_size: int | None = None  # defaults to batch_size
    eval_batch_size: int = 256
    split: float = 0.5
    weight_temperature: float = 1.0
    augment: bool = True
    max_steps_per_epoch: int | None = None
    parallel: bool = False
    workers: int = 4
    finetune: bool = False

    def __post_init__(self):
        self.pi_betas = tuple(self.pi_betas)
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not 0 < self.split < 1:
            raise ValueError(f"split fraction must be in (0, 1), got {self.split}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.weight_temperature <= 0:
            raise ValueError("weight_temperature must be positive")

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainerConfig":
        """Transfer stage: smaller Adam rate, 10 epochs, final-training batch size."""
        base = dict(pi_lr=0.01, epochs=10, batch_size=96, finetune=True)
        base.update(overrides)
        return cls(**base)

    @property
    def search_batch(self) -> int:
        return self.search_batch_size or self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pi_betas"] = list(self.pi_betas)
        return d


@dataclass
class FinalConfig:
    """Training an extracted architecture from scratch."""
    epochs: int = 600
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    batch_size: int = 96
    eval_batch_size: int = 256
    augment: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(base: float, floor: float, epoch: int, epochs: int) -> float:
    if epochs <= 0:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * epoch / epochs))


# importance weights ---------------------------------------------------------------

class ImportanceWeights(NamedTuple):
    log_liks: np.ndarray
    weights: np.ndarray

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    @property
    def max_weight(self) -> float:
        return float(self.weights.max())


def importance_weights(log_liks) -> ImportanceWeights:
    """Softmax of the log-likelihoods, computed with max-subtraction."""
    ll = np.asarray(log_liks, dtype=np.float64).ravel()
    if ll.size == 0:
        raise ValueError("need at least one log-likelihood")
    if np.any(np.isnan(ll)):
        raise ValueError("log-likelihoods contain NaN")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihoods must be finite")
    z = np.exp(ll - ll.max())
    return ImportanceWeights(ll, z / z.sum())


def estimate_pi_gradient(dist: ArchDistribution, idx: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted score sum, in sample order (fixed summation order)."""
    g = np.zeros_like(dist.logits)
    for w, s in zip(weights, dist.grad_log_prob_indices(idx)):
        g += w * s
    return g


def make_pi_optimizer(dist: ArchDistribution, config: TrainerConfig) -> Adam:
    return Adam([dist.logits], lr=config.pi_lr, betas=config.pi_betas)


def pi_step(dist: ArchDistribution, opt: Adam, idx: np.ndarray, log_liks, temperature: float = 1.0):
    """Ascent step on the estimated log marginal likelihood; returns the weights used."""
    iw = importance_weights(np.asarray(log_liks, dtype=np.float64) / temperature)
    g = estimate_pi_gradient(dist, idx, iw.weights)
    opt.step([-g])
    return iw, g


# search -------------------------------------------------------------------------

class StepStats(NamedTuple):
    indices: np.ndarray
    weights: ImportanceWeights
    train_loss: float
    v_grad_norm: float
    pi_grad: np.ndarray


@dataclass
class SearchState:
    net: ParentNetwork
    store: WeightStore
    dist: ArchDistribution
    config: TrainerConfig
    keys: list = field(init=False)
    v_opt: SGD = field(init=False)
    pi_opt: Adam = field(init=False)

    def __post_init__(self):
        self.keys = self.store.keys()
        c = self.config
        self.v_opt = SGD([self.store.params[k].data for k in self.keys], lr=c.v_lr,
                         momentum=c.v_momentum, weight_decay=c.v_weight_decay)
        self.pi_opt = make_pi_optimizer(self.dist, c)


def _search_log_liks(state: SearchState, samples: list[ArchSample], xs, ys) -> np.ndarray:
    """Batch-summed log-likelihood of every sample on the search batch (no graph)."""
    def one(sample):
        return state.net.forward_child(state.store, sample, xs, ys, training=True, update_stats=False).log_lik

    with T.no_grad():
        if state.config.parallel and len(samples) > 1:
            # read-only weights; results are collected in sample order
            with ThreadPoolExecutor(max_workers=state.config.workers) as pool:
                return np.array(list(pool.map(one, samples)))
        return np.array([one(s) for s in samples])


def search_step(state: SearchState, batch_search, batch_train, rng: np.random.Generator) -> StepStats:
    """One update of the shared weights and the distribution logits."""
    c, dist, net, store = state.config, state.dist, state.net, state.store
    idx = dist.sample_indices(rng, c.K)
    samples = [ArchSample.from_category_indices(i, dist.config.P) for i in idx]
    xs, ys = batch_search
    xt, yt = batch_train

    ll = _search_log_liks(state, samples, xs, ys)
    if not np.all(np.isfinite(ll)):
        raise NonFiniteGradient("non-finite search log-likelihood; step aborted")
    iw = importance_weights(ll / c.weight_temperature)

    agg: dict[str, np.ndarray] = {}
    loss = 0.0
    for w, sample in zip(iw.weights, samples):
        ex = net.forward_child(store, sample, xt, yt, training=True, update_stats=True)
        value = float(ex.loss.data)
        if not math.isfinite(value):
            raise NonFiniteGradient("non-finite training loss; step aborted")
        loss += w * value
        for k, g in backward_child(ex, store).items():
            if k in agg:
                agg[k] += w * g
            else:
                agg[k] = w * g
        del ex
    grads = [agg.get(k) for k in state.keys]
    norm = clip_grad_norm(grads, c.grad_clip)
    g_pi = estimate_pi_gradient(dist, idx, iw.weights)
    # validate both before touching either
    for g in grads + [g_pi]:
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; step aborted")
    state.v_opt.step(grads)
    state.pi_opt.step([-g_pi])
    return StepStats(idx, iw, loss, norm, g_pi)


@dataclass
class SeedRun:
    seed: int
    dist: ArchDistribution
    store: WeightStore
    metrics: list
    initial_entropy: float

    @property
    def final_mode_val_acc(self) -> float:
        return self.metrics[-1]["mode_val_acc"] if self.metrics else float("nan")


@dataclass
class SearchResult:
    runs: dict
    best_seed: int

    @property
    def best(self) -> SeedRun:
        return self.runs[self.best_seed]


def _write_jsonl_line(path: Path, record: dict):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=False) + "\n")


def search_one_seed(data: DatasetHandle, net_config: NetworkConfig, space: SpaceConfig,
                    config: TrainerConfig, seed: int, outdir=None,
                    init_dist: ArchDistribution | None = None, init_weights: dict | None = None,
                    log: Callable[[str], None] | None = None) -> SeedRun:
    net = ParentNetwork(net_config, space)
    store = net.build(component_seed(seed, "weights"))
    if init_weights is not None:
        store.load_arrays(init_weights, strict=False)
    dist = init_dist.copy() if init_dist is not None else ArchDistribution.uniform(space)
    state = SearchState(net, store, dist, config)

    train, search = split_data(data, config.split, component_seed(seed, "split"))
    arch_rng = component_rng(seed, "arch")
    train_rng = component_rng(seed, "train-batches")
    aug_rng = component_rng(seed, "augment")
    search_iter = cycle_batches(search, config.search_batch, component_rng(seed, "search-batches"))
    steps = len(train) // config.batch_size
    if config.max_steps_per_epoch is not None:
        steps = min(steps, config.max_steps_per_epoch)
    if steps == 0:
        raise ValueError(f"train split of {len(train)} examples is smaller than one batch of {config.batch_size}")
    do_augment = config.augment and net.spatial

    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("", encoding="utf-8")
        dist.save(out / "dist_init.json")

    initial_entropy = dist.entropy()
    metrics = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        state.v_opt.lr = cosine_lr(config.v_lr, config.v_lr_min, epoch, config.epochs)
        max_w, ess, losses = 0.0, [], []
        batches = epoch_batches(train, config.batch_size, train_rng)
        for _ in range(steps):
            xt, yt = next(batches)
            if do_augment:
                xt = augment_batch(xt, aug_rng)
            st = search_step(state, next(search_iter), (xt, yt), arch_rng)
            max_w = max(max_w, st.weights.max_weight)
            ess.append(st.weights.ess)
            losses.append(st.train_loss)
        acc, _ = net.evaluate(store, dist.mode(), search.images, search.labels,
                              batch_size=config.eval_batch_size, training=True)
        record = {
            "epoch": epoch,
            "entropy_nats": dist.entropy(),
            "mode_val_acc": acc,
            "max_weight": max_w,
            "ess": float(np.mean(ess)),
            "train_loss": float(np.mean(losses)),
            "seconds": time.perf_counter() - t0,
        }
        metrics.append(record)
        if out is not None:
            _write_jsonl_line(out / "metrics.jsonl", record)
            dist.save(out / f"dist_epoch_{epoch:03d}.json")
            store.save(out / f"weights_epoch_{epoch:03d}.psec")
        if log:
            log(f"seed {seed} epoch {epoch}: entropy {record['entropy_nats']:.4f} "
                f"mode acc {acc:.4f} ess {record['ess']:.2f} loss {record['train_loss']:.4f}")
    if out is not None:
        dist.save(out / "dist_final.json")
        store.save(out / "weights_final.psec")
        (out / "genotype.txt").write_text(describe(dist.mode(), space), encoding="utf-8")
    return SeedRun(seed, dist, store, metrics, initial_entropy)


def select_best(runs: dict) -> int:
    """Seed whose mode reached the highest final validation accuracy (ties: lowest seed)."""
    return max(sorted(runs), key=lambda s: (runs[s].final_mode_val_acc, -s))


def run_search(data: DatasetHandle, net_config: NetworkConfig, space: SpaceConfig,
               config: TrainerConfig, seeds=(0,), outdir=None,
               init_dist: ArchDistribution | None = None, init_weights: dict | None = None,
               log: Callable[[str], None] | None = None) -> SearchResult:
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds {seeds}")
    runs = {}
    for s in seeds:
        sub = Path(outdir) / f"seed_{s}" if outdir is not None else None
        runs[s] = search_one_seed(data, net_config, space, config, s, sub, init_dist, init_weights, log)
    best = select_best(runs)
    if outdir is not None:
        out = Path(outdir)
        runs[best].dist.save(out / "dist_best.json")
        (out / "genotype.txt").write_text(describe(runs[best].dist.mode(), space), encoding="utf-8")
        summary = {"best_seed": best,
                   "mode_val_acc": {str(s): r.final_mode_val_acc for s, r in runs.items()}}
        (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return SearchResult(runs, best)


def finetune(dist: ArchDistribution | str | Path, data: DatasetHandle, net_config: NetworkConfig,
             space: SpaceConfig, config: TrainerConfig | None = None, seeds=(0,), outdir=None,
             log: Callable[[str], None] | None = None) -> SearchResult:
    """Continue the search on a larger network, starting from a learned distribution."""
    if not isinstance(dist, ArchDistribution):
        dist = ArchDistribution.load(dist, expect=space)
    elif dist.config != space:
        # round-trip through the dict form to reuse its mismatch message
        ArchDistribution.from_dict(dist.to_dict(), expect=space)
    config = config or TrainerConfig.finetune_defaults()
    if outdir is not None:
        Path(outdir).mkdir(parents=True, exist_ok=True)
        dist.save(Path(outdir) / "dist_step0.json")
    return run_search(data, net_config, space, config, seeds, outdir, init_dist=dist, log=log)


# final training ---------------------------------------------------------------

@dataclass
class FinalResult:
    accuracies: list
    stores: list = field(repr=False, default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


def train_child(net: ParentNetwork, sample: ArchSample, train: DatasetHandle, config: FinalConfig,
                seed: int) -> WeightStore:
    """Train one architecture from freshly initialised weights."""
    store = net.build(component_seed(seed, "final-weights"), sample=sample)
    keys = store.keys()
    opt = SGD([store.params[k].data for k in keys], lr=config.lr, momentum=config.momentum,
              weight_decay=config.weight_decay)
    batch_rng = component_rng(seed, "final-batches")
    aug_rng = component_rng(seed, "final-augment")
    for epoch in range(config.epochs):
        opt.lr = cosine_lr(config.lr, config.lr_min, epoch, config.epochs)
        for xb, yb in epoch_batches(train, config.batch_size, batch_rng):
            if config.augment and net.spatial:
                xb = augment_batch(xb, aug_rng)
            ex = net.forward_child(store, sample, xb, yb, training=True, update_stats=True)
            if not math.isfinite(float(ex.loss.data)):
                raise NonFiniteGradient("non-finite training loss")
            g = backward_child(ex, store)
            grads = [g.get(k) for k in keys]
            clip_grad_norm(grads, config.grad_clip)
            opt.step(grads)
    return store


def train_final(sample: ArchSample, net_config: NetworkConfig, space: SpaceConfig,
                train: DatasetHandle, test: DatasetHandle, config: FinalConfig, seeds=(0,),
                keep_stores: bool = False) -> FinalResult:
    """Accuracy over several weight initialisations; evaluation uses running BN statistics."""
    net = ParentNetwork(net_config, space)
    accs, stores = [], []
    for s in seeds:
        store = train_child(net, sample, train, config, s)
        acc, _ = net.evaluate(store, sample, test.images, test.labels, batch_size=config.eval_batch_size)
        accs.append(acc)
        if keep_stores:
            stores.append(store)
    return FinalResult(accs, stores)

