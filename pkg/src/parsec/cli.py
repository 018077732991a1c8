"""Command-line entry point: `parsec <subcommand> ...`."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .data import DataError, DatasetHandle, SyntheticSpec, cifar10_dir_from_env, gen_synthetic, load_cifar10
from .distribution import ArchDistribution
from .network import ParentNetwork, load_weights
from .oracle import (
    Landscape,
    compare_with_random,
    estimator_audit,
    genotype_line,
    planted_recovery,
    random_baseline,
)
from .space import SpaceConfig, SpaceError, describe, joint_space_size, parse, slot_cardinality, space_size
from .trainer import TrainerConfig, component_rng, finetune, run_search, train_final


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


# config / data helpers ---------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    base = cfgmod.preset(args.preset) if getattr(args, "preset", None) else RunConfig()
    if getattr(args, "config", None):
        cfg = cfgmod.load(args.config, base)
    else:
        cfg = base
    if getattr(args, "seed", None):
        cfg.seeds = list(args.seed)
    if getattr(args, "output", None):
        cfg.output_dir = args.output
    if getattr(args, "data_dir", None):
        cfg.data.path = args.data_dir
        cfg.data.kind = "cifar10-binary"
    overrides = {k: getattr(args, k, None) for k in ("epochs", "K", "max_steps_per_epoch")}
    for k, v in overrides.items():
        if v is not None:
            cfg.trainer = cfgmod._build(TrainerConfig, "trainer", {k: v}, cfg.trainer)
    return cfg


def load_datasets(cfg: RunConfig) -> tuple[DatasetHandle, DatasetHandle]:
    """(train, test) datasets described by the data section."""
    d = cfg.data
    if d.kind == "synthetic":
        spec = SyntheticSpec(n=d.n, num_classes=d.num_classes, shape=d.shape, separation=d.separation,
                             noise=d.noise, pattern=d.pattern)
        train = gen_synthetic(spec, seed=d.seed * 2 + 1, pattern_seed=d.seed)
        spec.n = d.n_test
        test = gen_synthetic(spec, seed=d.seed * 2 + 2, pattern_seed=d.seed)
        return train, test
    path = d.path or cifar10_dir_from_env()
    if path is None:
        raise DataError("no CIFAR-10 directory: set data.path, pass --data-dir or set PARSEC_CIFAR10_DIR")
    train = load_cifar10(path, "train", subset=d.subset, seed=d.seed)
    test = load_cifar10(path, "test", subset=d.test_subset, seed=d.seed)
    return train, test


def _prepare_outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def _load_sample(args, space: SpaceConfig):
    if getattr(args, "genotype", None):
        return parse(Path(args.genotype).read_text(encoding="utf-8"), space)
    if getattr(args, "dist", None):
        return ArchDistribution.load(args.dist, expect=space).mode()
    raise ConfigError("give --genotype or --dist")


# subcommands ----------------------------------------------------------------------

def cmd_search(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_outdir(cfg)
    train, _ = load_datasets(cfg)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = run_search(train, cfg.network, cfg.space, cfg.trainer, cfg.seeds, out, log=log)
    print(f"best seed {res.best_seed} mode_val_acc {res.best.final_mode_val_acc:.4f}")
    print(describe(res.best.dist.mode(), cfg.space), end="")
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    explicit = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        explicit = doc.get("trainer", {})
    # transfer defaults, then anything the config file sets explicitly, then flags
    keep = {k: getattr(cfg.trainer, k) for k in ("K", "split", "weight_temperature", "augment",
                                                 "max_steps_per_epoch", "v_lr", "v_lr_min")}
    keep.update(explicit)
    for k in ("epochs", "K", "max_steps_per_epoch"):
        if getattr(args, k, None) is not None:
            keep[k] = getattr(args, k)
    if args.pi_lr is not None:
        keep["pi_lr"] = args.pi_lr
    if args.batch_size is not None:
        keep["batch_size"] = args.batch_size
    cfg.trainer = TrainerConfig.finetune_defaults(**keep)
    cfg.network = cfgmod._build(type(cfg.network), "network", {"num_cells": args.num_cells}, cfg.network)
    out = _prepare_outdir(cfg)
    train, _ = load_datasets(cfg)
    dist = ArchDistribution.load(args.dist, expect=cfg.space)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    res = finetune(dist, train, cfg.network, cfg.space, cfg.trainer, cfg.seeds, out, log=log)
    print(f"best seed {res.best_seed} mode_val_acc {res.best.final_mode_val_acc:.4f}")
    print(describe(res.best.dist.mode(), cfg.space), end="")
    return 0


def cmd_derive(args) -> int:
    doc = json.loads(Path(args.dist).read_text(encoding="utf-8"))
    dist = ArchDistribution.from_dict(doc)
    text = describe(dist.mode(), dist.config)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _final_report(name, sample, cfg, res) -> dict:
    return {"architecture": name, "genotype": describe(sample, cfg.space), "accuracies": res.accuracies,
            "mean": res.mean, "std": res.std}


def cmd_train_final(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_outdir(cfg)
    sample = _load_sample(args, cfg.space)
    (out / "genotype.txt").write_text(describe(sample, cfg.space), encoding="utf-8")
    train, test = load_datasets(cfg)
    res = train_final(sample, cfg.network, cfg.space, train, test, cfg.final, cfg.seeds, keep_stores=True)
    for s, store in zip(cfg.seeds, res.stores):
        store.save(out / f"weights_seed_{s}.psec")
    report = _final_report("given", sample, cfg, res)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as f:
        for s, a in zip(cfg.seeds, res.accuracies):
            f.write(json.dumps({"seed": s, "test_acc": a}) + "\n")
    (out / "final.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(f"test accuracy {res.mean:.4f} +- {res.std:.4f} over {len(res.accuracies)} seed(s)")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    sample = _load_sample(args, cfg.space)
    net = ParentNetwork(cfg.network, cfg.space)
    store = net.build(0, sample=sample)
    store.load_arrays(load_weights(args.weights))
    _, test = load_datasets(cfg)
    acc, ll = net.evaluate(store, sample, test.images, test.labels, batch_size=cfg.final.eval_batch_size)
    print(json.dumps({"test_acc": acc, "log_lik": ll, "n": len(test)}))
    return 0


def _landscape(args) -> Landscape:
    space = SpaceConfig(N=args.N, P=args.P, op_set=args.op_set)
    if getattr(args, "landscape", None):
        return Landscape.load(args.landscape, space)
    return Landscape.planted(space, component_rng(args.landscape_seed, "landscape"), tau=args.tau)


def _write(path, text: str):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def cmd_oracle_audit(args) -> int:
    land = _landscape(args)
    dist = ArchDistribution.uniform(land.config)
    rep = estimator_audit(land, dist, args.K, args.trials, component_rng(args.seed_value, "audit"))
    _write(args.output, rep.dumps())
    print(json.dumps({"K": rep.K, "trials": rep.trials, "max_abs_z": float(rep.z.max()),
                      "within_4se": rep.within(4.0), "total_variance": rep.total_variance}))
    return 0


def cmd_planted(args) -> int:
    land = _landscape(args)
    tc = TrainerConfig(K=args.K, pi_lr=args.pi_lr)
    rep = planted_recovery(land, tc, args.steps, range(args.seeds))
    _write(args.output, json.dumps(rep.to_dict(), indent=1) + "\n")
    print(json.dumps({"recovery_rate": rep.rate, "seeds": args.seeds, "steps": args.steps, "K": args.K}))
    return 0


def cmd_enumerate(args) -> int:
    space = SpaceConfig(N=args.N, P=args.P, op_set=args.op_set)
    card = [slot_cardinality(space, n) for n in range(1, space.N + 1)]
    print(f"slot cardinality per node: {' '.join(map(str, card))}")
    print(f"per-cell size: {space_size(space):,}")
    print(f"joint size: {joint_space_size(space):,}")
    if args.list:
        from .oracle import all_indices
        for row in all_indices(space, cap=args.cap):
            print(genotype_line(row, space))
    return 0


def cmd_random_baseline(args) -> int:
    if args.config or args.preset:
        return _random_baseline_trained(args)
    land = _landscape(args)
    if args.compare:
        tc = TrainerConfig(K=args.K)
        cmp = compare_with_random(land, tc, args.steps, range(args.seeds))
        print(json.dumps({"wins": cmp.wins, "losses": cmp.losses, "ties": cmp.ties, "p_value": cmp.p_value}))
        return 0
    idx, score = random_baseline(land, args.budget, component_rng(args.seed_value, "random-baseline"))
    print(json.dumps({"budget": args.budget, "best_log_lik": score, "genotype": genotype_line(idx, land.config)}))
    return 0


def _random_baseline_trained(args) -> int:
    """Train `budget` uniformly drawn architectures and report the best and the mean."""
    cfg = resolve_config(args)
    out = _prepare_outdir(cfg)
    train, test = load_datasets(cfg)
    rng = component_rng(args.seed_value, "random-baseline")
    dist = ArchDistribution.uniform(cfg.space)
    reports = []
    for i in range(args.budget):
        sample = dist.sample(rng)
        res = train_final(sample, cfg.network, cfg.space, train, test, cfg.final, cfg.seeds)
        reports.append(_final_report(f"random_{i}", sample, cfg, res))
    best = max(range(len(reports)), key=lambda i: reports[i]["mean"])
    summary = {"best": reports[best], "mean_of_means": float(np.mean([r["mean"] for r in reports])),
               "architectures": reports}
    (out / "random_baseline.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(json.dumps({"best_mean": reports[best]["mean"], "mean_of_means": summary["mean_of_means"]}))
    return 0


# parser ------------------------------------------------------------------------------

def _add_run_args(p, seeds=True):
    p.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    p.add_argument("--preset", choices=cfgmod.PRESETS, help="start from a desk-scale preset")
    p.add_argument("--output", help="output directory")
    p.add_argument("--data-dir", help="CIFAR-10 binary directory")
    if seeds:
        p.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--max-steps-per-epoch", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_space_args(p, N=1, P=2, op_set="toy"):
    p.add_argument("--N", type=int, default=N)
    p.add_argument("--P", type=int, default=P)
    p.add_argument("--op-set", default=op_set)


def _add_landscape_args(p):
    _add_space_args(p)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--landscape", help="landscape table file (genotype line, then value)")
    p.add_argument("--landscape-seed", type=int, default=0)
    p.add_argument("--seed", dest="seed_value", type=int, default=0)
    p.add_argument("--output")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parsec", description="Probabilistic cell-based architecture search.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the architecture search")
    _add_run_args(p)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("finetune", help="continue a search on a larger network")
    _add_run_args(p)
    p.add_argument("--dist", required=True, help="distribution checkpoint to start from")
    p.add_argument("--num-cells", type=int, default=8)
    p.add_argument("--pi-lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("derive", help="print the mode architecture of a distribution")
    p.add_argument("--dist", required=True)
    p.add_argument("--output")
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("train-final", help="train an architecture from scratch")
    _add_run_args(p)
    p.add_argument("--genotype")
    p.add_argument("--dist")
    p.set_defaults(fn=cmd_train_final)

    p = sub.add_parser("eval", help="evaluate trained weights on the test set")
    _add_run_args(p, seeds=False)
    p.add_argument("--genotype")
    p.add_argument("--dist")
    p.add_argument("--weights", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle-audit", help="bias/variance audit of the gradient estimator")
    _add_landscape_args(p)
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--trials", type=int, default=10_000)
    p.set_defaults(fn=cmd_oracle_audit)

    p = sub.add_parser("planted", help="planted-optimum recovery rate")
    _add_landscape_args(p)
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.add_argument("--pi-lr", type=float, default=0.02)
    p.set_defaults(fn=cmd_planted)

    p = sub.add_parser("enumerate", help="search-space statistics")
    _add_space_args(p, N=4, P=7, op_set="indexed")
    p.add_argument("--list", action="store_true", help="also list every architecture")
    p.add_argument("--cap", type=int, default=10**6)
    p.set_defaults(fn=cmd_enumerate)

    p = sub.add_parser("random-baseline", help="best-of-budget random search")
    _add_landscape_args(p)
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--compare", action="store_true", help="paired sign test against the search")
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--config")
    p.add_argument("--preset", choices=cfgmod.PRESETS)
    p.add_argument("--data-dir")
    p.set_defaults(fn=cmd_random_baseline)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, SpaceError, DataError, ValueError, KeyError, FileNotFoundError, OSError) as e:
        _err(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
