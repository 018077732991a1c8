"""Weight-sharing parent network and the sampled-child executor.

The parent holds weights for every candidate (edge, op) pair of every cell.
A forward pass for an `ArchSample` only touches, and only materialises
activations for, the two chosen ops of each node.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .space import ArchSample, CellSample, SpaceConfig, check_valid, slot_cardinality
from .tensor import CrossEntropy, RunningStats, Tensor

MAGIC = b"PSEC"
WEIGHTS_FORMAT_VERSION = 1


@dataclass
class NetworkConfig:
    num_cells: int = 8
    init_channels: int = 16
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    reduction_every: int = 3
    stem_multiplier: int = 1  # stem width = stem_multiplier * init_channels

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.num_cells < 1 or self.init_channels < 1 or self.num_classes < 2:
            raise ValueError(f"bad network config {self}")
        if self.reduction_every < 1:
            raise ValueError("reduction_every must be >= 1")

    def is_reduction(self, cell_index: int) -> bool:
        """Cells at 1-based positions divisible by `reduction_every` reduce."""
        return (cell_index + 1) % self.reduction_every == 0

    def to_dict(self) -> dict:
        return {
            "num_cells": self.num_cells,
            "init_channels": self.init_channels,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "reduction_every": self.reduction_every,
            "stem_multiplier": self.stem_multiplier,
        }


class ParamSpec(NamedTuple):
    key: str
    shape: tuple
    init: str  # "conv", "ones", "zeros", "linear"


def _key_seed(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


def _init_param(spec: ParamSpec, seed: int) -> np.ndarray:
    rng = _key_seed(seed, spec.key)
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "conv":
        fan_in = int(np.prod(spec.shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.shape)
    if spec.init == "linear":
        bound = 1.0 / np.sqrt(spec.shape[-1])
        return rng.uniform(-bound, bound, size=spec.shape)
    raise ValueError(spec.init)


class Ctx(NamedTuple):
    store: "WeightStore"
    training: bool
    update_stats: bool


# building blocks ----------------------------------------------------------

class Module:
    prefix: str

    def specs(self) -> Iterator[ParamSpec]:
        return iter(())

    def stat_keys(self) -> Iterator[tuple[str, int]]:
        return iter(())


class BN(Module):
    def __init__(self, prefix: str, C: int):
        self.prefix, self.C = prefix, C

    def specs(self):
        yield ParamSpec(f"{self.prefix}.gamma", (self.C,), "ones")
        yield ParamSpec(f"{self.prefix}.beta", (self.C,), "zeros")

    def stat_keys(self):
        yield self.prefix, self.C

    def __call__(self, ctx: Ctx, x: Tensor) -> Tensor:
        p = ctx.store.params
        running = ctx.store.stats[self.prefix]
        if ctx.training:
            return T.batchnorm(x, p[f"{self.prefix}.gamma"], p[f"{self.prefix}.beta"],
                               running if ctx.update_stats else None, training=True)
        return T.batchnorm(x, p[f"{self.prefix}.gamma"], p[f"{self.prefix}.beta"], running, training=False)


class Conv(Module):
    def __init__(self, prefix, C_in, C_out, k, stride=1, padding=0, dilation=1, groups=1):
        self.prefix = prefix
        self.shape = (C_out, C_in // groups, k, k)
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def specs(self):
        yield ParamSpec(f"{self.prefix}.w", self.shape, "conv")

    def __call__(self, ctx: Ctx, x: Tensor) -> Tensor:
        return T.conv2d(x, ctx.store.params[f"{self.prefix}.w"], self.stride, self.padding,
                        self.dilation, self.groups)


class Sequential(Module):
    def __init__(self, prefix: str, *layers):
        self.prefix = prefix
        self.layers = layers

    def specs(self):
        for layer in self.layers:
            if isinstance(layer, Module):
                yield from layer.specs()

    def stat_keys(self):
        for layer in self.layers:
            if isinstance(layer, Module):
                yield from layer.stat_keys()

    def __call__(self, ctx: Ctx, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(ctx, x) if isinstance(layer, Module) else layer(x)
        return x


def ReLUConvBN(prefix, C_in, C_out, k, stride, padding):
    return Sequential(prefix, T.relu, Conv(f"{prefix}.conv", C_in, C_out, k, stride, padding),
                      BN(f"{prefix}.bn", C_out))


def SepConv(prefix, C, k, stride, padding):
    # two stacked depthwise+pointwise blocks; only the first one strides
    return Sequential(
        prefix,
        T.relu,
        Conv(f"{prefix}.dw1", C, C, k, stride, padding, groups=C),
        Conv(f"{prefix}.pw1", C, C, 1),
        BN(f"{prefix}.bn1", C),
        T.relu,
        Conv(f"{prefix}.dw2", C, C, k, 1, padding, groups=C),
        Conv(f"{prefix}.pw2", C, C, 1),
        BN(f"{prefix}.bn2", C),
    )


def DilConv(prefix, C, k, stride, padding, dilation=2):
    return Sequential(
        prefix,
        T.relu,
        Conv(f"{prefix}.dw", C, C, k, stride, padding, dilation, groups=C),
        Conv(f"{prefix}.pw", C, C, 1),
        BN(f"{prefix}.bn", C),
    )


class FactorizedReduce(Module):
    """Halves spatial size with two offset stride-2 1x1 convs."""

    def __init__(self, prefix: str, C_in: int, C_out: int):
        if C_out % 2:
            raise ValueError("FactorizedReduce needs an even number of output channels")
        self.prefix = prefix
        self.conv1 = Conv(f"{prefix}.conv1", C_in, C_out // 2, 1, stride=2)
        self.conv2 = Conv(f"{prefix}.conv2", C_in, C_out // 2, 1, stride=2)
        self.bn = BN(f"{prefix}.bn", C_out)

    def specs(self):
        yield from self.conv1.specs()
        yield from self.conv2.specs()
        yield from self.bn.specs()

    def stat_keys(self):
        yield from self.bn.stat_keys()

    def __call__(self, ctx: Ctx, x: Tensor) -> Tensor:
        r = T.relu(x)
        a = self.conv1(ctx, r)
        b = self.conv2(ctx, r[:, :, 1:, 1:])
        if a.shape != b.shape:
            raise T.ShapeError(f"FactorizedReduce needs even spatial size, got {x.shape[2:]}")
        return self.bn(ctx, T.concat([a, b], axis=1))


class Fn(Module):
    def __init__(self, prefix, fn):
        self.prefix, self.fn = prefix, fn

    def __call__(self, ctx, x):
        return self.fn(x)


def make_op(name: str, prefix: str, C: int, stride: int) -> Module:
    if name == "identity":
        return Fn(prefix, T.identity) if stride == 1 else FactorizedReduce(prefix, C, C)
    if name == "avg_pool_3x3":
        return Fn(prefix, lambda x: T.pool2d(x, "avg", 3, stride, 1))
    if name == "max_pool_3x3":
        return Fn(prefix, lambda x: T.pool2d(x, "max", 3, stride, 1))
    if name == "sep_conv_3x3":
        return SepConv(prefix, C, 3, stride, 1)
    if name == "sep_conv_5x5":
        return SepConv(prefix, C, 5, stride, 2)
    if name == "dil_conv_3x3":
        return DilConv(prefix, C, 3, stride, 2)
    if name == "dil_conv_5x5":
        return DilConv(prefix, C, 5, stride, 4)
    if name == "negate":
        return Fn(prefix, T.neg)
    if name == "scale2":
        return Fn(prefix, lambda x: T.scale(x, 2.0))
    raise ValueError(f"unknown primitive {name!r}")


class Cell:
    def __init__(self, index: int, space: SpaceConfig, C_pp: int, C_p: int, C: int,
                 reduction: bool, reduction_prev: bool, spatial: bool):
        self.index = index
        self.space = space
        self.reduction = reduction
        self.C = C
        pre = f"cells.{index}"
        if reduction_prev and spatial:
            self.pre0 = FactorizedReduce(f"{pre}.pre0", C_pp, C)
        else:
            self.pre0 = ReLUConvBN(f"{pre}.pre0", C_pp, C, 1, 1, 0)
        self.pre1 = ReLUConvBN(f"{pre}.pre1", C_p, C, 1, 1, 0)
        self.edges: dict[tuple[int, int, int], Module] = {}
        for n in range(1, space.N + 1):
            for i in range(n + 1):
                stride = 2 if reduction and spatial and i < 2 else 1
                for p, name in enumerate(space.op_names):
                    self.edges[(i, n, p)] = make_op(name, f"{pre}.edge_{i}_{n}.{name}", C, stride)

    def shared_modules(self) -> list[Module]:
        return [self.pre0, self.pre1]

    def active_edges(self, sample: CellSample) -> list[tuple[int, int, int]]:
        out = []
        for n in range(1, self.space.N + 1):
            for c in sample.node(n):
                key = (c.input_index, n, c.op_index)
                if key not in out:
                    out.append(key)
        return out

    def _apply(self, ctx: Ctx, key, x: Tensor) -> Tensor:
        y = self.edges[key](ctx, x)
        T.mark_op_output(y)
        return y

    def forward(self, ctx: Ctx, s0: Tensor, s1: Tensor, sample: CellSample) -> Tensor:
        states = [self.pre0(ctx, s0), self.pre1(ctx, s1)]
        for n in range(1, self.space.N + 1):
            a, b = sample.node(n)
            z = self._apply(ctx, (a.input_index, n, a.op_index), states[a.input_index])
            z = z + self._apply(ctx, (b.input_index, n, b.op_index), states[b.input_index])
            states.append(z)
        return T.concat(states[2:], axis=1)

    def forward_dense(self, ctx: Ctx, s0: Tensor, s1: Tensor) -> Tensor:
        """Diagnostic: every candidate path of every node is evaluated and summed."""
        states = [self.pre0(ctx, s0), self.pre1(ctx, s1)]
        for n in range(1, self.space.N + 1):
            z = None
            for i in range(n + 1):
                for p in range(self.space.P):
                    y = self._apply(ctx, (i, n, p), states[i])
                    z = y if z is None else z + y
            states.append(z)
        return T.concat(states[2:], axis=1)


class ChildExecution(NamedTuple):
    sample: ArchSample | None
    logits: Tensor
    ce: CrossEntropy

    @property
    def loss(self) -> Tensor:
        return self.ce.loss

    @property
    def log_lik(self) -> float:
        return self.ce.log_lik


class ParentNetwork:
    """Static structure of the stacked-cell network; weights live in a WeightStore."""

    def __init__(self, config: NetworkConfig, space: SpaceConfig):
        self.config = config
        self.space = space
        self.spatial = space.op_set != "toy"
        C_in = config.input_shape[0]
        C = config.init_channels
        C_stem = config.stem_multiplier * C
        k = 3 if self.spatial else 1
        self.stem = Sequential("stem", Conv("stem.conv", C_in, C_stem, k, 1, k // 2), BN("stem.bn", C_stem))
        C_pp, C_p, C_curr = C_stem, C_stem, C
        self.cells: list[Cell] = []
        reduction_prev = False
        for c in range(config.num_cells):
            reduction = config.is_reduction(c)
            if reduction:
                C_curr *= 2
            cell = Cell(c, space, C_pp, C_p, C_curr, reduction, reduction_prev, self.spatial)
            self.cells.append(cell)
            reduction_prev = reduction
            C_pp, C_p = C_p, space.N * C_curr
        self.head_features = C_p

    # parameters ---------------------------------------------------------
    def _modules(self, sample: ArchSample | None) -> Iterator[Module]:
        yield self.stem
        for cell in self.cells:
            yield from cell.shared_modules()
            if sample is None:
                yield from cell.edges.values()
            else:
                kind = sample.reduction if cell.reduction else sample.normal
                for key in sorted(cell.active_edges(kind)):
                    yield cell.edges[key]

    def param_specs(self, sample: ArchSample | None = None) -> list[ParamSpec]:
        specs = [s for m in self._modules(sample) for s in m.specs()]
        specs.append(ParamSpec("head.w", (self.config.num_classes, self.head_features), "linear"))
        specs.append(ParamSpec("head.b", (self.config.num_classes,), "linear"))
        return specs

    def stat_specs(self, sample: ArchSample | None = None) -> list[tuple[str, int]]:
        return [s for m in self._modules(sample) for s in m.stat_keys()]

    def build(self, seed: int, sample: ArchSample | None = None) -> "WeightStore":
        """Allocate weights; with `sample`, only that child's paths are allocated."""
        if sample is not None:
            check_valid(sample, self.space)
        params = {s.key: Tensor(_init_param(s, seed), requires_grad=True) for s in self.param_specs(sample)}
        stats = {k: RunningStats(c) for k, c in self.stat_specs(sample)}
        return WeightStore(params, stats)

    def edge_module_count(self, cell_index: int) -> int:
        return len(self.cells[cell_index].edges)

    # execution ------------------------------------------------------------
    def _prepare(self, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.config.input_shape):
            raise T.ShapeError(f"batch shape {x.shape[1:]} does not match input_shape {self.config.input_shape}")
        if not self.spatial and x.ndim == 2:
            x = x[:, :, None, None]
        return Tensor(x)

    def _head(self, ctx: Ctx, s1: Tensor) -> Tensor:
        p = ctx.store.params
        return T.linear(T.global_avg_pool(s1), p["head.w"], p["head.b"])

    def forward_child(self, store: "WeightStore", sample: ArchSample, x, y,
                      training: bool = True, update_stats: bool = True) -> ChildExecution:
        check_valid(sample, self.space)
        ctx = Ctx(store, training, update_stats)
        s0 = s1 = self.stem(ctx, self._prepare(x))
        for cell in self.cells:
            kind = sample.reduction if cell.reduction else sample.normal
            s0, s1 = s1, cell.forward(ctx, s0, s1, kind)
        logits = self._head(ctx, s1)
        return ChildExecution(sample, logits, T.softmax_cross_entropy(logits, y))

    def forward_dense(self, store: "WeightStore", x, y, training: bool = True) -> ChildExecution:
        ctx = Ctx(store, training, False)
        s0 = s1 = self.stem(ctx, self._prepare(x))
        for cell in self.cells:
            s0, s1 = s1, cell.forward_dense(ctx, s0, s1)
        logits = self._head(ctx, s1)
        return ChildExecution(None, logits, T.softmax_cross_entropy(logits, y))

    def evaluate(self, store: "WeightStore", sample: ArchSample, x, y, batch_size: int = 256,
                 training: bool = False) -> tuple[float, float]:
        """(accuracy, summed log-likelihood) without recording a graph.

        With training=True batch statistics are used (search-time evaluation
        on shared weights); running statistics are never updated.
        """
        correct, log_lik = 0, 0.0
        with T.no_grad():
            for start in range(0, len(y), batch_size):
                xb, yb = x[start : start + batch_size], y[start : start + batch_size]
                if training and len(yb) < 2:
                    continue
                ex = self.forward_child(store, sample, xb, yb, training=training, update_stats=False)
                correct += ex.ce.correct
                log_lik += ex.log_lik
        return correct / max(len(y), 1), log_lik


def backward_child(execution: ChildExecution, store: "WeightStore") -> dict[str, np.ndarray]:
    """Backpropagate the mean loss; returns gradients of the reached parameters only."""
    store.zero_grad()
    execution.loss.backward()
    grads = {k: p.grad for k, p in store.params.items() if p.grad is not None}
    store.zero_grad()
    return grads


@dataclass
class WeightStore:
    params: dict[str, Tensor]
    stats: dict[str, RunningStats] = field(default_factory=dict)

    def keys(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        for k, s in self.stats.items():
            out[f"{k}.running_mean"] = s.mean
            out[f"{k}.running_var"] = s.var
        return out

    def save(self, path):
        with open(path, "wb") as f:
            f.write(dump_weights(self.arrays()))

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        for k, p in self.params.items():
            if k in arrays:
                if arrays[k].shape != p.shape:
                    raise T.ShapeError(f"weight {k}: checkpoint shape {arrays[k].shape} != {p.shape}")
                p.data[...] = arrays[k]
            elif strict:
                raise KeyError(f"weight {k} missing from checkpoint")
        for k, s in self.stats.items():
            if f"{k}.running_mean" in arrays:
                s.mean = arrays[f"{k}.running_mean"].copy()
                s.var = arrays[f"{k}.running_var"].copy()


def dump_weights(arrays: dict[str, np.ndarray]) -> bytes:
    """PSEC container: magic, version, count, then (key, shape, float64 LE data) records."""
    out = [MAGIC, struct.pack("<II", WEIGHTS_FORMAT_VERSION, len(arrays))]
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key], dtype="<f8")
        kb = key.encode("utf-8")
        out.append(struct.pack("<I", len(kb)) + kb)
        out.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def load_weights(path_or_bytes) -> dict[str, np.ndarray]:
    buf = path_or_bytes if isinstance(path_or_bytes, bytes) else open(path_or_bytes, "rb").read()
    if buf[:4] != MAGIC:
        raise ValueError("not a PSEC weight checkpoint (bad magic bytes)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported PSEC version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        key = buf[pos : pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[key] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"PSEC checkpoint has {len(buf) - pos} trailing bytes")
    return out


def expected_edge_modules(space: SpaceConfig) -> int:
    """Candidate (edge, op) modules per cell: one per category of each node's slots."""
    return sum(slot_cardinality(space, n) for n in range(1, space.N + 1))
