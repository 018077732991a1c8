"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the cell primitives, the stem and the
classifier head are provided. Every kernel sums in a fixed order so that two
identical passes give bit-identical results.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import _kernels

_GRAD_ENABLED = True
_TRACKER: "ActivationTracker | None" = None


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ActivationTracker:
    """Counts elements of op-produced tensors that are currently alive.

    Tensors are freed by reference counting, so `live` tracks exactly what
    the Python process still holds. Tensors flagged with `mark_op_output`
    are additionally counted in the `op` bucket.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.live_op = 0
        self.peak_op = 0
        self.allocations = 0

    def reset_peak(self):
        self.peak = self.live
        self.peak_op = self.live_op

    def _register(self, t: "Tensor"):
        rec = [t.data.size, False]
        t._track = rec
        self.live += rec[0]
        self.allocations += 1
        if self.live > self.peak:
            self.peak = self.live
        weakref.finalize(t, self._free, rec)

    def _free(self, rec):
        self.live -= rec[0]
        if rec[1]:
            self.live_op -= rec[0]

    def mark_op_output(self, t: "Tensor"):
        rec = getattr(t, "_track", None)
        if rec is None or rec[1]:
            return
        rec[1] = True
        self.live_op += rec[0]
        if self.live_op > self.peak_op:
            self.peak_op = self.live_op

    def report(self) -> dict:
        return {
            "peak_elements": self.peak,
            "peak_op_output_elements": self.peak_op,
            "live_elements": self.live,
            "allocations": self.allocations,
        }


@contextlib.contextmanager
def track_activations(tracker: ActivationTracker | None = None):
    global _TRACKER
    tracker = tracker or ActivationTracker()
    prev = _TRACKER
    _TRACKER = tracker
    try:
        yield tracker
    finally:
        _TRACKER = prev


def mark_op_output(t: "Tensor"):
    if _TRACKER is not None:
        _TRACKER.mark_op_output(t)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    seen.add(id(root))
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    if _TRACKER is not None:
        _TRACKER._register(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise / structural ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def identity(a: Tensor) -> Tensor:
    return _make(a.data, (a,), lambda g: (g,))


def tsum(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def global_avg_pool(a: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    B, C, H, W = a.shape
    n = H * W

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / n, a.shape).copy(),)

    return _make(a.data.reshape(B, C, n).sum(axis=2) / n, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (B, F) @ w.T (F, O) + b."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
        parents = (x, w, b)

    def backward(g):
        grads = (g @ w.data, g.T @ x.data)
        if b is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return _make(out, parents, backward)


# convolution / pooling --------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _window(xp: np.ndarray, i: int, j: int, dilation: int, stride: int, Ho: int, Wo: int):
    r, c = i * dilation, j * dilation
    return xp[:, :, r : r + stride * (Ho - 1) + 1 : stride, c : c + stride * (Wo - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    w: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """Grouped, dilated 2-D cross-correlation without bias.

    `w` has shape (out_ch, in_ch // groups, kh, kw). The kernel is applied as
    a fixed-order sum over kernel offsets; the depthwise case (one input and
    one output channel per group) runs through a compiled kernel.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ShapeError(f"conv2d: channels in={C} out={O} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(
            f"conv2d: weight in_ch/groups dimension is {Cg}, expected {C // groups} "
            f"(input channels {C}, groups {groups})"
        )
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} dilation={dilation} padding={padding}")
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = w.data
    G, Og = groups, O // groups
    depthwise = Cg == 1 and Og == 1

    if depthwise:
        xp = np.ascontiguousarray(xp)
        wdw = np.ascontiguousarray(wd[:, 0])

        def backward_dw(g):
            gxp, gw = _kernels.depthwise_backward(xp, wdw, np.ascontiguousarray(g), stride, dilation)
            gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
            return gx, gw[:, None]

        return _make(_kernels.depthwise_forward(xp, wdw, stride, dilation, Ho, Wo), (x, w), backward_dw)

    if kh == kw == 1 and G == 1:
        xs = np.ascontiguousarray(xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo]).reshape(B, C, Ho * Wo)
        w2 = wd[:, :, 0, 0]

        def backward_pw(g):
            gs = g.reshape(B, O, Ho * Wo)
            gw = (gs @ xs.transpose(0, 2, 1)).sum(axis=0)
            gxs = (w2.T @ gs).reshape(B, C, Ho, Wo)
            if stride == 1 and not p:
                gx = gxs
            else:
                gxp = np.zeros_like(xp)
                gxp[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride] = gxs
                gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
            return gx, gw[:, :, None, None]

        return _make((w2 @ xs).reshape(B, O, Ho, Wo), (x, w), backward_pw)

    out = np.zeros((B, O, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            win = _window(xp, i, j, dilation, stride, Ho, Wo)
            for gi in range(G):
                xs = win[:, gi * Cg : (gi + 1) * Cg].reshape(B, Cg, Ho * Wo)
                out[:, gi * Og : (gi + 1) * Og] += (wd[gi * Og : (gi + 1) * Og, :, i, j] @ xs).reshape(
                    B, Og, Ho, Wo
                )

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                win = _window(xp, i, j, dilation, stride, Ho, Wo)
                gwin = _window(gxp, i, j, dilation, stride, Ho, Wo)
                for gi in range(G):
                    gs = g[:, gi * Og : (gi + 1) * Og].reshape(B, Og, Ho * Wo)
                    xs = win[:, gi * Cg : (gi + 1) * Cg].reshape(B, Cg, Ho * Wo)
                    gw[gi * Og : (gi + 1) * Og, :, i, j] = (gs @ xs.transpose(0, 2, 1)).sum(axis=0)
                    gwin[:, gi * Cg : (gi + 1) * Cg] += (
                        wd[gi * Og : (gi + 1) * Og, :, i, j].T @ gs
                    ).reshape(B, Cg, Ho, Wo)
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, gw

    return _make(out, (x, w), backward)


def pool2d(x: Tensor, kind: str, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max or average pooling. Padding never contributes to a window."""
    if stride < 1:
        raise ValueError(f"pool2d: stride must be >= 1, got {stride}")
    if kind not in ("avg", "max"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kernel, stride, padding, 1)
    Wo = conv_output_size(W, kernel, stride, padding, 1)
    p = padding
    pad = ((0, 0), (0, 0), (p, p), (p, p))

    if kind == "avg":
        xp = np.pad(x.data, pad)
        ones = np.pad(np.ones((1, 1, H, W)), pad)
        total = np.zeros((B, C, Ho, Wo))
        count = np.zeros((1, 1, Ho, Wo))
        for i in range(kernel):
            for j in range(kernel):
                total += _window(xp, i, j, 1, stride, Ho, Wo)
                count += _window(ones, i, j, 1, stride, Ho, Wo)

        def backward(g):
            gxp = np.zeros_like(xp)
            gc = g / count
            for i in range(kernel):
                for j in range(kernel):
                    _window(gxp, i, j, 1, stride, Ho, Wo)[...] += gc
            return (gxp[:, :, p : p + H, p : p + W],)

        return _make(total / count, (x,), backward)

    xp = np.pad(x.data, pad, constant_values=-np.inf)
    best, arg = _kernels.maxpool_forward(xp, kernel, stride, Ho, Wo)

    def backward(g):
        gxp = _kernels.maxpool_backward(xp.shape, arg, np.ascontiguousarray(g), kernel, stride)
        return (gxp[:, :, p : p + H, p : p + W],)

    return _make(best, (x,), backward)


# normalisation -----------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance buffers of a batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats | None = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Batch norm over (batch, H, W) per channel.

    In training mode batch statistics are used and, when `running` is given,
    the running buffers are updated (unbiased variance, PyTorch convention).
    In eval mode `running` must be supplied.
    """
    B, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: gamma {gamma.shape} / beta {beta.shape} do not match {C} channels")
    x4 = np.ascontiguousarray(x.data.reshape(B, C, -1, 1))
    n = x4.size // C
    if training:
        if B < 2:
            raise ValueError("batchnorm: training mode needs batch size >= 2")
        mean, var = _kernels.channel_moments(x4)
        if running is not None:
            m = running.momentum
            running.mean = (1 - m) * running.mean + m * mean
            running.var = (1 - m) * running.var + m * var * n / (n - 1)
    else:
        if running is None:
            raise ValueError("batchnorm: eval mode needs running statistics")
        mean, var = running.mean, running.var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat, out = _kernels.bn_normalize(x4, mean, invstd, gamma.data, beta.data)
    out = out.reshape(x.shape)

    def backward(g):
        g4 = np.ascontiguousarray(g.reshape(B, C, -1, 1))
        sg, sgx = _kernels.channel_sums(g4, xhat)
        scale = gamma.data * invstd
        if training:
            dx = _kernels.bn_input_grad(g4, xhat, scale, sg / n, sgx / n)
        else:
            dx = g4 * scale.reshape(1, C, 1, 1)
        return dx.reshape(x.shape), sgx, sg

    return _make(out, (x, gamma, beta), backward)


# loss --------------------------------------------------------------------

class CrossEntropy(NamedTuple):
    loss: Tensor  # mean negative log-likelihood
    log_lik: float  # sum over the batch of log p(y|x)
    correct: int


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> CrossEntropy:
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0, {C}): min={labels.min()} max={labels.max()}")
    logp = log_softmax(logits.data)
    picked = logp[np.arange(B), labels]
    log_lik = float(picked.sum())

    def backward(g):
        d = np.exp(logp)
        d[np.arange(B), labels] -= 1.0
        return (d * (g / B),)

    loss = _make(np.array(-log_lik / B), (logits,), backward)
    correct = int((logits.data.argmax(axis=1) == labels).sum())
    return CrossEntropy(loss, log_lik, correct)


def gradient(t: Tensor) -> np.ndarray:
    """`t.grad`, or zeros when no gradient reached `t`."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)
