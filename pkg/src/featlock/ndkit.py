"""Small float64 tensor library with reverse-mode autodiff.

Only the pieces MiniDet needs are here: 2D convolution, ReLU, 2x2 max pooling,
channel gathers (the keyed permutation layer), a few reshaping helpers and the
two detection losses.  Everything is float64 and single threaded so that
gradient checks and bit-exact reruns are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer, used to derive child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th child stream of ``seed``."""
    return splitmix64((seed & _MASK64) ^ splitmix64(index & _MASK64))


class Rng:
    """Seeded 64-bit generator.

    The raw stream is PCG64 (XSL-RR 128/64, period 2**128) seeded through
    numpy's ``SeedSequence``; both are fixed, documented algorithms, so the
    stream does not depend on platform.  All derived distributions are
    computed here from raw words rather than through ``numpy.random.Generator``
    methods, whose streams numpy does not promise to keep stable.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def next_u64(self) -> int:
        return int(self._bits.random_raw())

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound

    def uniform(self, size=None) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits each."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(DTYPE) * (1.0 / 9007199254740992.0)
        return u[0] if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        """Standard normals via Box-Muller on pairs of uniforms."""
        n = int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(size)

    def shuffle(self, n: int) -> list[int]:
        """Fisher-Yates permutation of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, index: int) -> "Rng":
        return Rng(derive_seed(self.seed, index))


# ---------------------------------------------------------------------------
# Tensor and graph
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array plus an optional gradient buffer.

    Tensors created by ops remember their parents and a closure that maps the
    output gradient to parent gradients.  ``backward`` walks that graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_retain")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def retain_grad(self) -> "Tensor":
        """Keep this intermediate's gradient in ``.grad`` during backward."""
        self._retain = True
        return self

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(-1)[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate: calling this twice without zeroing adds the
    second gradient to the first.  Visit order is a fixed topological order,
    so accumulation is deterministic.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    return _node(a.data + float(b), (a,), lambda g: (g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
        return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    s = float(b)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def tensor_sum(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, _scalar(g)),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather ``x[idx]`` along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw)


def take_channels(x: Tensor, idx) -> Tensor:
    """Output channel i is input channel ``idx[i]`` (channel axis is -3).

    ``idx`` must be a permutation; the backward pass scatters the upstream
    gradient back through the inverse permutation.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim < 3 or x.shape[-3] != idx.size:
        raise ShapeError(f"take_channels: key of length {idx.size} does not fit shape {x.shape}")
    inv = np.empty_like(idx)
    inv[idx] = np.arange(idx.size)
    return _node(np.take(x.data, idx, axis=-3), (x,), lambda g: (np.take(g, inv, axis=-3),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a (b, c_in, h, w) batch with (c_out, c_in, k, k) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {k}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    y = cols @ wmat.T
    y += bias.data
    out = np.ascontiguousarray(y.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and o < c and pad <= k - 1:
                gx = _conv_input_grad_transposed(g, weight.data, pad)
            else:
                gx = _conv_input_grad_scatter(gm, weight.data, (b, c, h, w), stride, pad, ho, wo)
        return gx, gw, gb

    return _node(out, (x, weight, bias), bw)


def _conv_input_grad_scatter(gm, weight, xshape, stride, pad, ho, wo):
    # columns ordered (k, k, c) so each scatter slice is contiguous in c
    b, c, h, w = xshape
    o, _, k, _ = weight.shape
    w2 = weight.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    dcols = (gm @ w2).reshape(b, ho, wo, k, k, c)
    gxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return np.ascontiguousarray(gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))


def _conv_input_grad_transposed(g, weight, pad):
    # stride 1 only: correlate the padded output grad with the flipped kernel
    b, o, ho, wo = g.shape
    _, c, k, _ = weight.shape
    q = k - 1 - pad
    h, w = ho + 2 * q - k + 1, wo + 2 * q - k + 1
    gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
    win = sliding_window_view(gp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, o * k * k)
    wf = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
    return np.ascontiguousarray((cols @ wf.T).reshape(b, h, w, c).transpose(0, 3, 1, 2))


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling; ties route the gradient to the first element in row-major order."""
    if window != 2 or stride != 2:
        raise ValueError("maxpool2d only supports window=2, stride=2")
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, 2, 2)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Sum of 0.5*d**2 where |d| < 1, else |d| - 0.5, with d = pred - target."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if pred.shape != tgt.shape:
        raise ShapeError(f"smooth_l1: pred {pred.shape} vs target {tgt.shape}")
    d = pred.data - tgt
    small = np.abs(d) < 1.0
    val = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).sum()
    dd = np.where(small, d, np.sign(d))
    if isinstance(target, Tensor):
        return _node(np.array(val), (pred, target), lambda g: (g * dd, -g * dd))
    return _node(np.array(val), (pred,), lambda g: (g * dd,))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross entropy of (n, K) logits against integer labels.

    ``reduction`` is "mean" (the default) or "sum".  An empty batch gives 0.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if n == 0:
        return _node(np.array(0.0), (logits,), lambda g: (np.zeros(logits.shape),))
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    total = -logp[rows, labels].sum()
    scale = 1.0 / n if reduction == "mean" else 1.0

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (_scalar(g) * scale),)

    return _node(np.array(total * scale), (logits,), bw)


# ---------------------------------------------------------------------------
# Parameters and SGD
# ---------------------------------------------------------------------------


@dataclass
class Param:
    value: Tensor
    momentum_buffer: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value.requires_grad = True
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape


def he_normal(rng: Rng, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


def sgd_step(params: Iterable[Param], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0005) -> None:
    """v <- momentum*v + grad + wd*value; value <- value - lr*v; then zero grads."""
    for p in params:
        t = p.value
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        v = p.momentum_buffer
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * t.data
        t.data -= lr * v
        t.grad = None
