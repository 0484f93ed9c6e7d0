"""Small reverse-mode autodiff over numpy arrays.

Layout is channels-first: sequences are ``[C, T]``, images ``[B, C, H, W]``.
Ops keep the dtype of their inputs (float32 in normal use; the gradient
checks run everything in float64). Every op output is checked for NaN/Inf.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import IndexOutOfRange, NumericError, ShapeMismatch

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
RELU_CAP = 20.0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                stack.extend((p, False) for p in n._parents if p.requires_grad)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


class Parameter(Tensor):
    """A leaf tensor that accumulates ``grad``."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")
    return arr


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


# -- elementwise ------------------------------------------------------------

def add(*xs) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    out = ts[0].data
    for t in ts[1:]:
        out = out + t.data
    shapes = [t.shape for t in ts]

    def backward(g):
        return [_unbroadcast(g, s) for s in shapes]

    return _result(out, ts, backward, "add")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), [x], lambda g: [g * mask], "relu")


def clipped_relu(x, cap: float = RELU_CAP) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, 0, cap).astype(x.data.dtype)
    mask = (x.data > 0) & (x.data < cap)
    return _result(out, [x], lambda g: [g * mask], "clipped_relu")


def sigmoid_array(z):
    return expit(z)


def gated_unit(x_filter, x_gate) -> Tensor:
    """tanh(filter) * sigmoid(gate)."""
    f, g_ = as_tensor(x_filter), as_tensor(x_gate)
    if f.shape != g_.shape:
        raise ShapeMismatch(f"gated_unit: filter {f.shape} vs gate {g_.shape}")
    t = np.tanh(f.data)
    s = sigmoid_array(g_.data)

    def backward(g):
        return [g * s * (1 - t * t), g * t * s * (1 - s)]

    return _result(t * s, [f, g_], backward, "gated_unit")


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    x = as_tensor(x)
    if not train or rate <= 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _result(x.data * keep, [x], lambda g: [g * keep], "dropout")


# -- linear maps --------------------------------------------------------------

def dense(x, weight, bias=None) -> Tensor:
    """Pointwise linear map over channels: ``W @ x + b`` for x ``[C_in, T]`` or ``[C_in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    parents = [x, weight]
    if weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"dense: weight {weight.shape} vs input {x.shape}")
    out = weight.data @ x.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"dense: bias {bias.shape} vs weight {weight.shape}")
        out = out + (bias.data[:, None] if x.data.ndim == 2 else bias.data)
        parents.append(bias)
    vec = x.data.ndim == 1

    def backward(g):
        gx = weight.data.T @ g
        gw = np.outer(g, x.data) if vec else g @ x.data.T
        grads = [gx, gw]
        if bias is not None:
            grads.append(g if vec else g.sum(axis=1))
        return grads

    return _result(out, parents, backward, "dense")


def embedding(table, indices) -> Tensor:
    """Rows of ``table`` [N, D] picked by ``indices`` [T], laid out as [D, T]."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexOutOfRange(f"embedding: index outside [0, {table.shape[0] - 1}]")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g.T)
        return [gt]

    return _result(table.data[idx].T.copy(), [table], backward, "embedding")


def _conv_pads(T: int, K: int, stride: int, dilation: int, padding: str):
    T_out = -(-T // stride)
    span = (K - 1) * dilation
    if padding == "causal":
        left = span
        right = max(0, (T_out - 1) * stride + span + 1 - T - left)
    elif padding == "same":
        total = max(0, (T_out - 1) * stride + span + 1 - T)
        left = total // 2
        right = total - left
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return T_out, left, right


def conv1d(x, weight, bias=None, stride: int = 1, dilation: int = 1, padding: str = "causal") -> Tensor:
    """1-D convolution of x ``[C_in, T]`` with weight ``[C_out, C_in, K]``.

    ``causal`` pads (K-1)*dilation zeros on the left only; ``same`` splits the
    padding evenly (extra zero on the right). Output length is ceil(T/stride).
    Tap ``k`` of the kernel reads ``x[t*stride + k*dilation - left]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 3 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv1d: weight {weight.shape} vs input {x.shape}")
    if stride < 1 or dilation < 1:
        raise ValueError("conv1d: stride and dilation must be >= 1")
    C_out, C_in, K = weight.shape
    T = x.shape[1]
    T_out, left, right = _conv_pads(T, K, stride, dilation, padding)
    xp = np.pad(x.data, ((0, 0), (left, right)))
    stop = (T_out - 1) * stride + 1
    taps = [np.ascontiguousarray(xp[:, k * dilation:k * dilation + stop:stride]) for k in range(K)]
    # contiguous per-tap matrices keep matmul on the BLAS path
    wk = [np.ascontiguousarray(weight.data[:, :, k]) for k in range(K)]
    out = wk[0] @ taps[0]
    for k in range(1, K):
        out += wk[k] @ taps[k]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)

    def backward(g):
        gw = np.stack([g @ taps[k].T for k in range(K)], axis=2)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, k * dilation:k * dilation + stop:stride] += wk[k].T @ g
        grads = [gxp[:, left:left + T], gw]
        if bias is not None:
            grads.append(g.sum(axis=1))
        return grads

    return _result(out, parents, backward, "conv1d")


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' 2-D convolution, x ``[B, C_in, H, W]``, weight ``[C_out, C_in, kh, kw]`` (odd kernel)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv2d: weight {weight.shape} vs input {x.shape}")
    C_out, C_in, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("conv2d: kernel sizes must be odd")
    B, _, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # cols: [C_in*kh*kw, B*H*W]
    cols = np.stack(
        [xp[:, :, i:i + H, j:j + W] for i in range(kh) for j in range(kw)], axis=2
    )  # [B, C_in, kh*kw, H, W]
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(C_in * kh * kw, B * H * W)
    wmat = weight.data.reshape(C_out, -1)
    out = (wmat @ cols).reshape(C_out, B, H, W).transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(C_out, -1)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ gmat).reshape(C_in, kh * kw, B, H, W)
        gxp = np.zeros_like(xp)
        for n, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
            gxp[:, :, i:i + H, j:j + W] += gcols[:, n].transpose(1, 0, 2, 3)
        grads = [gxp[:, :, ph:ph + H, pw:pw + W], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward, "conv2d")


# -- normalization and pooling -------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance for batch norm (updated in place)."""

    def __init__(self, channels: int, mean=None, var=None):
        self.mean = np.zeros(channels, np.float32) if mean is None else np.array(mean, np.float32)
        self.var = np.ones(channels, np.float32) if var is None else np.array(var, np.float32)


def batch_norm(x, gamma, beta, stats: RunningStats, train: bool, channel_axis: int = 0) -> Tensor:
    """Normalize per channel over every other axis.

    Train mode uses batch statistics (accumulated in float64) and folds them
    into ``stats`` with momentum 0.9; eval mode uses ``stats``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[channel_axis]
    if gamma.shape != (C,) or beta.shape != (C,) or stats.mean.shape != (C,):
        raise ShapeMismatch(f"batch_norm: {C} channels vs gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(a for a in range(x.data.ndim) if a != channel_axis)
    bshape = [1] * x.data.ndim
    bshape[channel_axis] = C
    dtype = x.data.dtype
    if train:
        x64 = x.data.astype(np.float64)
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        stats.mean = (BN_MOMENTUM * stats.mean + (1 - BN_MOMENTUM) * mean).astype(np.float32)
        stats.var = (BN_MOMENTUM * stats.var + (1 - BN_MOMENTUM) * var).astype(np.float32)
        mean, var = mean.astype(dtype), var.astype(dtype)
    else:
        mean, var = stats.mean.astype(dtype), stats.var.astype(dtype)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    n = x.data.size // C

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if train:
            gx = (inv.reshape(bshape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return [gx, ggamma, gbeta]

    return _result(out.astype(dtype), [x, gamma, beta], backward, "batch_norm")


def max_pool_rows(x, size: int = 2) -> Tensor:
    """Max over non-overlapping groups of ``size`` rows (axis -2) of a [B, C, H, W] map; leftovers dropped."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    Ho = H // size
    if Ho == 0:
        raise ShapeMismatch(f"max_pool_rows: height {H} smaller than pool {size}")
    blocks = x.data[:, :, :Ho * size].reshape(B, C, Ho, size, W)
    arg = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, arg[:, :, :, None], axis=3)[:, :, :, 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[:, :, :, None], g[:, :, :, None], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, :Ho * size] = gb.reshape(B, C, Ho * size, W)
        return [gx]

    return _result(out, [x], backward, "max_pool_rows")


def mean_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        return [np.broadcast_to(np.expand_dims(g, axis), x.shape) / n]

    return _result(x.data.mean(axis=axis), [x], backward, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), [x], lambda g: [g.reshape(x.shape)], "reshape")


def transpose2d(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.ascontiguousarray(x.data.T), [x], lambda g: [g.T], "transpose")


# -- losses -----------------------------------------------------------------

def log_softmax_array(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_array(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.exp(log_softmax_array(logits, axis))


def cross_entropy_and_grad(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean over columns of -log softmax(logits[:, t])[targets[t]] and its gradient."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    C, T = logits.shape
    if targets.shape != (T,):
        raise ShapeMismatch(f"cross entropy: {T} columns vs {targets.size} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexOutOfRange(f"cross entropy: target outside [0, {C - 1}]")
    logp = log_softmax_array(logits.astype(np.float64), axis=0)
    cols = np.arange(T)
    loss = float(-logp[targets, cols].mean())
    grad = np.exp(logp)
    grad[targets, cols] -= 1.0
    grad /= T
    if not math.isfinite(loss):
        raise NumericError("cross entropy: non-finite loss")
    return loss, grad.astype(logits.dtype)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Scalar-tensor form of :func:`cross_entropy_and_grad` for use with ``backward``."""
    logits = as_tensor(logits)
    loss, grad = cross_entropy_and_grad(logits.data, targets)
    out = np.asarray(loss, dtype=logits.data.dtype)
    return _result(out, [logits], lambda g: [grad * g], "softmax_cross_entropy")


# -- optimizer ----------------------------------------------------------------

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; ``step`` counts from 1."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)


class Adam:
    """Adam over a name -> array mapping with per-name step counts.

    Per-name counts let a caller update a subset (one embedding row, say)
    without touching the moments or values of anything else.
    """

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def update(self, name: str, value: np.ndarray, grad: np.ndarray) -> None:
        _finite(grad, f"adam[{name}]")
        if name not in self.m:
            self.m[name] = np.zeros(value.shape, np.float32)
            self.v[name] = np.zeros(value.shape, np.float32)
            self.steps[name] = 0
        self.steps[name] += 1
        adam_step(value, grad.astype(np.float32, copy=False), self.m[name], self.v[name],
                  self.steps[name], self.lr, self.betas, self.eps)

    def step(self, params: dict[str, Parameter], names: Iterable[str] | None = None) -> None:
        for name in (params if names is None else names):
            p = params[name]
            if p.grad is not None:
                self.update(name, p.data, p.grad)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def take_rows(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-D tensor."""
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return [gx]

    return _result(x.data[start:stop], [x], backward, "take_rows")
