"""Fixed-graph neural network toolkit with hand-derived gradients.

Every layer caches what it needs during ``forward`` and consumes that cache in
``backward``. Tensors are plain numpy arrays; convolution inputs are laid out
as ``(batch, channels, points)`` and dense inputs as ``(batch, features)``.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, List, Tuple

import numpy as np


class GraphNotRecorded(RuntimeError):
    """Raised when ``backward`` is called without a matching ``forward``."""


class Param:
    """A trainable tensor together with its gradient buffer."""

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param(shape={self.data.shape}, dtype={self.data.dtype})"


class ParamStore:
    """Named parameters plus Adam moment buffers and the step counter."""

    def __init__(self, params: "OrderedDict[str, Param]"):
        self.params = params
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def __iter__(self) -> Iterator[Tuple[str, Param]]:
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Apply one bias-corrected Adam update in place and return ``store``."""
    for name, p in store.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    store.t += 1
    t = store.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype, copy=False)
    return store


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class: holds parameters, buffers and a train/eval flag."""

    def __init__(self):
        self.training = True
        self._cache = None

    def parameters(self) -> "OrderedDict[str, Param]":
        return OrderedDict()

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _pop_cache(self):
        if self._cache is None:
            raise GraphNotRecorded(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


class Sequential(Module):
    def __init__(self, layers: List[Module]):
        super().__init__()
        self.layers = list(layers)

    def parameters(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for k, p in layer.parameters().items():
                out[f"{i}.{k}"] = p
        return out

    def buffers(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for k, b in layer.buffers().items():
                out[f"{i}.{k}"] = b
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


class PointwiseConv(Module):
    """Kernel-size-1 convolution over ``(B, C_in, P)``, optionally grouped.

    In eval mode the output is accumulated one input channel at a time with
    elementwise operations, so every output column is computed by the same
    arithmetic regardless of its position. This makes point permutations and
    point subsets reproduce results bitwise, which BLAS matmul does not.
    """

    def __init__(self, c_in: int, c_out: int, groups: int = 1, rng=None, dtype=np.float32):
        super().__init__()
        if groups < 1 or c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        rng = rng if rng is not None else np.random.default_rng()
        self.c_in, self.c_out, self.groups = c_in, c_out, groups
        fan_in = c_in // groups
        self.weight = Param(kaiming_uniform(rng, (c_out, fan_in), fan_in, dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))

    def parameters(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def macs_per_point(self) -> int:
        return self.c_in * self.c_out // self.groups

    def _grouped(self, x):
        B, C, P = x.shape
        g = self.groups
        xg = x.reshape(B, g, C // g, P)
        wg = self.weight.data.astype(x.dtype, copy=False).reshape(g, self.c_out // g, C // g)
        return xg, wg

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ValueError(f"expected (B, {self.c_in}, P) input, got {x.shape}")
        xg, wg = self._grouped(x)
        b = self.bias.data.astype(x.dtype, copy=False)
        if self.training:
            out = np.matmul(wg[None], xg).reshape(x.shape[0], self.c_out, x.shape[2])
        else:
            out = self._exact(xg, wg, x.shape)
        out = out + b[None, :, None]
        self._cache = x
        return out

    def _exact(self, xg, wg, shape):
        B, _, P = shape
        g, co, ci = wg.shape
        out = np.empty((B, g, co, P), dtype=xg.dtype)
        tmp = np.empty((B, co, P), dtype=xg.dtype)
        for k in range(g):
            acc = out[:, k]
            np.multiply(wg[k, :, 0, None], xg[:, k, 0, None, :], out=acc)
            for j in range(1, ci):
                np.multiply(wg[k, :, j, None], xg[:, k, j, None, :], out=tmp)
                acc += tmp
        return out.reshape(B, g * co, P)

    def backward(self, grad):
        x = self._pop_cache()
        B, C, P = x.shape
        g = self.groups
        xg, wg = self._grouped(x)
        gg = grad.reshape(B, g, self.c_out // g, P)
        dw = np.matmul(gg, xg.transpose(0, 1, 3, 2)).sum(axis=0)
        self.weight.grad += dw.reshape(self.weight.shape).astype(self.weight.grad.dtype, copy=False)
        self.bias.grad += grad.sum(axis=(0, 2)).astype(self.bias.grad.dtype, copy=False)
        dx = np.matmul(wg.transpose(0, 2, 1)[None], gg)
        return dx.reshape(B, C, P)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.n_in, self.n_out = n_in, n_out
        self.weight = Param(kaiming_uniform(rng, (n_out, n_in), n_in, dtype))
        self.bias = Param(np.zeros(n_out, dtype=dtype))

    def parameters(self):
        return OrderedDict(weight=self.weight, bias=self.bias)

    def macs(self) -> int:
        return self.n_in * self.n_out

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected (B, {self.n_in}) input, got {x.shape}")
        self._cache = x
        w = self.weight.data.astype(x.dtype, copy=False)
        return x @ w.T + self.bias.data.astype(x.dtype, copy=False)

    def backward(self, grad):
        x = self._pop_cache()
        self.weight.grad += (grad.T @ x).astype(self.weight.grad.dtype, copy=False)
        self.bias.grad += grad.sum(axis=0).astype(self.bias.grad.dtype, copy=False)
        return grad @ self.weight.data.astype(grad.dtype, copy=False)


class BatchNorm(Module):
    """Batch normalization over channel axis 1 of ``(B, C)`` or ``(B, C, P)``."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self):
        return OrderedDict(gamma=self.gamma, beta=self.beta)

    def buffers(self):
        return OrderedDict(running_mean=self.running_mean, running_var=self.running_var)

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2)

    def _bcast(self, v, x):
        return v[None, :] if x.ndim == 2 else v[None, :, None]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        dt = x.dtype
        gamma = self.gamma.data.astype(dt, copy=False)
        beta = self.beta.data.astype(dt, copy=False)
        if self.training:
            axes = self._axes(x)
            n = x.size // self.channels
            mean = x.mean(axis=axes)
            xc = x - self._bcast(mean, x)
            var = (xc * xc).mean(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * self._bcast(inv_std, x)
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * unbiased
            self._cache = ("train", xhat, inv_std, gamma)
        else:
            inv_std = (1.0 / np.sqrt(self.running_var.astype(dt) + dt.type(self.eps))).astype(dt)
            xhat = (x - self._bcast(self.running_mean.astype(dt, copy=False), x)) * self._bcast(inv_std, x)
            self._cache = ("eval", xhat, inv_std, gamma)
        return xhat * self._bcast(gamma, x) + self._bcast(beta, x)

    def backward(self, grad):
        mode, xhat, inv_std, gamma = self._pop_cache()
        axes = self._axes(grad)
        self.gamma.grad += (grad * xhat).sum(axis=axes).astype(self.gamma.grad.dtype, copy=False)
        self.beta.grad += grad.sum(axis=axes).astype(self.beta.grad.dtype, copy=False)
        dxhat = grad * self._bcast(gamma, grad)
        if mode == "eval":
            return dxhat * self._bcast(inv_std, grad)
        mean_d = dxhat.mean(axis=axes)
        mean_dx = (dxhat * xhat).mean(axis=axes)
        return self._bcast(inv_std, grad) * (
            dxhat - self._bcast(mean_d, grad) - xhat * self._bcast(mean_dx, grad)
        )


class ReLU(Module):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, x.dtype.type(0))

    def backward(self, grad):
        mask = self._pop_cache()
        return np.where(mask, grad, grad.dtype.type(0))


class Dropout(Module):
    """Inverted dropout; identity in eval mode."""

    def __init__(self, rate: float = 0.3, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng()

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._cache = None
            self._identity = True
            return x
        self._identity = False
        keep = self.rng.random(x.shape) >= self.rate
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        mask = keep.astype(x.dtype) * scale
        self._cache = mask
        return x * mask

    def backward(self, grad):
        if getattr(self, "_identity", False):
            return grad
        return grad * self._pop_cache()


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    """Transpose-of-groups permutation along axis 1.

    Channel ``i * (C // groups) + j`` moves to position ``j * groups + i``.
    """
    C = x.shape[1]
    if groups < 1 or C % groups:
        raise ValueError(f"groups={groups} must divide channel count {C}")
    rest = x.shape[2:]
    y = x.reshape(x.shape[0], groups, C // groups, *rest)
    return np.ascontiguousarray(np.swapaxes(y, 1, 2)).reshape(x.shape)


class ChannelShuffle(Module):
    def __init__(self, groups: int):
        super().__init__()
        self.groups = groups

    def forward(self, x):
        self._cache = True
        return channel_shuffle(x, self.groups)

    def backward(self, grad):
        self._pop_cache()
        return channel_shuffle(grad, grad.shape[1] // self.groups)


def max_pool_points(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel maximum over the point axis and the winning point index.

    Ties go to the lowest point index.
    """
    if x.shape[-1] == 0:
        raise ValueError("max pooling over zero points")
    idx = np.argmax(x, axis=-1)
    vals = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]
    return vals, idx


class MaxPoolPoints(Module):
    def forward(self, x):
        vals, idx = max_pool_points(x)
        self.argmax = idx
        self._cache = (x.shape, idx)
        return vals

    def backward(self, grad):
        shape, idx = self._pop_cache()
        dx = np.zeros(shape, dtype=grad.dtype)
        np.put_along_axis(dx, idx[..., None], grad[..., None], axis=-1)
        return dx


class Gain(Module):
    """Elementwise trainable gain, initialised to ones."""

    def __init__(self, n: int, dtype=np.float32):
        super().__init__()
        self.gain = Param(np.ones(n, dtype=dtype))

    def parameters(self):
        return OrderedDict(gain=self.gain)

    def forward(self, x):
        self._cache = x
        return x * self.gain.data.astype(x.dtype, copy=False)

    def backward(self, grad):
        x = self._pop_cache()
        self.gain.grad += (grad * x).sum(axis=0).astype(self.gain.grad.dtype, copy=False)
        return grad * self.gain.data.astype(grad.dtype, copy=False)


class Scale(Module):
    def __init__(self, factor: float):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        self._cache = True
        return x * x.dtype.type(self.factor)

    def backward(self, grad):
        self._pop_cache()
        return grad * grad.dtype.type(self.factor)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy in nats and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    n = np.arange(len(labels))
    ce = logsum - z[n, labels]
    grad = softmax(logits)
    grad[n, labels] -= 1
    return ce, grad
