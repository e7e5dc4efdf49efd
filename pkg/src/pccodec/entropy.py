"""Fully factorized learned entropy model and its integer coding tables.

Each latent channel owns a small monotone network mapping a real value to the
logit of a cumulative distribution. Monotonicity holds by construction:
matrices pass through softplus (nonnegative), and the per-layer nonlinearity
``z + tanh(a) * tanh(z)`` has derivative ``1 + tanh(a) * (1 - tanh(z)**2) >= 0``.
"""

from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .nn import GraphNotRecorded, Module, Param

LIKELIHOOD_FLOOR = 2.0**-24
TAIL_MASS = 1e-9
PRECISION = 16
TOTAL_FREQ = 1 << PRECISION
MAX_SUPPORT = 1 << 12


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def quantize(y: np.ndarray) -> np.ndarray:
    """Round half away from zero, returned as int64."""
    y = np.asarray(y)
    return (np.sign(y) * np.floor(np.abs(y) + 0.5)).astype(np.int64)


def noise_quantize(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training-time quantization proxy: add i.i.d. uniform(-0.5, 0.5) noise."""
    u = rng.uniform(-0.5, 0.5, size=np.shape(y)).astype(np.asarray(y).dtype)
    return y + u


class FactorizedPrior(Module):
    """Per-channel non-parametric density with a differentiable CDF."""

    def __init__(
        self,
        channels: int,
        filters: Sequence[int] = (3, 3, 3),
        init_scale: float = 10.0,
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices: List[Param] = []
        self.biases: List[Param] = []
        self.factors: List[Param] = []
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(Param(np.full((channels, dims[i + 1], dims[i]), init, dtype=dtype)))
            self.biases.append(Param(rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1)).astype(dtype)))
            if i < len(dims) - 2:
                self.factors.append(Param(np.zeros((channels, dims[i + 1], 1), dtype=dtype)))

    def parameters(self):
        out = OrderedDict()
        for i, p in enumerate(self.matrices):
            out[f"matrix{i}"] = p
        for i, p in enumerate(self.biases):
            out[f"bias{i}"] = p
        for i, p in enumerate(self.factors):
            out[f"factor{i}"] = p
        return out

    # -- cumulative logits -------------------------------------------------

    def _logits(self, x: np.ndarray, record: bool):
        """Logits of the CDF for ``x`` shaped ``(N, 1, M)``."""
        dt = x.dtype
        tape = []
        h = x
        n_layers = len(self.matrices)
        for i in range(n_layers):
            raw = self.matrices[i].data.astype(dt, copy=False)
            w = _softplus(raw)
            z = np.matmul(w, h) + self.biases[i].data.astype(dt, copy=False)
            if i < n_layers - 1:
                ta = np.tanh(self.factors[i].data.astype(dt, copy=False))
                tz = np.tanh(z)
                tape.append((h, w, raw, ta, tz))
                h = z + ta * tz
            else:
                tape.append((h, w, raw, None, None))
                h = z
        return h, (tape if record else None)

    def _logits_backward(self, tape, dlogits):
        n_layers = len(self.matrices)
        d = dlogits
        for i in reversed(range(n_layers)):
            h, w, raw, ta, tz = tape[i]
            if i < n_layers - 1:
                dz = d * (1.0 + ta * (1.0 - tz * tz))
                df = (d * tz).sum(axis=2, keepdims=True) * (1.0 - ta * ta)
                self.factors[i].grad += df.astype(self.factors[i].grad.dtype, copy=False)
            else:
                dz = d
            dw = np.matmul(dz, h.transpose(0, 2, 1))
            self.matrices[i].grad += (dw * _sigmoid(raw)).astype(self.matrices[i].grad.dtype, copy=False)
            self.biases[i].grad += dz.sum(axis=2, keepdims=True).astype(self.biases[i].grad.dtype, copy=False)
            d = np.matmul(w.transpose(0, 2, 1), dz)
        return d

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """CDF values for ``x`` shaped ``(M, N)``; evaluated in float64."""
        x = np.asarray(x, dtype=np.float64)
        logits, _ = self._logits(x.T[:, None, :], record=False)
        return _sigmoid(logits[:, 0, :]).T

    def cdf_logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        logits, _ = self._logits(x.T[:, None, :], record=False)
        return logits[:, 0, :].T

    # -- likelihoods -------------------------------------------------------

    def _check(self, y):
        y = np.asarray(y)
        if y.ndim == 1:
            y = y[None]
        if y.shape[-1] != self.channels:
            raise ValueError(f"latent length {y.shape[-1]} != channel count {self.channels}")
        return y

    def _likelihood_raw(self, y, record: bool):
        B = y.shape[0]
        x = np.concatenate([y - 0.5, y + 0.5], axis=0).T[:, None, :]
        logits, tape = self._logits(x, record)
        lower = logits[:, 0, :B].T
        upper = logits[:, 0, B:].T
        # evaluate on the tail that keeps sigmoid away from 1 for precision
        s = np.where(lower + upper > 0, -1.0, 1.0).astype(y.dtype)
        p = s * (_sigmoid(s * upper) - _sigmoid(s * lower))
        return p, lower, upper, tape

    def likelihood(self, y: np.ndarray, record: bool = False) -> np.ndarray:
        """Probability mass of the unit interval around each latent value."""
        y = self._check(y)
        p, lower, upper, tape = self._likelihood_raw(y, record)
        floor = y.dtype.type(LIKELIHOOD_FLOOR) if y.dtype.kind == "f" else LIKELIHOOD_FLOOR
        out = np.maximum(p, floor)
        if record:
            self._cache = (tape, lower, upper, p, out)
        return out

    def rate_bits(self, y: np.ndarray, record: bool = False) -> np.ndarray:
        """Per-sample estimated rate, sum over channels of ``-log2 p``."""
        y = np.asarray(y)
        if y.dtype.kind != "f":
            y = y.astype(np.float64)
        p = self.likelihood(y, record=record)
        return -np.log2(p).sum(axis=-1)

    def backward_rate(self, grad_rate: np.ndarray) -> np.ndarray:
        """Backpropagate ``d loss / d rate_bits`` (shape ``(B,)``) to ``y``.

        Parameter gradients accumulate in place. At the likelihood floor the
        gradient is kept only when it would push the likelihood upward.
        """
        if self._cache is None:
            raise GraphNotRecorded("FactorizedPrior.backward_rate called before rate_bits(record=True)")
        tape, lower, upper, p, out = self._cache
        self._cache = None
        dt = out.dtype
        dp = -np.asarray(grad_rate, dtype=dt)[:, None] / (out * dt.type(np.log(2.0)))
        floored = p < out
        dp = np.where(floored & (dp > 0), dt.type(0), dp)
        su = _sigmoid(upper)
        sl = _sigmoid(lower)
        dupper = dp * su * (1 - su)
        dlower = -dp * sl * (1 - sl)
        dlogits = np.concatenate([dlower, dupper], axis=0).T[:, None, :]
        dx = self._logits_backward(tape, dlogits)[:, 0, :].T
        B = lower.shape[0]
        return dx[:B] + dx[B:]


@dataclass
class CodingTable:
    """Integer CDFs for the range coder, one row per channel.

    Channel ``i`` codes symbols ``offset[i] .. offset[i] + length[i] - 1`` as
    indices ``0 .. length[i] - 1``; index ``length[i]`` is the escape symbol.
    ``cdf[i, :length[i] + 2]`` is strictly increasing from 0 to ``2**16``.
    """

    offset: np.ndarray
    length: np.ndarray
    cdf: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.int32)
        self.length = np.asarray(self.length, dtype=np.int32)
        self.cdf = np.asarray(self.cdf, dtype=np.int32)

    @property
    def channels(self) -> int:
        return len(self.offset)

    def channel_cdf(self, i: int) -> np.ndarray:
        return self.cdf[i, : self.length[i] + 2]

    def validate(self) -> None:
        if self.cdf.ndim != 2 or len(self.length) != self.channels or self.cdf.shape[0] != self.channels:
            raise ValueError("coding table arrays have inconsistent shapes")
        for i in range(self.channels):
            c = self.channel_cdf(i)
            if c[0] != 0 or c[-1] != TOTAL_FREQ or np.any(np.diff(c) <= 0):
                raise ValueError(f"corrupt coding table for channel {i}")

    def probabilities(self, i: int) -> np.ndarray:
        """Probabilities for channel ``i`` (support symbols, then escape)."""
        return np.diff(self.channel_cdf(i)) / TOTAL_FREQ

    def symbol_bits(self, i: int, value: int) -> float:
        """Ideal code length of ``value`` under channel ``i``, escape bytes included."""
        k = int(value) - int(self.offset[i])
        c = self.channel_cdf(i)
        if 0 <= k < self.length[i]:
            return -np.log2((c[k + 1] - c[k]) / TOTAL_FREQ)
        n = self.length[i]
        return -np.log2((c[n + 1] - c[n]) / TOTAL_FREQ) + 8 * len(zigzag_varint(int(value)))

    def entropy_bits(self, symbols: Sequence[int]) -> float:
        return float(sum(self.symbol_bits(i, s) for i, s in enumerate(symbols)))


def zigzag_varint(value: int) -> bytes:
    z = (value << 1) ^ (value >> 63) if -(1 << 63) <= value < (1 << 63) else None
    if z is None:
        raise OverflowError("escape value out of 64-bit range")
    z &= (1 << 64) - 1
    out = bytearray()
    while True:
        b = z & 0x7F
        z >>= 7
        if z:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def quantize_pmf(pmf: np.ndarray, total: int = TOTAL_FREQ) -> np.ndarray:
    """Integer frequencies summing to ``total``, each at least 1.

    Starts from rounding, then repairs the sum one unit at a time, always
    touching the entry whose error is most favourable. This keeps the largest
    per-symbol deviation small when many tail symbols are forced up to 1.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if len(pmf) > total:
        raise ValueError("more symbols than probability units")
    target = pmf / pmf.sum() * total
    freq = np.maximum(1, np.rint(target)).astype(np.int64)
    diff = int(freq.sum()) - total
    while diff > 0:
        excess = np.where(freq > 1, freq - target, -np.inf)
        k = int(np.argmax(excess))
        freq[k] -= 1
        diff -= 1
    while diff < 0:
        k = int(np.argmax(target - freq))
        freq[k] += 1
        diff += 1
    return freq


def _bisect_logit(model: FactorizedPrior, target: float, lo: float, hi: float, iters: int = 80):
    """Per-channel x with cdf_logit(x) == target by bisection (vectorised)."""
    N = model.channels
    lo = np.full(N, lo)
    hi = np.full(N, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        val = model.cdf_logits(mid[None])[0]
        below = val < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def interval_pmf(model: FactorizedPrior, channel_values: np.ndarray) -> np.ndarray:
    """Float64 probability of ``[v - 0.5, v + 0.5]`` for values shaped ``(M, N)``."""
    v = np.asarray(channel_values, dtype=np.float64)
    lower = model.cdf_logits(v - 0.5)
    upper = model.cdf_logits(v + 0.5)
    s = np.where(lower + upper > 0, -1.0, 1.0)
    return s * (_sigmoid(s * upper) - _sigmoid(s * lower))


def build_tables(model: FactorizedPrior, tail_mass: float = TAIL_MASS, search: float = 1e6) -> CodingTable:
    """Derive integer coding tables from a trained model."""
    N = model.channels
    lo_logit = np.log(tail_mass / (1 - tail_mass))
    q_low = _bisect_logit(model, lo_logit, -search, search)
    q_high = _bisect_logit(model, -lo_logit, -search, search)
    mins = np.floor(q_low + 0.5).astype(np.int64)
    maxs = np.ceil(q_high - 0.5).astype(np.int64)
    maxs = np.maximum(maxs, mins)
    width = maxs - mins + 1
    wide = width > MAX_SUPPORT
    if np.any(wide):
        warnings.warn(
            f"{int(wide.sum())} channel(s) have a numerically flat CDF; clamping support to {MAX_SUPPORT} symbols",
            RuntimeWarning,
        )
        centre = np.rint(0.5 * (q_low + q_high)).astype(np.int64)
        mins = np.where(wide, centre - MAX_SUPPORT // 2, mins)
        maxs = np.where(wide, mins + MAX_SUPPORT - 1, maxs)
        width = maxs - mins + 1
    W = int(width.max())
    grid = mins[None, :] + np.arange(W)[:, None]
    pmf_all = np.maximum(interval_pmf(model, grid), 0.0)
    edge_logits = model.cdf_logits(np.stack([mins - 0.5, maxs + 0.5]))
    tails = _sigmoid(edge_logits[0]) + _sigmoid(-edge_logits[1])
    cdf = np.full((N, W + 2), TOTAL_FREQ, dtype=np.int64)
    for i in range(N):
        n = int(width[i])
        freq = quantize_pmf(np.append(pmf_all[:n, i], tails[i]))
        cdf[i, 0] = 0
        cdf[i, 1 : n + 2] = np.cumsum(freq)
    table = CodingTable(offset=mins, length=width, cdf=cdf)
    table.validate()
    return table
