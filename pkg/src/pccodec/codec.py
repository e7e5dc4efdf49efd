"""Analysis/synthesis transforms, named configurations and critical points.

Encoder (analysis) for one cloud ``x`` of shape ``(3, P)``::

    x -> [conv1x1 -> BN -> ReLU] * L -> max over points -> gain -> x10 -> y

Decoder (synthesis)::

    y_hat -> FC 512 -> BN -> ReLU -> FC 256 -> BN -> ReLU -> dropout 0.3 -> FC T

The "lite" encoder interleaves two channel shuffles with its grouped layers::

    3 -> (8) -> (8) -> (16) -> shuffle/2 -> (16, g=2) -> shuffle/2 -> (32, g=4)
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .entropy import CodingTable, FactorizedPrior, build_tables, noise_quantize, quantize
from .nn import (
    BatchNorm,
    ChannelShuffle,
    Dropout,
    Gain,
    Linear,
    MaxPoolPoints,
    Module,
    Param,
    ParamStore,
    PointwiseConv,
    ReLU,
    Scale,
    Sequential,
    cross_entropy,
    max_pool_points,
)

VALID_POINTS = (8, 16, 32, 64, 128, 256, 512, 1024)
NUM_CLASSES = 40
LATENT_SCALE = 10.0
CONFIG_IDS = {"full": 0, "lite": 1, "micro": 2}

_ENCODERS = {
    "full": ((64, 1), (64, 1), (64, 1), (128, 1), (1024, 1)),
    "lite": ((8, 1), (8, 1), (16, 1), (16, 2), (32, 4)),
    "micro": ((16, 1),),
}
# shuffle group count inserted before encoder layer index
_SHUFFLES = {"lite": {3: 2, 4: 2}}


@dataclass(frozen=True)
class CodecConfig:
    name: str
    points: int
    encoder: Tuple[Tuple[int, int], ...]
    decoder: Tuple[int, ...] = (512, 256, NUM_CLASSES)
    dropout: float = 0.3
    shuffles: Dict[int, int] = field(default_factory=dict)

    @property
    def latent(self) -> int:
        return self.encoder[-1][0]

    @property
    def classes(self) -> int:
        return self.decoder[-1]

    @property
    def config_id(self) -> int:
        return CONFIG_IDS[self.name]


def get_config(name: str, points: int = 1024) -> CodecConfig:
    """Look up a named configuration for a given input point count."""
    if name not in _ENCODERS:
        raise ValueError(f"unknown codec config {name!r}; choose from {sorted(_ENCODERS)}")
    if points < 1:
        raise ValueError("points must be positive")
    return CodecConfig(name=name, points=points, encoder=_ENCODERS[name], shuffles=dict(_SHUFFLES.get(name, {})))


def config_name(config_id: int) -> str:
    for k, v in CONFIG_IDS.items():
        if v == config_id:
            return k
    raise ValueError(f"unknown config id {config_id}")


def mac_count(config: CodecConfig) -> Tuple[int, int]:
    """(encoder MACs per point, decoder MACs per cloud).

    Batch norm and gain are assumed fused into the convolutions, and shuffles
    are free permutations.
    """
    enc = 0
    c_in = 3
    for c_out, g in config.encoder:
        enc += c_in * c_out // g
        c_in = c_out
    dec = 0
    n_in = config.latent
    for n_out in config.decoder:
        dec += n_in * n_out
        n_in = n_out
    return enc, dec


def _as_batch(points: np.ndarray) -> np.ndarray:
    """Accept ``(P, 3)`` or ``(B, P, 3)`` clouds and return ``(B, 3, P)``."""
    x = np.asarray(points)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected points shaped (P, 3) or (B, P, 3), got {np.shape(points)}")
    if x.shape[1] == 0:
        raise ValueError("empty point cloud")
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    return np.ascontiguousarray(x.transpose(0, 2, 1))


class Codec:
    """Trainable codec: encoder, entropy bottleneck and classifier decoder."""

    def __init__(self, config: CodecConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        ss = np.random.SeedSequence(seed)
        init_rng, drop_rng, eb_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(4))
        self.noise_rng = noise_rng

        layers: List[Module] = []
        c_in = 3
        for i, (c_out, g) in enumerate(config.encoder):
            if i in config.shuffles:
                layers.append(ChannelShuffle(config.shuffles[i]))
            layers.append(PointwiseConv(c_in, c_out, g, rng=init_rng, dtype=dtype))
            layers.append(BatchNorm(c_out, dtype=dtype))
            layers.append(ReLU())
            c_in = c_out
        self.encoder = Sequential(layers)
        self.pool = MaxPoolPoints()
        self.gain = Gain(config.latent, dtype=dtype)
        self.scale = Scale(LATENT_SCALE)
        self.entropy = FactorizedPrior(config.latent, rng=eb_rng, dtype=dtype)

        dec: List[Module] = []
        n_in = config.latent
        for j, n_out in enumerate(config.decoder):
            if j == len(config.decoder) - 1:
                dec.append(Dropout(config.dropout, rng=drop_rng))
                dec.append(Linear(n_in, n_out, rng=init_rng, dtype=dtype))
            else:
                dec += [Linear(n_in, n_out, rng=init_rng, dtype=dtype), BatchNorm(n_out, dtype=dtype), ReLU()]
            n_in = n_out
        self.decoder = Sequential(dec)

        self.tables: Optional[CodingTable] = None
        self.training = True
        self.store = ParamStore(self.parameters())

    # -- bookkeeping -------------------------------------------------------

    def _modules(self) -> "OrderedDict[str, Module]":
        return OrderedDict(
            encoder=self.encoder, gain=self.gain, entropy=self.entropy, decoder=self.decoder
        )

    def parameters(self) -> "OrderedDict[str, Param]":
        out = OrderedDict()
        for prefix, mod in self._modules().items():
            for k, p in mod.parameters().items():
                out[f"{prefix}.{k}"] = p
        return out

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for prefix, mod in self._modules().items():
            for k, b in mod.buffers().items():
                out[f"{prefix}.{k}"] = b
        return out

    def train(self, mode: bool = True) -> "Codec":
        self.training = mode
        for mod in (self.encoder, self.pool, self.gain, self.scale, self.entropy, self.decoder):
            mod.train(mode)
        return self

    def eval(self) -> "Codec":
        return self.train(False)

    def update_tables(self) -> CodingTable:
        self.tables = build_tables(self.entropy)
        return self.tables

    # -- transforms --------------------------------------------------------

    def features(self, points: np.ndarray) -> np.ndarray:
        """Per-point features right before pooling, shape ``(B, N, P)``."""
        return self.encoder.forward(_as_batch(points))

    def analyze(self, points: np.ndarray) -> np.ndarray:
        """Latent ``y`` of shape ``(B, N)`` (or ``(N,)`` for a single cloud)."""
        single = np.ndim(points) == 2
        h = self.features(points)
        y = self.scale.forward(self.gain.forward(self.pool.forward(h)))
        return y[0] if single else y

    def synthesize(self, y_hat: np.ndarray) -> np.ndarray:
        """Class logits from a (quantized) latent."""
        y = np.asarray(y_hat)
        single = y.ndim == 1
        if single:
            y = y[None]
        if y.shape[-1] != self.config.latent:
            raise ValueError(f"latent length {y.shape[-1]} != {self.config.latent}")
        logits = self.decoder.forward(y.astype(self.dtype, copy=False))
        return logits[0] if single else logits

    def predict(self, points: np.ndarray) -> np.ndarray:
        """Eval-path logits: analyze, round, synthesize."""
        return self.synthesize(quantize(self.analyze(points)))

    def critical_points(self, points: np.ndarray) -> np.ndarray:
        """Sorted indices of the points that win at least one pooled channel."""
        if self.training:
            raise RuntimeError("critical points are defined for eval mode only")
        if np.ndim(points) != 2:
            raise ValueError("critical_points takes a single (P, 3) cloud")
        h = self.features(points)
        _, idx = max_pool_points(h)
        return np.unique(idx[0])

    # -- training ----------------------------------------------------------

    def train_step_grads(self, points: np.ndarray, labels: np.ndarray, lmbda: float):
        """Forward and backward for one batch; gradients land in ``self.store``.

        Returns ``(loss, mean rate bits, mean cross-entropy, logits)``.
        """
        self.store.zero_grad()
        labels = np.asarray(labels)
        B = len(labels)
        y = self.analyze(points if np.ndim(points) == 3 else np.asarray(points)[None])
        y_tilde = noise_quantize(y, self.noise_rng)
        rate = self.entropy.rate_bits(y_tilde, record=True)
        logits = self.decoder.forward(y_tilde)
        ce, dlogits = cross_entropy(logits.astype(np.float64), labels)
        loss = rate.mean() + lmbda * ce.mean()

        dy = self.decoder.backward((lmbda / B * dlogits).astype(self.dtype))
        dy = dy + self.entropy.backward_rate(np.full(B, 1.0 / B, dtype=self.dtype))
        dh = self.pool.backward(self.gain.backward(self.scale.backward(dy)))
        self.encoder.backward(dh)
        return float(loss), float(rate.mean()), float(ce.mean()), logits


def fuse_gain_bn(codec: Codec) -> List[Tuple[np.ndarray, np.ndarray, int, Optional[int]]]:
    """Fold eval-mode batch norm, the gain vector and the x10 scale into the convs.

    Returns one ``(weight, bias, groups, shuffle_before)`` entry per encoder
    layer, in float64. The last layer also absorbs ``10 * |gain|``; the sign
    of the gain stays behind as a free post-pooling sign flip (see
    :func:`fused_analyze`), since ReLU and max commute only with positive
    scaling.
    """
    if codec.training:
        raise RuntimeError("fusion requires eval mode (batch-norm statistics must be frozen)")
    layers = list(codec.encoder)
    fused = []
    pending_shuffle = None
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, ChannelShuffle):
            pending_shuffle = layer.groups
            i += 1
            continue
        conv, bn = layer, layers[i + 1]
        w = conv.weight.data.astype(np.float64)
        b = conv.bias.data.astype(np.float64)
        k = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
        w = w * k[:, None]
        b = (b - bn.running_mean.astype(np.float64)) * k + bn.beta.data.astype(np.float64)
        fused.append([w, b, conv.groups, pending_shuffle])
        pending_shuffle = None
        i += 3
    g = np.abs(codec.gain.gain.data.astype(np.float64)) * LATENT_SCALE
    fused[-1][0] = fused[-1][0] * g[:, None]
    fused[-1][1] = fused[-1][1] * g
    return [tuple(f) for f in fused]


def fused_analyze(fused, gain_sign: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Run a fused encoder: conv -> ReLU per layer, max-pool, sign flip."""
    from .nn import channel_shuffle

    single = np.ndim(points) == 2
    h = _as_batch(points).astype(np.float64)
    for w, b, groups, shuffle in fused:
        if shuffle:
            h = channel_shuffle(h, shuffle)
        B, C, P = h.shape
        hg = h.reshape(B, groups, C // groups, P)
        wg = w.reshape(groups, w.shape[0] // groups, C // groups)
        h = np.matmul(wg[None], hg).reshape(B, w.shape[0], P) + b[None, :, None]
        h = np.maximum(h, 0.0)
    y = h.max(axis=-1) * np.sign(gain_sign)
    return y[0] if single else y


def fused_macs_per_point(fused) -> int:
    return sum(w.shape[0] * w.shape[1] for w, _, _, _ in fused)
