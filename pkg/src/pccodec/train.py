"""Rate-accuracy training, evaluation and the reconstruction network."""

from __future__ import annotations

import copy
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import checkpoint
from .bitstream import compress
from .codec import VALID_POINTS, Codec, get_config
from .entropy import quantize
from .metrics import RAPoint, chamfer, chamfer_with_grad
from .nn import BatchNorm, Linear, ParamStore, ReLU, Sequential, adam_step, cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_good: Optional[Codec] = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainSpec:
    config: str = "micro"
    points: int = 1024
    lmbda: float = 8000.0
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.lmbda > 0:
            raise ValueError("lambda must be positive")
        if self.points not in VALID_POINTS:
            raise ValueError(f"points must be one of {VALID_POINTS}")


def loss(logits: np.ndarray, labels: np.ndarray, rate_bits: np.ndarray, lmbda: float) -> float:
    """Mean of ``R + lambda * CE`` over the batch; CE in nats, R in bits."""
    ce, _ = cross_entropy(np.atleast_2d(np.asarray(logits, dtype=np.float64)), np.atleast_1d(labels))
    value = float(np.mean(np.asarray(rate_bits, dtype=np.float64)) + lmbda * ce.mean())
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at lambda={lmbda}")
    return value


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def train(
    spec: TrainSpec,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
    log_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    max_steps: Optional[int] = None,
) -> Tuple[Codec, List[dict]]:
    """Train a codec; returns the eval-mode model (tables built) and the epoch log.

    Early stopping watches validation loss when validation data is given and
    restores the best epoch's weights.
    """
    model_seed, order_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(spec.seed).spawn(2))
    model = Codec(get_config(spec.config, spec.points), seed=model_seed)
    order_rng = np.random.default_rng(order_seed)
    history: List[dict] = []
    best_val, best_state, stale = np.inf, None, 0
    last_good = copy.deepcopy(model)
    step = 0
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(spec.epochs):
            model.train()
            tot = {"loss": 0.0, "rate": 0.0, "ce": 0.0, "correct": 0, "n": 0}
            for idx in _batches(len(x_train), spec.batch_size, order_rng):
                if len(idx) < 2:
                    continue  # batch norm needs more than one sample
                lval, rate, ce, logits = model.train_step_grads(x_train[idx], y_train[idx], spec.lmbda)
                if not math.isfinite(lval):
                    raise TrainingDiverged(
                        f"loss became {lval} at epoch {epoch} step {step} (lambda={spec.lmbda})", last_good
                    )
                try:
                    adam_step(model.store, spec.lr)
                except FloatingPointError as e:
                    raise TrainingDiverged(f"{e} at epoch {epoch} step {step} (lambda={spec.lmbda})", last_good) from None
                step += 1
                k = len(idx)
                tot["loss"] += lval * k
                tot["rate"] += rate * k
                tot["ce"] += ce * k
                tot["correct"] += int((logits.argmax(1) == y_train[idx]).sum())
                tot["n"] += k
                if max_steps is not None and step >= max_steps:
                    break
            n = max(tot["n"], 1)
            rec = {
                "epoch": epoch,
                "step": step,
                "loss": tot["loss"] / n,
                "rate": tot["rate"] / n,
                "ce": tot["ce"] / n,
                "accuracy": 100.0 * tot["correct"] / n,
            }
            model.eval()
            last_good = copy.deepcopy(model)
            if x_val is not None and len(x_val):
                vl, vr, va = validation_loss(model, x_val, y_val, spec.lmbda)
                rec.update(val_loss=vl, val_rate=vr, val_accuracy=va)
                if vl < best_val - 1e-9:
                    best_val, best_state, stale = vl, copy.deepcopy(model), 0
                else:
                    stale += 1
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if on_epoch:
                on_epoch(rec)
            log.info("epoch %d loss %.4f rate %.2f acc %.2f", epoch, rec["loss"], rec["rate"], rec["accuracy"])
            if max_steps is not None and step >= max_steps:
                break
            if best_state is not None and stale >= spec.patience:
                log.info("early stop at epoch %d", epoch)
                break
    finally:
        if logf:
            logf.close()
    if best_state is not None:
        model = best_state
    model.eval()
    model.update_tables()
    return model, history


def validation_loss(model: Codec, x: np.ndarray, y: np.ndarray, lmbda: float, batch: int = 256):
    """Eval-mode (rounded latent) loss, estimated rate and top-1 accuracy."""
    rates, ces, correct = [], [], 0
    for i in range(0, len(x), batch):
        yh = quantize(model.analyze(x[i : i + batch]))
        r = model.entropy.rate_bits(yh.astype(np.float64))
        logits = model.synthesize(yh)
        ce, _ = cross_entropy(logits.astype(np.float64), y[i : i + batch])
        rates.append(r)
        ces.append(ce)
        correct += int((logits.argmax(1) == y[i : i + batch]).sum())
    r = np.concatenate(rates)
    c = np.concatenate(ces)
    return float(r.mean() + lmbda * c.mean()), float(r.mean()), 100.0 * correct / len(x)


@dataclass
class Evaluation:
    point: RAPoint
    estimated_rate: float
    per_cloud_bits: np.ndarray


def evaluate(model: Codec, x: np.ndarray, y: np.ndarray, lmbda: float = float("nan"), name: str = "") -> Evaluation:
    """Top-1 accuracy and mean *measured* payload bits over a test set."""
    if model.tables is None:
        model.eval()
        model.update_tables()
    model.eval()
    bits = np.empty(len(x))
    correct = 0
    est = 0.0
    for i in range(len(x)):
        stream = compress(x[i], model)
        bits[i] = stream.rate_bits
        y_hat = quantize(model.analyze(x[i]))
        est += float(model.entropy.rate_bits(y_hat.astype(np.float64))[0])
        correct += int(np.argmax(model.synthesize(y_hat)) == y[i])
    n = max(len(x), 1)
    pt = RAPoint(
        rate_bits=float(bits.mean()) if len(x) else 0.0,
        top1=100.0 * correct / n,
        lmbda=lmbda,
        config=model.config.name,
        points=model.config.points,
        checkpoint=name,
    )
    return Evaluation(pt, est / n, bits)


# -- reconstruction ---------------------------------------------------------


class ReconNet:
    """MLP from a quantized latent to a ``(P, 3)`` point set."""

    def __init__(self, latent: int, points: int, hidden=(256, 512), seed: int = 0):
        rng = np.random.default_rng(seed)
        layers = []
        n_in = latent
        for h in hidden:
            layers += [Linear(n_in, h, rng=rng), BatchNorm(h), ReLU()]
            n_in = h
        layers.append(Linear(n_in, points * 3, rng=rng))
        self.net = Sequential(layers)
        self.latent = latent
        self.points = points
        self.store = ParamStore(self.net.parameters())

    def forward(self, y_hat: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y_hat, dtype=np.float32))
        return self.net.forward(y).reshape(len(y), self.points, 3)

    def __call__(self, y_hat):
        self.net.eval()
        out = self.forward(y_hat)
        return out[0] if np.ndim(y_hat) == 1 else out

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.net.parameters().items())
        out.update((f"buffer:{k}", b) for k, b in self.net.buffers().items())
        return out

    def load_state(self, state) -> None:
        params = self.net.parameters()
        bufs = self.net.buffers()
        for k, v in state.items():
            if k.startswith("buffer:"):
                bufs[k[7:]][...] = v
            else:
                params[k].data[...] = v


def latents(model: Codec, x: np.ndarray, batch: int = 256) -> np.ndarray:
    model.eval()
    return np.concatenate([quantize(model.analyze(x[i : i + batch])) for i in range(0, len(x), batch)])


def train_recon(
    model: Codec,
    x_train: np.ndarray,
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    points: Optional[int] = None,
) -> Tuple[ReconNet, List[float]]:
    """Fit a :class:`ReconNet` on frozen codec latents by Chamfer distance."""
    z = latents(model, x_train).astype(np.float32)
    P = points or x_train.shape[1]
    net = ReconNet(model.config.latent, P, seed=seed)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        net.net.train()
        total, n = 0.0, 0
        for idx in _batches(len(z), batch_size, rng):
            if len(idx) < 2:
                continue
            net.store.zero_grad()
            out = net.forward(z[idx])
            grads = np.empty_like(out, dtype=np.float64)
            for j, k in enumerate(idx):
                l, g = chamfer_with_grad(x_train[k], out[j])
                grads[j] = g / len(idx)
                total += l
                n += 1
            net.net.backward(grads.reshape(len(idx), -1).astype(np.float32))
            adam_step(net.store, lr)
        history.append(total / max(n, 1))
    net.net.eval()
    return net, history


def recon_chamfer(model: Codec, net: ReconNet, x: np.ndarray) -> float:
    z = latents(model, x)
    out = net(z)
    return float(np.mean([chamfer(x[i], out[i]) for i in range(len(x))]))


def save_recon(net: ReconNet, path) -> None:
    state = net.state()
    np.savez(path, latent=net.latent, points=net.points, **{k.replace(":", "__"): v for k, v in state.items()})


def load_recon(path) -> ReconNet:
    with np.load(path) as f:
        net = ReconNet(int(f["latent"]), int(f["points"]))
        net.load_state({k.replace("__", ":"): f[k] for k in f.files if k not in ("latent", "points")})
    net.net.eval()
    return net


def train_and_save(spec: TrainSpec, x_train, y_train, out: Path, x_val=None, y_val=None, log_path=None) -> Tuple[Codec, List[dict]]:
    """Train, write the checkpoint; on divergence write the last good model and re-raise."""
    try:
        model, history = train(spec, x_train, y_train, x_val, y_val, log_path=log_path)
    except TrainingDiverged as e:
        if e.last_good is not None:
            e.last_good.eval()
            e.last_good.update_tables()
            checkpoint.save(e.last_good, out, meta={"spec": asdict(spec), "diverged": str(e)})
        raise
    checkpoint.save(model, out, meta={"spec": asdict(spec), "epochs_run": len(history)})
    return model, history
