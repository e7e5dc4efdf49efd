"""Central finite-difference checks shared by the unit and acceptance suites."""

import numpy as np

from pccodec.nn import (
    BatchNorm,
    ChannelShuffle,
    Dropout,
    Gain,
    Linear,
    MaxPoolPoints,
    PointwiseConv,
    ReLU,
    Scale,
    cross_entropy,
)
from pccodec.entropy import FactorizedPrior

H = 1e-4
TOL = 1e-4


def rel_err(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / den)


def _fd_inplace(f, arr, h=H):
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_layer(layer, x, before_forward=None):
    """Return the worst relative error over the input and every parameter."""
    rng = np.random.default_rng(123)

    def fwd():
        if before_forward:
            before_forward(layer)
        return layer.forward(x)

    out = fwd()
    R = rng.standard_normal(out.shape)
    for p in layer.parameters().values():
        p.zero_grad()
    dx = layer.backward(R)
    f = lambda: float((fwd() * R).sum())  # noqa: E731
    errs = {"input": rel_err(dx, _fd_inplace(f, x))}
    for name, p in layer.parameters().items():
        errs[name] = rel_err(p.grad, _fd_inplace(f, p.data))
    return errs


def _spread(rng, shape, margin=0.05):
    """Normal samples pushed away from zero (ReLU kink)."""
    x = rng.standard_normal(shape)
    return np.sign(x) * (margin + np.abs(x))


def _distinct_last_axis(rng, shape):
    """Rows whose entries differ by >= 0.01, so the max never changes under FD."""
    P = shape[-1]
    base = np.stack([rng.permutation(P) for _ in range(int(np.prod(shape[:-1])))]).reshape(shape)
    return base * 0.01 + rng.uniform(0, 1e-3, shape) + rng.standard_normal(shape[:-1] + (1,))


def random_cases(seed=0, per_op=12):
    """Yield ``(op name, layer, input, before_forward)`` over random small shapes."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    for _ in range(per_op):
        B = int(rng.integers(2, 4))
        P = int(rng.integers(1, 6))
        g = int(rng.choice([1, 2, 4]))
        ci = g * int(rng.integers(1, 4))
        co = g * int(rng.integers(1, 4))
        yield "pointwise_conv", PointwiseConv(ci, co, g, rng=rng, dtype=f64), rng.standard_normal((B, ci, P)), None
        conv = PointwiseConv(ci, co, g, rng=rng, dtype=f64)
        conv.eval()
        yield "pointwise_conv_eval", conv, rng.standard_normal((B, ci, P)), None
        n_in, n_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        yield "linear", Linear(n_in, n_out, rng=rng, dtype=f64), rng.standard_normal((B, n_in)), None
        C = int(rng.integers(1, 5))
        bn = BatchNorm(C, dtype=f64)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, C)
        bn.beta.data[:] = rng.standard_normal(C)
        shape = (B, C, P) if rng.random() < 0.5 else (B, C)
        yield "batch_norm_train", bn, rng.standard_normal(shape) * 2 + 1, None
        bne = BatchNorm(C, dtype=f64)
        bne.running_mean[:] = rng.standard_normal(C)
        bne.running_var[:] = rng.uniform(0.5, 2, C)
        bne.eval()
        yield "batch_norm_eval", bne, rng.standard_normal(shape), None
        yield "relu", ReLU(), _spread(rng, (B, C, P)), None
        seed_d = int(rng.integers(1 << 30))

        def reseed(layer, s=seed_d):
            layer.rng = np.random.default_rng(s)

        yield "dropout", Dropout(0.3), rng.standard_normal((B, 8)), reseed
        gs = int(rng.choice([1, 2, 4]))
        yield "channel_shuffle", ChannelShuffle(gs), rng.standard_normal((B, gs * int(rng.integers(1, 4)), P)), None
        yield "max_pool_points", MaxPoolPoints(), _distinct_last_axis(rng, (B, C, P + 1)), None
        gain = Gain(C, dtype=f64)
        gain.gain.data[:] = rng.standard_normal(C)
        yield "gain", gain, rng.standard_normal((B, C)), None
        yield "scale", Scale(10.0), rng.standard_normal((B, C)), None


def check_cross_entropy(seed=0, cases=10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        B, T = int(rng.integers(1, 5)), int(rng.integers(2, 8))
        logits = rng.standard_normal((B, T)) * 3
        labels = rng.integers(0, T, B)
        _, grad = cross_entropy(logits, labels)
        f = lambda: float(cross_entropy(logits, labels)[0].sum())  # noqa: E731
        worst = max(worst, rel_err(grad, _fd_inplace(f, logits)))
    return worst


def check_entropy_model(seed=0, cases=10):
    """Worst relative error of d(weighted rate)/d(y and parameters)."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(cases):
        N, B = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        em = FactorizedPrior(N, rng=rng, dtype=np.float64)
        for p in em.parameters().values():
            p.data += rng.normal(0, 0.3, p.shape)
        y = rng.normal(0, 3, (B, N))
        w = rng.uniform(0.5, 1.5, B)
        for p in em.parameters().values():
            p.zero_grad()
        em.rate_bits(y, record=True)
        dy = em.backward_rate(w)
        f = lambda: float((em.rate_bits(y) * w).sum())  # noqa: E731
        errs = {"y": rel_err(dy, _fd_inplace(f, y))}
        for name, p in em.parameters().items():
            errs[name] = rel_err(p.grad, _fd_inplace(f, p.data))
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
