import json
import math

import numpy as np
import pytest

from pccodec import checkpoint, data
from pccodec.codec import Codec, get_config
from pccodec.nn import adam_step
from pccodec.train import (
    TrainingDiverged,
    TrainSpec,
    evaluate,
    load_recon,
    loss,
    recon_chamfer,
    save_recon,
    train,
    train_and_save,
    train_recon,
)


@pytest.fixture(scope="module")
def arrays(small_dataset):
    x, y = data.as_arrays(small_dataset.train)
    xt, yt = data.as_arrays(small_dataset.test)
    return x, y, xt, yt


def test_loss_examples():
    assert loss(np.zeros((1, 40)), [3], [0.0], 1.0) == pytest.approx(math.log(40))
    perfect = np.full((2, 40), -1e4)
    perfect[[0, 1], [5, 7]] = 1e4
    assert loss(perfect, [5, 7], [0.0, 0.0], 1000.0) == pytest.approx(0.0, abs=1e-9)
    assert loss(np.zeros((2, 40)), [0, 1], [10.0, 20.0], 0.0) == pytest.approx(15.0)
    assert loss(np.zeros((1, 40)), [0], [5.0], 2.0) < loss(np.zeros((1, 40)), [0], [6.0], 2.0)
    with pytest.raises(TrainingDiverged):
        loss(np.zeros((1, 40)), [0], [np.nan], 1.0)


def test_spec_validation():
    with pytest.raises(ValueError, match="lambda"):
        TrainSpec(lmbda=0)
    with pytest.raises(ValueError, match="points"):
        TrainSpec(points=100)


@pytest.mark.parametrize("name", ["micro", "lite", "full"])
def test_overfits_32_clouds(name, arrays):
    x, y = arrays[0][::15][:32], arrays[1][::15][:32]
    model = Codec(get_config(name, 64), seed=0)
    for step in range(1, 301):
        model.train()
        _, _, _, logits = model.train_step_grads(x, y, 1000.0)
        adam_step(model.store, 1e-3)
        if (logits.argmax(1) == y).all():
            model.eval()
            if (model.predict(x).argmax(1) == y).all():
                break
    else:
        pytest.fail(f"{name} did not overfit 32 clouds in 300 steps")
    assert step <= 300


def test_micro_overfits_full_resolution_batch(tmp_path):
    from pccodec import synthetic

    root = synthetic.write_corpus(tmp_path, n_train=1, n_test=0, seed=7)
    x, y = data.as_arrays(data.ingest(root, 1024, seed=0).train)
    idx = np.random.default_rng(7).choice(len(x), 32, replace=False)
    x, y = x[idx], y[idx]
    model = Codec(get_config("micro", 1024), seed=0)
    for _ in range(300):
        model.train()
        _, _, _, logits = model.train_step_grads(x, y, 8000.0)
        adam_step(model.store, 1e-3)
        if (logits.argmax(1) == y).all():
            model.eval()
            if (model.predict(x).argmax(1) == y).all():
                return
    pytest.fail("micro P=1024 did not reach 100% on 32 clouds in 300 steps")


def test_untrained_accuracy_is_chance(arrays):
    model = Codec(get_config("micro", 64), seed=1).eval()
    model.update_tables()
    ev = evaluate(model, *arrays[2:])
    # 40 balanced classes: a fixed random classifier sits near 2.5%
    assert ev.point.top1 <= 2.5 + 10


def test_same_seed_same_run(arrays):
    spec = TrainSpec(config="micro", points=64, epochs=1, seed=4)
    _, h1 = train(spec, arrays[0], arrays[1], max_steps=5)
    _, h2 = train(spec, arrays[0], arrays[1], max_steps=5)
    assert h1[0]["loss"] == h2[0]["loss"]
    _, h3 = train(TrainSpec(config="micro", points=64, epochs=1, seed=5), arrays[0], arrays[1], max_steps=5)
    assert h3[0]["loss"] != h1[0]["loss"]


def test_short_training_run(arrays, tmp_path):
    x, y, xt, yt = arrays
    spec = TrainSpec(config="micro", points=64, epochs=6, batch_size=16, lmbda=8000, seed=0, patience=3)
    log = tmp_path / "log.jsonl"
    model, hist = train(spec, x, y, xt, yt, log_path=log)
    assert hist[-1]["loss"] < 0.7 * hist[0]["loss"]
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert lines == json.loads(json.dumps(hist))
    assert {"epoch", "loss", "rate", "ce", "accuracy", "val_loss", "val_accuracy"} <= set(lines[0])
    assert not model.training and model.tables is not None
    ev = evaluate(model, xt, yt, lmbda=8000)
    assert ev.point.top1 > 2.5 * 3
    # measured payload vs model estimate: within 64 bits per cloud
    assert abs(ev.point.rate_bits - ev.estimated_rate) <= 64
    assert np.all(ev.per_cloud_bits > 0)


def test_early_stopping_restores_best(arrays):
    x, y, xt, yt = arrays
    spec = TrainSpec(config="micro", points=64, epochs=30, batch_size=64, lmbda=8000, seed=2, patience=1)
    _, hist = train(spec, x, y, xt, yt)
    vals = [h["val_loss"] for h in hist]
    assert len(hist) < 30
    assert vals[-1] >= min(vals) and vals.index(min(vals)) == len(vals) - 2


def test_divergence_keeps_last_good(arrays, tmp_path):
    x, y = arrays[0].copy(), arrays[1]
    x[5:] = np.nan
    out = tmp_path / "m.ckpt"
    spec = TrainSpec(config="micro", points=64, epochs=2, batch_size=len(x), seed=0)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_and_save(spec, x, y, out)
    model, meta = checkpoint.load(out)
    assert "diverged" in meta
    assert all(np.all(np.isfinite(p.data)) for p in model.parameters().values())


def test_reconstruction_learns(arrays, micro_model, tmp_path):
    x = arrays[0][:64]
    model = Codec(get_config("micro", 64), seed=0)
    for _ in range(20):
        model.train_step_grads(x[:32], arrays[1][:32], 100.0)
        adam_step(model.store, 1e-2)
    model.eval()
    net, hist = train_recon(model, x, epochs=40, batch_size=16, lr=3e-3, seed=0)
    assert hist[-1] <= 0.5 * hist[0]
    cd = recon_chamfer(model, net, x)
    assert cd == pytest.approx(cd) and cd < hist[0]
    save_recon(net, tmp_path / "r.npz")
    back = load_recon(tmp_path / "r.npz")
    z = np.zeros((2, 16), np.float32)
    np.testing.assert_array_equal(back(z), net(z))
