import json

import numpy as np
import pytest

from pccodec import checkpoint, data
from pccodec.bitstream import Bitstream
from pccodec.cli import main
from pccodec.metrics import RAPoint, write_ra_csv


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 and out.strip() else out), err


@pytest.mark.parametrize(
    "name,enc,dec",
    [("full", "150k", "670k"), ("lite", "0.47k", "160k"), ("micro", "0.048k", "150k")],
)
def test_macs(capsys, name, enc, dec):
    code, out, _ = run(capsys, "macs", "--config", name)
    assert code == 0
    assert (out["encoder_rounded"], out["decoder_rounded"]) == (enc, dec)
    if name == "micro":
        assert out["encoder_macs_per_point"] == 48


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, small_dataset, micro_model):
    d = tmp_path_factory.mktemp("cli")
    data.write_dataset(small_dataset, d / "ds.bin")
    checkpoint.save(micro_model, d / "m.ckpt")
    return d


def test_compress_decompress_matches_library(capsys, workspace, micro_model, small_dataset):
    code, out, _ = run(capsys, "compress", "--ckpt", workspace / "m.ckpt", "--in", f"{workspace / 'ds.bin'}:3", "--out", workspace / "s.bin")
    assert code == 0 and out["points"] == 64
    s = Bitstream.from_bytes((workspace / "s.bin").read_bytes())
    assert out["payload_bits"] == s.rate_bits
    code, out, _ = run(capsys, "decompress", "--ckpt", workspace / "m.ckpt", "--in", workspace / "s.bin")
    assert code == 0
    direct = micro_model.predict(small_dataset.test[3].points)
    np.testing.assert_array_equal(np.float32(out["logits"]), direct)
    assert out["top1"] == int(np.argmax(direct))


def test_critical_points_command(capsys, workspace):
    fig = workspace / "crit.png"
    code, out, _ = run(capsys, "critical-points", "--ckpt", workspace / "m.ckpt", "--in", f"{workspace / 'ds.bin'}:train:0", "--figure", fig)
    assert code == 0 and 1 <= out["count"] <= 16 and fig.stat().st_size > 0


def test_evaluate_writes_csv(capsys, workspace):
    code, out, _ = run(capsys, "evaluate", "--ckpt", workspace / "m.ckpt", "--dataset", workspace / "ds.bin", "--out", workspace / "ra.csv")
    assert code == 0 and 0 <= out["top1"] <= 100
    assert (workspace / "ra.csv").read_text().startswith("config,points,lmbda,rate_bits,top1")


def test_bd_identical(capsys, tmp_path):
    pts = [RAPoint(r, a) for r, a in [(10, 40), (20, 60), (40, 72), (80, 80), (160, 84)]]
    write_ra_csv(pts, tmp_path / "a.csv")
    code, out, _ = run(capsys, "bd", "--test", tmp_path / "a.csv", "--anchor", tmp_path / "a.csv", "--figure", tmp_path / "bd.png")
    assert code == 0
    assert out["bd_rate"] == pytest.approx(0.0, abs=1e-9) and out["bd_acc"] == pytest.approx(0.0, abs=1e-9)
    assert (tmp_path / "bd.png").exists()
    write_ra_csv(pts[:2], tmp_path / "b.csv")
    code, out, _ = run(capsys, "bd", "--test", tmp_path / "b.csv", "--anchor", tmp_path / "a.csv")
    assert code == 0 and out["bd_rate"] is None and "at least 4" in out["bd_rate_diagnostic"]


def test_errors_exit_nonzero(capsys, workspace, tmp_path):
    code, _, err = run(capsys, "decompress", "--ckpt", workspace / "m.ckpt", "--in", tmp_path / "missing.bin")
    assert code == 1 and err.startswith("pccodec decompress: error:") and err.count("\n") == 1
    (tmp_path / "junk.bin").write_bytes(b"junk" * 8)
    code, _, err = run(capsys, "decompress", "--ckpt", workspace / "m.ckpt", "--in", tmp_path / "junk.bin")
    assert code == 1 and "magic" in err
    code, _, err = run(capsys, "compress", "--ckpt", tmp_path / "junk.bin", "--in", "x.off", "--out", tmp_path / "o")
    assert code == 1


def test_config_file_precedence(capsys, tmp_path):
    (tmp_path / "c.toml").write_text('config = "lite"\n[macs]\npoints = 256\n')
    code, out, _ = run(capsys, "--config-file", tmp_path / "c.toml", "macs")
    assert code == 0 and out["config"] == "lite" and out["points"] == 256
    code, out, _ = run(capsys, "--config-file", tmp_path / "c.toml", "macs", "--config", "micro", "--points", "8")
    assert code == 0 and out["config"] == "micro" and out["points"] == 8


def test_train_and_sweep_end_to_end(capsys, workspace, tmp_path):
    code, out, _ = run(
        capsys, "train", "--config", "micro", "--points", 64, "--lambda", 8000, "--dataset", workspace / "ds.bin",
        "--out", tmp_path / "t.ckpt", "--epochs", 2, "--figure", tmp_path / "t.png",
    )
    assert code == 0 and out["epochs"] == 2 and (tmp_path / "t.png").exists()
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 2
    code, out, _ = run(
        capsys, "sweep", "--config", "micro", "--points", 64, "--lambdas", "100,8000", "--dataset", workspace / "ds.bin",
        "--out", tmp_path / "sw", "--epochs", 1,
    )
    assert code == 0
    rows = (tmp_path / "sw" / "ra.csv").read_text().splitlines()
    assert len(rows) == 3 and (tmp_path / "sw" / "ra.png").exists()
