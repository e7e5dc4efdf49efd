import json
import struct
from pathlib import Path

import numpy as np
import pytest

from pccodec import checkpoint
from pccodec.bitstream import Bitstream, StreamError, compress, decode_latent, decompress
from pccodec.codec import Codec, get_config
from pccodec.entropy import TOTAL_FREQ, CodingTable, quantize, quantize_pmf
from pccodec.rangecoder import TruncatedStream, range_decode, range_encode

GOLDEN = Path(__file__).parent / "golden"


def random_table(rng, n_channels, max_len=40):
    lengths = rng.integers(1, max_len, n_channels) if n_channels else np.zeros(0, int)
    W = int(lengths.max()) if n_channels else 1
    cdf = np.full((n_channels, W + 2), TOTAL_FREQ)
    for i, n in enumerate(lengths):
        f = quantize_pmf(rng.dirichlet(np.full(n + 1, rng.choice([0.05, 1.0, 20.0]))))
        cdf[i, 0] = 0
        cdf[i, 1 : n + 2] = np.cumsum(f)
    return CodingTable(offset=rng.integers(-50, 50, n_channels), length=lengths, cdf=cdf.reshape(n_channels, W + 2))


def uniform_table(n_channels, n_symbols=16):
    cdf = np.tile(np.append(np.arange(n_symbols) * ((TOTAL_FREQ - 1) // n_symbols), [TOTAL_FREQ - 1, TOTAL_FREQ]), (n_channels, 1))
    cdf[:, n_symbols] = TOTAL_FREQ - 1
    return CodingTable(offset=np.zeros(n_channels), length=np.full(n_channels, n_symbols), cdf=cdf)


def test_empty_stream_is_flush_only():
    t = random_table(np.random.default_rng(0), 0)
    b = range_encode([], t)
    assert len(b) <= 8
    assert range_decode(b, 0, t) == []


def test_uniform_sixteen_symbols_cost_four_bits(rng):
    t = uniform_table(1000)
    syms = rng.integers(0, 16, 1000)
    b = range_encode(syms, t)
    assert abs(len(b) - 500) <= 0.01 * 500 + 8
    assert range_decode(b, 1000, t) == list(syms)


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_random(seed):
    r = np.random.default_rng(seed)
    for _ in range(100):
        t = random_table(r, int(r.integers(0, 30)))
        syms = [int(t.offset[i] + r.integers(-5, t.length[i] + 5)) for i in range(t.channels)]
        b = range_encode(syms, t)
        assert range_decode(b, len(syms), t) == syms
        ideal = t.entropy_bits(syms)
        assert len(b) <= ideal / 8 + 8
        assert abs(8 * len(b) - ideal) <= 64


def test_escape_handles_extreme_values():
    t = random_table(np.random.default_rng(1), 3)
    syms = [2**40, -(2**40), 0]
    assert range_decode(range_encode(syms, t), 3, t) == syms


def test_corrupt_table_rejected():
    t = CodingTable(offset=[0], length=[2], cdf=[[0, 100, 100, TOTAL_FREQ]])
    with pytest.raises(ValueError, match="corrupt"):
        range_encode([0], t)


def test_truncated_payload():
    t = uniform_table(200)
    b = range_encode(list(range(16)) * 12 + [0] * 8, t)
    with pytest.raises(TruncatedStream):
        range_decode(b[: len(b) // 2], 200, t)


def test_golden_table_streams():
    import sys

    sys.path.insert(0, str(GOLDEN))
    from make_golden import golden_table

    t = golden_table()
    for key, hexstr in json.loads((GOLDEN / "table_streams.json").read_text()).items():
        syms = json.loads(key)
        assert range_encode(syms, t).hex() == hexstr
        assert range_decode(bytes.fromhex(hexstr), len(syms), t) == syms


def test_golden_codec_stream():
    model, meta = checkpoint.load(GOLDEN / "micro_p64.ckpt")
    assert meta == {"golden": True}
    cloud = np.load(GOLDEN / "cloud.npy")
    expected = (GOLDEN / "micro_stream.bin").read_bytes()
    assert compress(cloud, model).to_bytes() == expected
    assert expected[:4] == b"PCCC"
    magic, version, cid, n, p, length = struct.unpack("<4sBBHII", expected[:16])
    assert (version, cid, n, p, length) == (1, 2, 16, 64, len(expected) - 16)


def test_header_round_trip():
    b = Bitstream(config_id=1, latent=32, points=256, payload=b"\x01\x02\x03")
    raw = b.to_bytes()
    assert len(raw) == 16 + 3
    assert Bitstream.from_bytes(raw) == b


@pytest.mark.parametrize(
    "mutate,msg",
    [
        (lambda r: b"XXXX" + r[4:], "magic"),
        (lambda r: r[:4] + b"\x09" + r[5:], "version"),
        (lambda r: r[:-1], "length"),
        (lambda r: r[:10], "header"),
    ],
)
def test_header_errors(mutate, msg):
    raw = Bitstream(2, 16, 64, b"abc").to_bytes()
    with pytest.raises(StreamError, match=msg):
        Bitstream.from_bytes(mutate(raw))


def test_config_mismatch_refused(micro_model, lite_model, rng):
    s = compress(rng.standard_normal((64, 3)).astype(np.float32), micro_model)
    with pytest.raises(StreamError, match="config micro"):
        decompress(s, lite_model)


@pytest.mark.parametrize("name", ["micro", "lite", "full"])
def test_compress_matches_direct_path(name, request, rng):
    model = request.getfixturevalue(f"{name}_model")
    N = model.config.latent
    for _ in range(100 if name != "full" else 20):
        x = rng.standard_normal((int(rng.integers(1, 80)), 3)).astype(np.float32)
        s = compress(x, model)
        y_hat = quantize(model.analyze(x))
        np.testing.assert_array_equal(decode_latent(s, model), y_hat)
        np.testing.assert_array_equal(decompress(s, model), model.synthesize(y_hat))
        assert 0 <= s.rate_bits <= N * 32 + 64
        assert abs(s.rate_bits - model.tables.entropy_bits(y_hat)) <= 64


def test_streams_are_deterministic(micro_model, rng):
    x = rng.standard_normal((64, 3)).astype(np.float32)
    assert compress(x, micro_model).to_bytes() == compress(x.copy(), micro_model).to_bytes()


def test_model_without_tables_refuses(rng):
    model = Codec(get_config("micro", 8)).eval()
    with pytest.raises(StreamError, match="tables"):
        compress(rng.standard_normal((8, 3)), model)
