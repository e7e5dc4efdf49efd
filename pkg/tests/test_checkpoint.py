import numpy as np
import pytest

from pccodec import checkpoint
from pccodec.bitstream import compress


@pytest.mark.parametrize("name", ["micro", "lite"])
def test_round_trip_is_bit_exact(name, request, rng, tmp_path):
    model = request.getfixturevalue(f"{name}_model")
    path = tmp_path / "m.ckpt"
    checkpoint.save(model, path, meta={"lmbda": 8000})
    back, meta = checkpoint.load(path)
    assert meta == {"lmbda": 8000}
    assert not back.training
    for (k, p), (k2, q) in zip(model.parameters().items(), back.parameters().items()):
        assert k == k2
        np.testing.assert_array_equal(p.data, q.data)
    for k, b in model.buffers().items():
        np.testing.assert_array_equal(b, back.buffers()[k])
    np.testing.assert_array_equal(back.tables.cdf, model.tables.cdf)
    x = rng.standard_normal((64, 3)).astype(np.float32)
    np.testing.assert_array_equal(back.predict(x), model.predict(x))
    assert compress(x, back).to_bytes() == compress(x, model).to_bytes()
    assert checkpoint.dumps(back, meta) == path.read_bytes()


def test_corrupt_checkpoints(micro_model):
    raw = checkpoint.dumps(micro_model)
    assert raw[:4] == b"PCCK"
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"NOPE" + raw[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(raw[:-10])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(raw[:6])
