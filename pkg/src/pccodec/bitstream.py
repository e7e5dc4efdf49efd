"""Compressed-cloud container and the end-to-end compress/decompress path.

Header layout, 16 bytes, little-endian::

    magic    4s   b"PCCC"
    version  u8   1
    config   u8   0 = full, 1 = lite, 2 = micro
    N        u16  latent length
    P        u32  input point count
    length   u32  payload byte length

followed by ``length`` bytes of range-coded payload. The coding tables live
in the model checkpoint, not in the stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import Codec, config_name
from .entropy import quantize
from .rangecoder import range_decode, range_encode

MAGIC = b"PCCC"
VERSION = 1
HEADER = struct.Struct("<4sBBHII")


class StreamError(ValueError):
    pass


@dataclass
class Bitstream:
    config_id: int
    latent: int
    points: int
    payload: bytes
    version: int = VERSION

    @property
    def rate_bits(self) -> int:
        return 8 * len(self.payload)

    def to_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.config_id, self.latent, self.points, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER.size:
            raise StreamError("stream shorter than header")
        magic, version, cid, n, p, length = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise StreamError("bad stream magic")
        if version != VERSION:
            raise StreamError(f"unsupported stream version {version}")
        payload = data[HEADER.size :]
        if len(payload) != length:
            raise StreamError(f"payload length {len(payload)} != header length {length}")
        return cls(config_id=cid, latent=n, points=p, payload=payload, version=version)


def _require_tables(model: Codec):
    if model.tables is None:
        raise StreamError("model has no coding tables; build them after training")
    return model.tables


def encode_latent(y_hat: np.ndarray, model: Codec, points: int) -> Bitstream:
    tables = _require_tables(model)
    payload = range_encode([int(v) for v in y_hat], tables)
    return Bitstream(model.config.config_id, model.config.latent, points, payload)


def compress(points: np.ndarray, model: Codec) -> Bitstream:
    """Encode a single ``(P, 3)`` cloud."""
    if model.training:
        raise StreamError("compress requires an eval-mode model")
    y_hat = quantize(model.analyze(points))
    return encode_latent(y_hat, model, int(np.shape(points)[0]))


def decode_latent(stream: Bitstream, model: Codec) -> np.ndarray:
    cfg = model.config
    if stream.config_id != cfg.config_id or stream.latent != cfg.latent:
        try:
            name = config_name(stream.config_id)
        except ValueError:
            name = f"id {stream.config_id}"
        raise StreamError(
            f"stream was made by config {name} (N={stream.latent}) but model is {cfg.name} (N={cfg.latent})"
        )
    tables = _require_tables(model)
    return np.asarray(range_decode(stream.payload, stream.latent, tables), dtype=np.int64)


def decompress(stream: Bitstream, model: Codec) -> np.ndarray:
    """Decode a stream straight to class logits."""
    if model.training:
        raise StreamError("decompress requires an eval-mode model")
    return model.synthesize(decode_latent(stream, model))
