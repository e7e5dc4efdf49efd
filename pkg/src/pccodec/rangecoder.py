"""Byte-oriented range coder with carry propagation and 16-bit frequencies.

The coder state is a 32-bit ``range`` and a ``low`` register held in 64 bits
so that a carry out of bit 32 can be detected and propagated into bytes that
were already produced. Bytes are released through a one-byte cache plus a
count of pending 0xFF bytes::

    encode(cum, freq):  r = range >> 16
                        low += r * cum ; range = r * freq
                        while range < 2**24: shift_low(); range <<= 8

    shift_low():        if low < 0xFF000000 or low >= 2**32:
                            emit cache + carry, then pending 0xFF + carry bytes
                            cache = (low >> 24) & 0xFF
                        else:
                            pending += 1
                        low = (low << 8) & 0xFFFFFFFF

The encoder flushes with five ``shift_low`` calls. The first byte produced is
always the initial cache value 0 (the coding interval starts inside
``[0, 2**32)``), so it is dropped from the stream and the decoder assumes it.
Only integer arithmetic is used, so streams are identical on every platform.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .entropy import TOTAL_FREQ, CodingTable, zigzag_varint

PRECISION = 16
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class TruncatedStream(ValueError):
    """The payload ended before all symbols were decoded."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.pending = 1
        self.out = bytearray()
        self._skip_first = True

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                if self._skip_first:
                    self._skip_first = False
                else:
                    self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.pending -= 1
                if self.pending == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.pending += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, cum: int, freq: int) -> None:
        if freq <= 0 or cum < 0 or cum + freq > TOTAL_FREQ:
            raise ValueError(f"invalid symbol interval cum={cum} freq={freq}")
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_byte(self, b: int) -> None:
        self.encode(b << 8, 1 << 8)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStream(f"payload truncated at byte {self.pos}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cdf: np.ndarray) -> int:
        """Decode one symbol index given a cumulative frequency table."""
        r = self.range >> PRECISION
        value = min(self.code // r, TOTAL_FREQ - 1)
        s = int(np.searchsorted(cdf, value, side="right")) - 1
        cum = int(cdf[s])
        freq = int(cdf[s + 1]) - cum
        self.code -= r * cum
        self.range = r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        return s

    def decode_byte(self) -> int:
        r = self.range >> PRECISION
        value = min(self.code // r, TOTAL_FREQ - 1)
        b = value >> 8
        self.code -= r * (b << 8)
        self.range = r << 8
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8
        return b


def _check_table(tables: CodingTable, count: int) -> None:
    if count > tables.channels:
        raise ValueError(f"{count} symbols but only {tables.channels} channel tables")
    tables.validate()


def range_encode(symbols: Sequence[int], tables: CodingTable) -> bytes:
    """Encode integer ``symbols[i]`` with channel table ``i``.

    Values outside a channel's support are written as the escape symbol
    followed by the zigzag varint bytes of the value, each coded uniformly.
    """
    _check_table(tables, len(symbols))
    enc = RangeEncoder()
    for i, value in enumerate(symbols):
        value = int(value)
        cdf = tables.channel_cdf(i)
        k = value - int(tables.offset[i])
        n = int(tables.length[i])
        if 0 <= k < n:
            enc.encode(int(cdf[k]), int(cdf[k + 1] - cdf[k]))
        else:
            enc.encode(int(cdf[n]), int(cdf[n + 1] - cdf[n]))
            for b in zigzag_varint(value):
                enc.encode_byte(b)
    return enc.finish()


def range_decode(data: bytes, count: int, tables: CodingTable) -> List[int]:
    """Inverse of :func:`range_encode`.

    A stream decoded with tables other than the ones it was encoded with
    yields garbage rather than an error; mismatches are caught only when the
    payload runs out or an escape varint is malformed.
    """
    _check_table(tables, count)
    dec = RangeDecoder(data)
    out = []
    for i in range(count):
        cdf = tables.channel_cdf(i)
        n = int(tables.length[i])
        s = dec.decode(cdf)
        if s < n:
            out.append(s + int(tables.offset[i]))
            continue
        z = 0
        shift = 0
        while True:
            b = dec.decode_byte()
            z |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                break
            if shift > 63:
                raise ValueError("malformed escape value")
        out.append((z >> 1) ^ -(z & 1))
    return out
