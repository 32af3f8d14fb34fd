"""Carry-less 32-bit range coder with byte-wise renormalization.

Symbol frequencies come either from static 16-bit ``CdfTable``s or from
adaptive models whose total never exceeds 2**16.
"""

from __future__ import annotations

import bisect

import numpy as np

from .entropy import PRECISION, TOTAL, CdfTable

TOP = 1 << 24
BOT = 1 << 16
MASK = (1 << 32) - 1


class BitstreamError(ValueError):
    """Base class for undecodable streams."""


class CorruptStreamError(BitstreamError):
    """Checksum failure or payload inconsistent with the decoding tables."""


class TruncatedStreamError(CorruptStreamError):
    """The stream ended before decoding finished."""


class UnsupportedFormatError(BitstreamError):
    """Wrong magic number or version."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, start: int, size: int, total: int) -> None:
        r = self.range // total
        low = self.low + r * start
        rng = r * size
        out = self.out
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = -low & (BOT - 1)
            out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low, self.range = low, rng

    def encode_bits(self, value: int, nbits: int) -> None:
        """Equiprobable ``nbits``-bit value (nbits <= 16)."""
        self.encode(value, 1, 1 << nbits)

    def finish(self) -> bytes:
        low = self.low
        for _ in range(4):
            self.out.append(low >> 24)
            low = (low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError(f"stream ended after {len(self.data)} bytes")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self, total: int) -> int:
        """Cumulative frequency the next symbol's interval contains."""
        self._r = self.range // total
        v = ((self.code - self.low) & MASK) // self._r
        return v if v < total else total - 1

    def consume(self, start: int, size: int) -> None:
        r = self._r
        low = self.low + r * start
        rng = r * size
        code = self.code
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = -low & (BOT - 1)
            code = ((code << 8) | self._byte()) & MASK
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low, self.range, self.code = low, rng, code

    def decode_bits(self, nbits: int) -> int:
        v = self.target(1 << nbits)
        self.consume(v, 1)
        return v

    def verify_end(self) -> None:
        """A correctly decoded stream ends exactly on the flushed ``low``."""
        if self.pos != len(self.data) or self.code != self.low:
            raise CorruptStreamError(
                "decoded symbols are inconsistent with the payload (wrong tables or corrupt data)"
            )


def range_encode(symbols, channels, tables: list[CdfTable]) -> bytes:
    """Encode integer ``symbols``; ``channels[i]`` picks the table for symbol i."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    channels = np.asarray(channels, dtype=np.int64).reshape(-1)
    if symbols.size != channels.size:
        raise ValueError(f"{symbols.size} symbols but {channels.size} channel ids")
    enc = RangeEncoder()
    low, rng, out = enc.low, enc.range, enc.out
    cdfs = [t.cdf for t in tables]
    for s, c in zip(symbols.tolist(), channels.tolist()):
        t = tables[c]
        i = s - t.q_min
        if i < 0 or s > t.q_max:
            raise ValueError(f"symbol {s} outside channel {c} range [{t.q_min}, {t.q_max}]")
        cdf = cdfs[c]
        start = cdf[i]
        r = rng >> PRECISION
        low += r * start
        rng = r * (cdf[i + 1] - start)
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = -low & (BOT - 1)
            out.append(low >> 24)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
    enc.low, enc.range = low, rng
    return enc.finish()


def range_decode(data: bytes, tables: list[CdfTable], channels) -> np.ndarray:
    """Decode ``len(channels)`` symbols; raises instead of returning a wrong sequence."""
    channels = np.asarray(channels, dtype=np.int64).reshape(-1)
    dec = RangeDecoder(data)
    cdfs = [list(t.cdf) for t in tables]
    out = np.empty(channels.size, dtype=np.int64)
    low, rng, code = dec.low, dec.range, dec.code
    buf, pos, end = data, dec.pos, len(data)
    for n, c in enumerate(channels.tolist()):
        cdf = cdfs[c]
        r = rng >> PRECISION
        v = ((code - low) & MASK) // r
        if v >= TOTAL:
            v = TOTAL - 1
        i = bisect.bisect_right(cdf, v) - 1
        start = cdf[i]
        low += r * start
        rng = r * (cdf[i + 1] - start)
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = -low & (BOT - 1)
            if pos >= end:
                raise TruncatedStreamError(f"stream ended after {end} bytes at symbol {n}")
            code = ((code << 8) | buf[pos]) & MASK
            pos += 1
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        out[n] = i + tables[c].q_min
    dec.low, dec.range, dec.code, dec.pos = low, rng, code, pos
    dec.verify_end()
    return out


class AdaptiveModel:
    """Frequency counts that adapt as symbols are coded; total stays <= 2**16."""

    def __init__(self, size: int, increment: int = 24, limit: int = TOTAL):
        self.freq = [1] * size
        self.total = size
        self.increment = increment
        self.limit = limit

    def _update(self, s: int) -> None:
        self.freq[s] += self.increment
        self.total += self.increment
        if self.total > self.limit:
            self.freq = [(f + 1) // 2 for f in self.freq]
            self.total = sum(self.freq)

    def encode(self, enc: RangeEncoder, s: int) -> None:
        freq = self.freq
        enc.encode(sum(freq[:s]), freq[s], self.total)
        self._update(s)

    def decode(self, dec: RangeDecoder) -> int:
        v = dec.target(self.total)
        cum = 0
        for s, f in enumerate(self.freq):
            if v < cum + f:
                dec.consume(cum, f)
                self._update(s)
                return s
            cum += f
        raise CorruptStreamError("adaptive model lookup failed")
