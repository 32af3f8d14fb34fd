"""The .pwsc container: fixed header, range-coded latent payload, CRC32.

Header layout (little-endian)::

    b"PWSC" | u8 version=1 | 8-byte model fingerprint
    u32 H | u32 W | u32 padded H | u32 padded W | u32 M | u32 h | u32 w
    M x (i32 q_min, i32 q_max)

followed by the payload and a u32 CRC32 (IEEE) of the payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .model import LatentCode
from .rangecoder import CorruptStreamError, TruncatedStreamError, UnsupportedFormatError

MAGIC = b"PWSC"
VERSION = 1
_FIXED = struct.Struct("<4sB8s7I")


@dataclass
class Bitstream:
    fingerprint: bytes
    height: int
    width: int
    padded_height: int
    padded_width: int
    latent_shape: tuple  # (M, h, w)
    q_min: np.ndarray
    q_max: np.ndarray
    payload: bytes

    @property
    def header_size(self) -> int:
        return _FIXED.size + 8 * self.latent_shape[0]

    @property
    def total_bytes(self) -> int:
        return self.header_size + len(self.payload) + 4

    @property
    def bpp(self) -> float:
        return 8.0 * self.total_bytes / (self.height * self.width)

    @property
    def payload_bpp(self) -> float:
        return 8.0 * len(self.payload) / (self.height * self.width)

    def to_bytes(self) -> bytes:
        return pack_bitstream_fields(self)

    def latent_code(self, symbols: np.ndarray) -> LatentCode:
        return LatentCode(symbols.reshape(self.latent_shape), self.height, self.width,
                          self.padded_height, self.padded_width, self.fingerprint, self.q_min, self.q_max)


def overhead_bytes(channels: int) -> int:
    """Bytes of a stream that are not payload: header, ranges and checksum."""
    return _FIXED.size + 8 * channels + 4


def pack_bitstream(code: LatentCode, payload: bytes) -> bytes:
    stream = Bitstream(code.fingerprint, code.height, code.width, code.padded_height, code.padded_width,
                       tuple(code.symbols.shape), code.q_min, code.q_max, payload)
    return pack_bitstream_fields(stream)


def pack_bitstream_fields(s: Bitstream) -> bytes:
    if len(s.fingerprint) != 8:
        raise ValueError("fingerprint must be 8 bytes")
    m, h, w = s.latent_shape
    if len(s.q_min) != m or len(s.q_max) != m:
        raise ValueError("need one q range per latent channel")
    if s.padded_height < s.height or s.padded_width < s.width:
        raise ValueError("padded dims smaller than image dims")
    head = _FIXED.pack(MAGIC, VERSION, s.fingerprint, s.height, s.width,
                       s.padded_height, s.padded_width, m, h, w)
    ranges = np.empty(2 * m, dtype="<i4")
    ranges[0::2] = s.q_min
    ranges[1::2] = s.q_max
    return head + ranges.tobytes() + s.payload + struct.pack("<I", zlib.crc32(s.payload))


def unpack_bitstream(data: bytes) -> Bitstream:
    if len(data) < 5:
        raise TruncatedStreamError("stream shorter than its magic and version")
    if data[:4] != MAGIC:
        raise UnsupportedFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if data[4] != VERSION:
        raise UnsupportedFormatError(f"unsupported stream version {data[4]}")
    if len(data) < _FIXED.size:
        raise TruncatedStreamError("stream shorter than its fixed header")
    _, _, fp, hh, ww, ph, pw, m, h, w = _FIXED.unpack_from(data)
    ranges_end = _FIXED.size + 8 * m
    if len(data) < ranges_end + 4:
        raise TruncatedStreamError("stream ends inside its header")
    ranges = np.frombuffer(data, dtype="<i4", count=2 * m, offset=_FIXED.size).astype(np.int32)
    payload = bytes(data[ranges_end:-4])
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptStreamError("payload CRC32 mismatch")
    q_min, q_max = ranges[0::2].copy(), ranges[1::2].copy()
    if np.any(q_min > q_max):
        raise CorruptStreamError("header has an empty symbol range")
    return Bitstream(fp, hh, ww, ph, pw, (m, h, w), q_min, q_max, payload)
