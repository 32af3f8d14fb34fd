"""JPEG-like block-transform codec: 8x8 DCT, IJG quality scaling, adaptive range coding.

Images are (3, H, W) RGB, either floats in [0, 1] or uint8. The codec works
on 8-bit samples, converts to full-range BT.601 YCbCr without chroma
subsampling and replicates edge pixels to fill partial blocks.

Per block and component the payload holds the end-of-block position (one
past the last nonzero zigzag coefficient), the DC difference from the
previous block of the same component, and every AC coefficient before the
end position. Each value is sent as a magnitude category through an
adaptive frequency table chosen by component kind and frequency band,
followed by raw sign/magnitude bits.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .rangecoder import (
    AdaptiveModel,
    CorruptStreamError,
    RangeDecoder,
    RangeEncoder,
    TruncatedStreamError,
    UnsupportedFormatError,
)

MAGIC = b"PBLK"
VERSION = 1
_HEADER = struct.Struct("<4sBIIB")
BLOCK = 8
CATEGORIES = 16

LUMA_BASE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

CHROMA_BASE = np.full((8, 8), 99, dtype=np.int64)
CHROMA_BASE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]

# AC zigzag positions grouped into bands that share a category table
_BAND_EDGES = (1, 3, 6, 10, 15, 21, 28, 36, 64)


def _zigzag() -> np.ndarray:
    order = sorted(((i, j) for i in range(8) for j in range(8)),
                   key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 == 0 else p[0]))
    return np.array([i * 8 + j for i, j in order])


ZIGZAG = _zigzag()


@dataclass(frozen=True)
class QuantTables:
    quality: int
    luma: np.ndarray
    chroma: np.ndarray

    def for_component(self, c: int) -> np.ndarray:
        return self.luma if c == 0 else self.chroma


def quality_scale(quality: int) -> QuantTables:
    """IJG scaling of the base tables for quality 1..100, entries clamped to [1, 255]."""
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in [1, 100], got {quality!r}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality

    def scaled(base):
        return np.clip((base * scale + 50) // 100, 1, 255)

    return QuantTables(int(quality), scaled(LUMA_BASE), scaled(CHROMA_BASE))


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_D = dct_matrix()


def dct8x8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    return _D @ np.asarray(block, dtype=np.float64) @ _D.T


def idct8x8(coef: np.ndarray) -> np.ndarray:
    return _D.T @ np.asarray(coef, dtype=np.float64) @ _D


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """Full-range BT.601 on a (3, H, W) array in 0..255."""
    r, g, b = rgb.astype(np.float64)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc.astype(np.float64)
    cb = cb - 128.0
    cr = cr - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) RGB image, got {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    if np.issubdtype(arr.dtype, np.integer):
        return np.clip(arr, 0, 255).astype(np.uint8)
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def _blocks(plane: np.ndarray) -> np.ndarray:
    """(H, W) with H, W multiples of 8 -> (H/8, W/8, 8, 8)."""
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).swapaxes(1, 2)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.swapaxes(1, 2).reshape(bh * 8, bw * 8)


def quantized_coefficients(image, quality: int) -> np.ndarray:
    """Quantized DCT coefficients, shape (3, H/8, W/8, 8, 8) after edge-replication padding."""
    tables = quality_scale(quality)
    rgb = to_uint8(image)
    _, h, w = rgb.shape
    ph, pw = -(-h // 8) * 8, -(-w // 8) * 8
    rgb = np.pad(rgb, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    ycc = rgb_to_ycbcr(rgb) - 128.0
    return np.stack([_round_half_away(dct8x8(_blocks(ycc[c])) / tables.for_component(c)) for c in range(3)])


def reconstruct(coefs: np.ndarray, quality: int, height: int, width: int) -> np.ndarray:
    """Dequantize, invert the DCT and colour transform; float (3, H, W) on the 8-bit grid in [0, 1]."""
    tables = quality_scale(quality)
    planes = [_unblocks(idct8x8(coefs[c] * tables.for_component(c))) for c in range(3)]
    rgb = ycbcr_to_rgb(np.stack(planes) + 128.0)
    rgb = np.floor(np.clip(rgb, 0.0, 255.0) + 0.5)[:, :height, :width]
    return rgb / 255.0


def _category(v: int) -> int:
    return abs(v).bit_length()


class _Models:
    def __init__(self):
        self.eob = [AdaptiveModel(65) for _ in range(2)]
        self.dc = [AdaptiveModel(CATEGORIES) for _ in range(2)]
        self.ac = [[AdaptiveModel(CATEGORIES) for _ in _BAND_EDGES[1:]] for _ in range(2)]
        self.band = np.searchsorted(_BAND_EDGES, np.arange(64), side="right") - 1


def _put_value(enc: RangeEncoder, model: AdaptiveModel, v: int) -> None:
    cat = _category(v)
    if cat >= CATEGORIES:
        raise ValueError(f"coefficient {v} too large to code")
    model.encode(enc, cat)
    if cat:
        enc.encode_bits(int(v < 0), 1)
        if cat > 1:
            enc.encode_bits(abs(v) - (1 << (cat - 1)), cat - 1)


def _get_value(dec: RangeDecoder, model: AdaptiveModel) -> int:
    cat = model.decode(dec)
    if cat == 0:
        return 0
    neg = dec.decode_bits(1)
    mag = (1 << (cat - 1)) + (dec.decode_bits(cat - 1) if cat > 1 else 0)
    return -mag if neg else mag


def encode_coefficients(coefs: np.ndarray) -> bytes:
    """Range-code a (3, bh, bw, 8, 8) integer coefficient array."""
    enc = RangeEncoder()
    m = _Models()
    zz = coefs.reshape(3, coefs.shape[1], coefs.shape[2], 64)[..., ZIGZAG]
    for c in range(3):
        kind = 0 if c == 0 else 1
        prev_dc = 0
        for row in zz[c]:
            for blk in row:
                nz = np.flatnonzero(blk)
                end = int(nz[-1]) + 1 if nz.size else 0
                m.eob[kind].encode(enc, end)
                vals = blk.tolist()
                if end:
                    _put_value(enc, m.dc[kind], vals[0] - prev_dc)
                    ac = m.ac[kind]
                    for k in range(1, end):
                        _put_value(enc, ac[m.band[k]], vals[k])
                # an empty block keeps the DC predictor at zero difference
                prev_dc = vals[0] if end else prev_dc
    return enc.finish()


def decode_coefficients(payload: bytes, blocks_h: int, blocks_w: int) -> np.ndarray:
    dec = RangeDecoder(payload)
    m = _Models()
    zz = np.zeros((3, blocks_h, blocks_w, 64), dtype=np.int64)
    for c in range(3):
        kind = 0 if c == 0 else 1
        prev_dc = 0
        for i in range(blocks_h):
            for j in range(blocks_w):
                end = m.eob[kind].decode(dec)
                if end:
                    vals = [0] * 64
                    vals[0] = prev_dc + _get_value(dec, m.dc[kind])
                    ac = m.ac[kind]
                    for k in range(1, end):
                        vals[k] = _get_value(dec, ac[m.band[k]])
                    zz[c, i, j] = vals
                    prev_dc = vals[0]
    dec.verify_end()
    out = np.zeros_like(zz)
    out[..., ZIGZAG] = zz
    return out.reshape(3, blocks_h, blocks_w, 8, 8)


@dataclass
class BlockStream:
    height: int
    width: int
    quality: int
    payload: bytes

    @property
    def total_bytes(self) -> int:
        return _HEADER.size + len(self.payload) + 4

    @property
    def bpp(self) -> float:
        return 8.0 * self.total_bytes / (self.height * self.width)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.height, self.width, self.quality)
        return head + self.payload + struct.pack("<I", zlib.crc32(head + self.payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockStream":
        if len(data) < 5:
            raise TruncatedStreamError("block stream shorter than its magic and version")
        if data[:4] != MAGIC:
            raise UnsupportedFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        if data[4] != VERSION:
            raise UnsupportedFormatError(f"unsupported block stream version {data[4]}")
        if len(data) < _HEADER.size + 4:
            raise TruncatedStreamError("block stream shorter than its header")
        (crc,) = struct.unpack("<I", data[-4:])
        if zlib.crc32(data[:-4]) != crc:
            raise CorruptStreamError("block stream CRC32 mismatch")
        _, _, h, w, q = _HEADER.unpack_from(data)
        if h == 0 or w == 0 or not 1 <= q <= 100:
            raise CorruptStreamError("block stream header has invalid dimensions or quality")
        return cls(h, w, q, bytes(data[_HEADER.size:-4]))


def block_encode(image, quality: int) -> bytes:
    rgb = to_uint8(image)
    coefs = quantized_coefficients(rgb, quality)
    return BlockStream(rgb.shape[1], rgb.shape[2], int(quality), encode_coefficients(coefs)).to_bytes()


def block_decode(data: bytes) -> np.ndarray:
    """Decode a .pblk stream to a float (3, H, W) image in [0, 1]."""
    s = BlockStream.from_bytes(data)
    coefs = decode_coefficients(s.payload, -(-s.height // 8), -(-s.width // 8))
    return reconstruct(coefs, s.quality, s.height, s.width)


def block_bpp(data: bytes) -> float:
    s = BlockStream.from_bytes(data)
    return 8.0 * len(data) / (s.height * s.width)
