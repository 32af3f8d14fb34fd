"""Image <-> .pwsc byte stream using a trained ``ModelBundle``."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .bitstream import Bitstream, overhead_bytes, pack_bitstream, unpack_bitstream
from .entropy import build_cdf_tables, rate_bits, support_rate_bits
from .model import FingerprintMismatch, LatentCode, ModelBundle, decode, latent_code
from .rangecoder import range_decode, range_encode


def channel_ids(shape: tuple) -> np.ndarray:
    """Channel id of every symbol in channel-major raster order."""
    m, h, w = shape
    return np.repeat(np.arange(m, dtype=np.int64), h * w)


def encode_code(code: LatentCode, model: ModelBundle) -> bytes:
    tables = build_cdf_tables(model.prior, code.q_min, code.q_max)
    payload = range_encode(code.symbols.reshape(-1), channel_ids(code.symbols.shape), tables)
    return pack_bitstream(code, payload)


def compress(image, model: ModelBundle) -> bytes:
    """Encode, round and range-code a 1 x 3 x H x W image."""
    return encode_code(latent_code(image, model), model)


def read_code(data: bytes, model: ModelBundle) -> LatentCode:
    stream = unpack_bitstream(data)
    if stream.fingerprint != model.fingerprint:
        raise FingerprintMismatch(
            f"stream was written by model {stream.fingerprint.hex()}, not {model.fingerprint.hex()}"
        )
    if stream.latent_shape[0] != model.config.latent_channels:
        raise FingerprintMismatch("stream latent channels do not match the model")
    tables = build_cdf_tables(model.prior, stream.q_min, stream.q_max)
    symbols = range_decode(stream.payload, tables, channel_ids(stream.latent_shape))
    return stream.latent_code(symbols)


def decompress(data: bytes, model: ModelBundle) -> T.Tensor:
    return decode(read_code(data, model), model)


def estimated_bits(code: LatentCode, model: ModelBundle) -> float:
    """Entropy-model estimate of the payload size for a rounded latent.

    The prior is restricted to the symbol ranges stored in the header, which
    is what the range coder actually codes against.
    """
    return support_rate_bits(code.symbols, model.prior, code.q_min, code.q_max)


def prior_bits(code: LatentCode, model: ModelBundle) -> float:
    """Code length of a rounded latent under the unrestricted prior (the training rate term)."""
    return rate_bits(code.symbols[None], model.prior)


def estimated_file_bits(code: LatentCode, model: ModelBundle) -> float:
    """Payload estimate plus the exact header and checksum bits."""
    return estimated_bits(code, model) + 8.0 * overhead_bytes(code.symbols.shape[0])


def stream_bpp(data: bytes) -> float:
    stream = unpack_bitstream(data)
    return 8.0 * len(data) / (stream.height * stream.width)


__all__ = ["Bitstream", "compress", "decompress", "encode_code", "read_code", "estimated_bits", "prior_bits",
           "estimated_file_bits", "stream_bpp"]
