import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import fft, ndimage

from wsicodec.baseline import (
    CHROMA_BASE,
    LUMA_BASE,
    ZIGZAG,
    BlockStream,
    block_bpp,
    block_decode,
    block_encode,
    dct8x8,
    decode_coefficients,
    encode_coefficients,
    idct8x8,
    quality_scale,
    quantized_coefficients,
    reconstruct,
    rgb_to_ycbcr,
    ycbcr_to_rgb,
)
from wsicodec.metrics import psnr
from wsicodec.rangecoder import CorruptStreamError, UnsupportedFormatError


def textured(seed, h=96, w=96, sigma=1.5):
    x = ndimage.gaussian_filter(np.random.default_rng(seed).uniform(size=(3, h, w)), (0, sigma, sigma))
    x = (x - x.min()) / (x.max() - x.min())
    return np.round(x * 255) / 255


def libjpeg_tables(quality):
    buf = io.BytesIO()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(buf, "JPEG", quality=quality)
    q = Image.open(io.BytesIO(buf.getvalue())).quantization
    return np.array(q[0]).reshape(8, 8), np.array(q[1]).reshape(8, 8)


def test_q50_is_base_tables():
    t = quality_scale(50)
    np.testing.assert_array_equal(t.luma, LUMA_BASE)
    np.testing.assert_array_equal(t.chroma, CHROMA_BASE)


def test_base_tables_match_libjpeg():
    luma, chroma = libjpeg_tables(50)
    np.testing.assert_array_equal(LUMA_BASE, luma)
    np.testing.assert_array_equal(CHROMA_BASE, chroma)


@pytest.mark.parametrize("quality", [1, 5, 10, 25, 49, 51, 75, 90, 99, 100])
def test_quality_scaling_matches_libjpeg(quality):
    luma, chroma = libjpeg_tables(quality)
    t = quality_scale(quality)
    np.testing.assert_array_equal(t.luma, luma)
    np.testing.assert_array_equal(t.chroma, chroma)


def test_quality_extremes():
    assert np.all(quality_scale(100).luma == 1) and np.all(quality_scale(100).chroma == 1)
    assert quality_scale(10).luma[0, 0] == 80
    for q in range(1, 101):
        t = quality_scale(q)
        assert t.luma.min() >= 1 and t.chroma.max() <= 255
    for bad in (0, 101, 50.0):
        with pytest.raises(ValueError):
            quality_scale(bad)


def test_zigzag_start():
    assert ZIGZAG[:10].tolist() == [0, 1, 8, 16, 9, 2, 3, 10, 17, 24]
    assert sorted(ZIGZAG.tolist()) == list(range(64))


def test_dct_constant_block():
    c = dct8x8(np.full((8, 8), 7.0))
    assert c[0, 0] == pytest.approx(56.0)
    c[0, 0] = 0
    assert np.abs(c).max() < 1e-12


def test_dct_matches_scipy_and_parseval():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = rng.uniform(-128, 127, size=(8, 8))
        c = dct8x8(b)
        np.testing.assert_allclose(c, fft.dctn(b, norm="ortho"), atol=1e-9)
        assert np.sum(c * c) == pytest.approx(np.sum(b * b), rel=1e-6)
        assert np.abs(idct8x8(c) - b).max() < 1e-4 * 255


def test_color_round_trip():
    rgb = np.random.default_rng(1).uniform(0, 255, size=(3, 50, 50))
    np.testing.assert_allclose(ycbcr_to_rgb(rgb_to_ycbcr(rgb)), rgb, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), bh=st.integers(1, 4), bw=st.integers(1, 4), spread=st.sampled_from([1, 10, 300, 1500]))
def test_coefficient_coding_lossless(seed, bh, bw, spread):
    rng = np.random.default_rng(seed)
    coefs = np.round(rng.laplace(scale=spread, size=(3, bh, bw, 8, 8)) * (rng.uniform(size=(3, bh, bw, 8, 8)) < 0.4))
    coefs = np.clip(coefs, -2047, 2047).astype(np.int64)
    np.testing.assert_array_equal(decode_coefficients(encode_coefficients(coefs), bh, bw), coefs)


def test_codec_recovers_quantized_coefficients():
    x = textured(2, 40, 56)
    for q in (10, 50, 90):
        coefs = quantized_coefficients(x, q)
        s = BlockStream.from_bytes(block_encode(x, q))
        np.testing.assert_array_equal(decode_coefficients(s.payload, 5, 7), coefs)
        np.testing.assert_array_equal(block_decode(block_encode(x, q)), reconstruct(coefs, q, 40, 56))


def test_near_lossless_at_q100():
    ramp = np.linspace(0, 1, 64)
    x = np.round(np.stack([ramp[None, :] * np.ones((64, 1)), ramp[:, None] * np.ones((1, 64)),
                           np.full((64, 64), 0.5)]) * 255) / 255
    assert psnr(x, block_decode(block_encode(x, 100))) > 45


def test_rate_and_quality_monotone():
    x = textured(3)
    results = [(block_bpp(b := block_encode(x, q)), psnr(x, block_decode(b))) for q in (10, 30, 50, 70, 90)]
    bpps, psnrs = zip(*results)
    assert all(a < b for a, b in zip(bpps, bpps[1:]))
    assert all(a <= b for a, b in zip(psnrs, psnrs[1:]))


def test_blocking_boundaries_at_low_quality():
    x = textured(4, 128, 128, sigma=4.0)
    y = block_decode(block_encode(x, 10))
    grad = np.abs(np.diff(y, axis=2)).mean(axis=(0, 1))  # column j -> j+1
    boundary = grad[7::8].mean()
    interior = np.delete(grad, np.arange(7, grad.size, 8)).mean()
    assert boundary > 2 * interior


def test_odd_dimensions_and_uint8_input():
    x = (textured(5, 37, 21) * 255).astype(np.uint8)
    y = block_decode(block_encode(x, 75))
    assert y.shape == (3, 37, 21) and y.min() >= 0 and y.max() <= 1


def test_deterministic_and_bpp():
    x = textured(6, 32, 32)
    a, b = block_encode(x, 50), block_encode(x, 50)
    assert a == b
    assert block_bpp(a) == pytest.approx(8 * len(a) / 1024)
    assert BlockStream.from_bytes(a).bpp == pytest.approx(block_bpp(a))


def test_corrupt_and_foreign_streams():
    data = bytearray(block_encode(textured(7, 32, 32), 50))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CorruptStreamError, match="CRC"):
        block_decode(bytes(data))
    good = block_encode(textured(7, 32, 32), 50)
    with pytest.raises(UnsupportedFormatError):
        block_decode(b"XXXX" + good[4:])
    with pytest.raises(UnsupportedFormatError):
        block_decode(good[:4] + b"\x07" + good[5:])
