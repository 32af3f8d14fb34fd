"""Controlled image distortions: a chromatic bias in CIELAB and block-transform compression artifacts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics
from .baseline import block_decode, block_encode

# linear sRGB -> XYZ; the D65 white point is the image of (1, 1, 1)
RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)
WHITE = RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0

COLOR_LEVELS = (0, 10, 20, 30, 40, 50)
BLOCKING_LEVELS = (90, 70, 50, 30, 10)
KINDS = {"color_shift": (0, 50), "blocking": (10, 90)}


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * np.abs(v) ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t ** 3, 3 * _DELTA ** 2 * (t - 4.0 / 29.0))


def srgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] with channels on axis -3 to L*, a*, b* on the same axis."""
    rgb = np.moveaxis(srgb_to_linear(image), -3, -1)
    xyz = rgb @ RGB_TO_XYZ.T / WHITE
    fx, fy, fz = (_f(xyz[..., i]) for i in range(3))
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    return np.moveaxis(lab, -1, -3)


def lab_to_srgb(lab: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Inverse of ``srgb_to_lab``; out-of-gamut colours are clipped to [0, 1] unless ``clamp`` is off."""
    lab = np.moveaxis(np.asarray(lab, dtype=np.float64), -3, -1)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * WHITE
    rgb = linear_to_srgb(xyz @ XYZ_TO_RGB.T)
    if clamp:
        rgb = np.clip(rgb, 0.0, 1.0)
    return np.moveaxis(rgb, -1, -3)


def _check_level(kind: str, level) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown distortion kind {kind!r}; expected one of {sorted(KINDS)}")
    lo, hi = KINDS[kind]
    if not lo <= level <= hi:
        raise ValueError(f"{kind} level {level} outside [{lo}, {hi}]")


def color_shift(image: np.ndarray, bias: float) -> np.ndarray:
    """Add ``bias`` to the a* (green-red) channel in CIELAB."""
    _check_level("color_shift", bias)
    lab = srgb_to_lab(image)
    lab[..., 1, :, :] += bias
    return lab_to_srgb(lab)


def blocking(image: np.ndarray, quality: int) -> np.ndarray:
    """Round trip through the block-transform codec at ``quality``."""
    _check_level("blocking", quality)
    arr = np.asarray(image)
    if arr.ndim == 4:
        return np.stack([block_decode(block_encode(a, int(quality))) for a in arr])
    return block_decode(block_encode(arr, int(quality)))


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: float

    def __post_init__(self):
        _check_level(self.kind, self.level)

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.kind == "color_shift":
            return color_shift(image, self.level)
        return blocking(image, int(self.level))


def default_levels(kind: str) -> tuple:
    _check_level(kind, KINDS[kind][0])
    return COLOR_LEVELS if kind == "color_shift" else BLOCKING_LEVELS


SWEEP_METRICS = ("mse", "psnr", "one_minus_ms_ssim", "lpips", "feature_l2")


@dataclass(frozen=True)
class SweepRow:
    kind: str
    level: float
    metric: str
    mean: float
    std: float
    n: int


def distortion_sweep(images, extractor: metrics.FeatureExtractor, kinds=("color_shift", "blocking"),
                     levels: dict | None = None) -> list[SweepRow]:
    """Mean and std of each metric between every image and its distorted copy, per kind and level.

    ``images`` are (3, H, W) float arrays in [0, 1].
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("distortion sweep needs at least one image")
    rows = []
    for kind in kinds:
        for level in (levels or {}).get(kind, default_levels(kind)):
            spec = DistortionSpec(kind, level)
            values = {m: [] for m in SWEEP_METRICS}
            for im in images:
                out = spec.apply(im)
                err = metrics.mse(im, out)
                values["mse"].append(err)
                values["psnr"].append(metrics.psnr_from_mse(err, 1.0))
                values["one_minus_ms_ssim"].append(1.0 - metrics.ms_ssim(im, out))
                values["lpips"].append(metrics.lpips(im, out, extractor))
                values["feature_l2"].append(metrics.feature_l2(im, out, extractor))
            for m in SWEEP_METRICS:
                v = np.asarray(values[m])
                rows.append(SweepRow(kind, level, m, float(v.mean()), float(v.std()), len(v)))
    return rows
