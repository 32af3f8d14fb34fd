"""Distortion and perceptual metrics: MSE/PSNR, (MS-)SSIM, LPIPS-style and pooled feature distances.

Images are channel-first arrays, either ``(C, H, W)`` or ``(N, C, H, W)``.
Float images are taken to be in [0, 1]; integer images in [0, 255].
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from . import tensor as T
from . import weights

K1 = 0.01
K2 = 0.03
WINDOW = 11
WINDOW_SIGMA = 1.5
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
EXTRACTOR_CHANNELS = (16, 32, 64, 128)
NORM_EPS = 1e-10
DEFAULT_EXTRACTOR = "extractor_default.pwgt"


def _pair(x, x2) -> tuple[np.ndarray, np.ndarray]:
    a = x.data if isinstance(x, T.Tensor) else np.asarray(x)
    b = x2.data if isinstance(x2, T.Tensor) else np.asarray(x2)
    if a.shape != b.shape:
        raise T.ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def default_max(image: np.ndarray) -> float:
    """Largest representable value of the image's dtype: 255 for integers, 1.0 for floats."""
    return 255.0 if np.issubdtype(np.asarray(image).dtype, np.integer) else 1.0


def mse(x, x2) -> float:
    a, b = _pair(x, x2)
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr_from_mse(err: float, max_val: float) -> float:
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    if err == 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / err)


def psnr(x, x2, max_val: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    a, _ = _pair(x, x2)
    return psnr_from_mse(mse(x, x2), default_max(a) if max_val is None else max_val)


# ---------------------------------------------------------------- SSIM


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(planes: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of a (B, H, W) stack."""
    k = g.size
    v = np.lib.stride_tricks.sliding_window_view(planes, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(v, k, axis=2) @ g


def ssim_from_stats(mu, mu2, var, var2, cov, data_range: float = 1.0, k1: float = K1, k2: float = K2):
    """SSIM of windows with the given means, variances and covariance.

    Returns ``(ssim, cs)`` where ``cs`` is the contrast-structure factor.
    """
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    lum = (2 * mu * mu2 + c1) / (mu * mu + mu2 * mu2 + c1)
    cs = (2 * cov + c2) / (var + var2 + c2)
    return lum * cs, cs


def _planes(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        return a[None]
    return a.reshape(-1, a.shape[-2], a.shape[-1])


def _ssim_maps(p: np.ndarray, q: np.ndarray, data_range: float, g: np.ndarray):
    if min(p.shape[-2:]) < g.size:
        raise T.ShapeError(f"image {p.shape[-2:]} smaller than the {g.size}x{g.size} window")
    mu = _filter_valid(p, g)
    mu2 = _filter_valid(q, g)
    var = _filter_valid(p * p, g) - mu * mu
    var2 = _filter_valid(q * q, g) - mu2 * mu2
    cov = _filter_valid(p * q, g) - mu * mu2
    return ssim_from_stats(mu, mu2, var, var2, cov, data_range)


def ssim(x, x2, data_range: float | None = None) -> float:
    """Mean single-scale SSIM over all windows and channels."""
    a, b = _pair(x, x2)
    rng = default_max(a) if data_range is None else data_range
    s, _ = _ssim_maps(_planes(a.astype(np.float64)), _planes(b.astype(np.float64)), rng, gaussian_window())
    return float(s.mean())


def _pool2(p: np.ndarray) -> np.ndarray:
    h, w = p.shape[-2] // 2 * 2, p.shape[-1] // 2 * 2
    p = p[:, :h, :w]
    return 0.25 * (p[:, 0::2, 0::2] + p[:, 1::2, 0::2] + p[:, 0::2, 1::2] + p[:, 1::2, 1::2])


def ms_ssim_scales(height: int, width: int) -> int:
    """Number of scales (at most 5) whose coarsest level still holds one window."""
    side = min(height, width)
    if side < WINDOW:
        raise T.ShapeError(f"image {height}x{width} smaller than one {WINDOW}x{WINDOW} window")
    n = 1
    while n < len(MS_WEIGHTS) and side >= WINDOW * 2 ** n:
        n += 1
    return n


def ms_ssim(x, x2, data_range: float | None = None) -> float:
    """Multi-scale SSIM, computed per image channel and averaged.

    Contrast-structure terms come from every scale, the luminance term from
    the coarsest only. Small images use fewer scales with renormalized
    weights. Negative per-scale terms are clamped to zero.
    """
    a, b = _pair(x, x2)
    rng = default_max(a) if data_range is None else data_range
    p, q = _planes(a.astype(np.float64)), _planes(b.astype(np.float64))
    n = ms_ssim_scales(*p.shape[-2:])
    w = np.asarray(MS_WEIGHTS[:n])
    w = w / w.sum()
    g = gaussian_window()
    result = np.ones(p.shape[0])
    for i in range(n):
        s, cs = _ssim_maps(p, q, rng, g)
        term = (s if i == n - 1 else cs).mean(axis=(1, 2))
        result *= np.maximum(term, 0.0) ** w[i]
        if i < n - 1:
            p, q = _pool2(p), _pool2(q)
    return float(result.mean())


# ---------------------------------------------------------------- features


class FeatureExtractor:
    """Strided 3x3 conv + ReLU stack with fixed weights and per-stage weights ``alphas``."""

    def __init__(self, params: dict[str, np.ndarray]):
        stages = 0
        while f"stage.{stages}.weight" in params:
            stages += 1
        if stages == 0:
            raise weights.WeightFileError("extractor weights contain no 'stage.0.weight'")
        self.weights = [T.Tensor(params[f"stage.{i}.weight"]) for i in range(stages)]
        self.biases = [T.Tensor(params[f"stage.{i}.bias"]) for i in range(stages)]
        alphas = np.asarray(params.get("alphas", np.full(stages, 1.0 / stages)), dtype=np.float64)
        self.alphas = check_alphas(alphas, stages)

    @property
    def stages(self) -> int:
        return len(self.weights)

    @classmethod
    def from_seed(cls, seed: int = 0, channels=EXTRACTOR_CHANNELS) -> "FeatureExtractor":
        return cls(extractor_parameters(seed, channels))

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "FeatureExtractor":
        """Load weights from ``path``, or the packaged default extractor."""
        if path is None:
            data = resources.files("wsicodec").joinpath("data", DEFAULT_EXTRACTOR).read_bytes()
            return cls(weights.loads(data))
        return cls(weights.load(path))

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"stage.{i}.weight"] = w.data
            out[f"stage.{i}.bias"] = b.data
        out["alphas"] = self.alphas.astype(np.float32)
        return out

    def __call__(self, x) -> list[T.Tensor]:
        return extract_features(x, self)


def check_alphas(alphas, stages: int) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.shape != (stages,):
        raise ValueError(f"need {stages} layer weights, got shape {alphas.shape}")
    if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > 1e-6:
        raise ValueError("layer weights must be nonnegative and sum to 1")
    return alphas


def extractor_parameters(seed: int = 0, channels=EXTRACTOR_CHANNELS) -> dict[str, np.ndarray]:
    """He-initialised random weights; zero biases; uniform layer weights."""
    rng = np.random.default_rng(seed)
    out = {}
    cin = 3
    for i, cout in enumerate(channels):
        out[f"stage.{i}.weight"] = (rng.normal(size=(cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))).astype(np.float32)
        out[f"stage.{i}.bias"] = np.zeros(cout, dtype=np.float32)
        cin = cout
    out["alphas"] = np.full(len(channels), 1.0 / len(channels), dtype=np.float32)
    return out


def _image_tensor(x) -> T.Tensor:
    if isinstance(x, T.Tensor):
        t = x
    else:
        arr = np.asarray(x)
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr / 255.0
        if arr.ndim == 3:
            arr = arr[None]
        t = T.Tensor(arr, dtype=np.float64 if arr.dtype == np.float64 else np.float32)
    if t.data.ndim != 4 or t.shape[1] != 3:
        raise T.ShapeError(f"expected an N x 3 x H x W image, got {t.shape}")
    return t


def extract_features(x, extractor: FeatureExtractor) -> list[T.Tensor]:
    """Feature map of every stage for images in [0, 1] (mapped to [-1, 1] first)."""
    h = T.add_scalar(T.scale(_image_tensor(x), 2.0), -1.0)
    out = []
    for w, b in zip(extractor.weights, extractor.biases):
        h = T.relu(T.add_bias(T.conv2d(h, w, stride=2, pad=1), b))
        out.append(h)
    return out


def _unit_channels(f: np.ndarray) -> np.ndarray:
    f = f.astype(np.float64)
    return f / (np.sqrt(np.sum(f * f, axis=1, keepdims=True)) + NORM_EPS)


def lpips_terms(x, x2, extractor: FeatureExtractor) -> np.ndarray:
    """Per-stage distances: squared difference of channel-normalized features, averaged over positions.

    Returns an (L,) array averaged over the batch.
    """
    a, b = _pair(x, x2)
    with T.no_grad():
        fa = extract_features(a, extractor)
        fb = extract_features(b, extractor)
    terms = []
    for u, v in zip(fa, fb):
        d = _unit_channels(u.data) - _unit_channels(v.data)
        terms.append(np.mean(np.sum(d * d, axis=1)))
    return np.asarray(terms)


def lpips(x, x2, extractor: FeatureExtractor, alphas=None) -> float:
    """Weighted sum of per-stage feature distances; ``alphas`` default to the extractor's."""
    w = extractor.alphas if alphas is None else check_alphas(alphas, extractor.stages)
    return float(np.dot(w, lpips_terms(x, x2, extractor)))


def feature_l2(x, x2, extractor: FeatureExtractor):
    """Distance between globally pooled final-stage features, averaged over the batch.

    Returns a differentiable scalar Tensor when either input is a Tensor,
    else a float.
    """
    if not isinstance(x, T.Tensor) and not isinstance(x2, T.Tensor):
        _pair(x, x2)
        with T.no_grad():
            return feature_l2(_image_tensor(x), _image_tensor(x2), extractor).item()
    a, b = _image_tensor(x), _image_tensor(x2)
    if a.shape != b.shape:
        raise T.ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    pa = T.spatial_mean(extract_features(a, extractor)[-1])
    pb = T.spatial_mean(extract_features(b, extractor)[-1])
    return T.mean(T.row_norm(T.sub(pa, pb)))


# ---------------------------------------------------------------- report


@dataclass
class QualityReport:
    mse: float
    psnr: float
    ms_ssim: float
    lpips: float
    feature_l2: float
    bpp: float

    def __post_init__(self):
        if self.mse < 0 or self.lpips < 0 or self.feature_l2 < 0:
            raise ValueError("distances must be nonnegative")
        if self.ms_ssim > 1.0 + 1e-9:
            raise ValueError("ms_ssim cannot exceed 1")

    def consistent(self, max_val: float = 1.0, tol: float = 1e-9) -> bool:
        """PSNR agrees with MSE under the given peak value."""
        expected = psnr_from_mse(self.mse, max_val)
        if math.isinf(expected) or math.isinf(self.psnr):
            return expected == self.psnr
        return abs(expected - self.psnr) <= tol

    def to_dict(self) -> dict:
        return asdict(self)


def quality_report(x, x2, extractor: FeatureExtractor, bpp: float = float("nan"),
                   max_val: float | None = None) -> QualityReport:
    a, _ = _pair(x, x2)
    peak = default_max(a) if max_val is None else max_val
    err = mse(x, x2)
    return QualityReport(mse=err, psnr=psnr_from_mse(err, peak), ms_ssim=ms_ssim(x, x2, peak),
                         lpips=lpips(x, x2, extractor), feature_l2=feature_l2(x, x2, extractor), bpp=bpp)
