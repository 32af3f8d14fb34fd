"""Analysis/synthesis transforms, quantization and the serialized model bundle."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from . import weights
from .entropy import FactorizedPrior

ACTIVATIONS = ("gdn", "relu")
KERNEL = 5
PAD = 2


class FingerprintMismatch(ValueError):
    """A latent code or stream was produced by a different model."""


@dataclass(frozen=True)
class CodecConfig:
    latent_channels: int = 48
    hidden_channels: int = 32
    stages: int = 3
    activation: str = "gdn"

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.latent_channels < 1 or self.hidden_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def factor(self) -> int:
        return 2 ** self.stages

    def as_array(self) -> np.ndarray:
        return np.array([self.latent_channels, self.hidden_channels, self.stages,
                         ACTIVATIONS.index(self.activation)], dtype=np.float32)

    @classmethod
    def from_array(cls, arr) -> "CodecConfig":
        m, n, s, a = (int(round(float(v))) for v in np.asarray(arr).reshape(-1)[:4])
        return cls(m, n, s, ACTIVATIONS[a])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentCode:
    """Quantized latent grid plus everything needed to decode it."""

    symbols: np.ndarray  # (M, h, w) int32
    height: int
    width: int
    padded_height: int
    padded_width: int
    fingerprint: bytes
    q_min: np.ndarray  # (M,) int32
    q_max: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int32)
        self.q_min = np.asarray(self.q_min, dtype=np.int32)
        self.q_max = np.asarray(self.q_max, dtype=np.int32)
        if self.symbols.ndim != 3:
            raise ValueError(f"latent symbols must be (M, h, w), got {self.symbols.shape}")
        m = self.symbols.shape[0]
        if self.q_min.shape != (m,) or self.q_max.shape != (m,):
            raise ValueError("need one (q_min, q_max) pair per channel")
        if np.any(self.symbols.min(axis=(1, 2)) < self.q_min) or np.any(self.symbols.max(axis=(1, 2)) > self.q_max):
            raise ValueError("latent values fall outside the recorded per-channel ranges")

    @classmethod
    def from_symbols(cls, symbols, height, width, fingerprint: bytes) -> "LatentCode":
        symbols = np.asarray(symbols, dtype=np.int32)
        m, h, w = symbols.shape
        return cls(symbols, height, width, padded_height=h, padded_width=w, fingerprint=fingerprint,
                   q_min=symbols.min(axis=(1, 2)), q_max=symbols.max(axis=(1, 2)))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_parameters(config: CodecConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded initial weights in canonical parameter order."""
    rng = np.random.default_rng(seed)
    n, m, k = config.hidden_channels, config.latent_channels, KERNEL
    enc_ch = [3] + [n] * (config.stages - 1) + [m]
    dec_ch = [m] + [n] * (config.stages - 1) + [3]
    p: dict[str, np.ndarray] = {"config": config.as_array()}

    def gdn_params(prefix, c):
        p[f"{prefix}.beta_raw"] = np.full(c, np.sqrt(1.0 - T.GDN_BETA_MIN), dtype=np.float32)
        g = np.full((c, c), 0.01, dtype=np.float32)
        np.fill_diagonal(g, np.sqrt(0.1))
        p[f"{prefix}.gamma_raw"] = g

    for i in range(config.stages):
        cin, cout = enc_ch[i], enc_ch[i + 1]
        p[f"enc.{i}.weight"] = _uniform(rng, (cout, cin, k, k), cin * k * k)
        p[f"enc.{i}.bias"] = np.zeros(cout, dtype=np.float32)
        if i < config.stages - 1 and config.activation == "gdn":
            gdn_params(f"enc.{i}.gdn", cout)
    for i in range(config.stages):
        cin, cout = dec_ch[i], dec_ch[i + 1]
        p[f"dec.{i}.weight"] = _uniform(rng, (cin, cout, k, k), cin * k * k / 4)
        p[f"dec.{i}.bias"] = np.zeros(cout, dtype=np.float32)
        if i < config.stages - 1 and config.activation == "gdn":
            gdn_params(f"dec.{i}.igdn", cout)
    p[f"dec.{config.stages - 1}.bias"][:] = 0.5
    p["prior.loc"] = np.zeros(m, dtype=np.float32)
    p["prior.log_scale"] = np.zeros(m, dtype=np.float32)
    return p


class ModelBundle:
    """Encoder, decoder and prior parameters with their config and content hash."""

    def __init__(self, config: CodecConfig, params: dict[str, np.ndarray], dtype=np.float32):
        self.config = config
        missing = set(init_parameters(config)) - set(params)
        if missing:
            raise weights.WeightFileError(f"model is missing parameters: {sorted(missing)}")
        self.params = {name: T.Tensor(arr, requires_grad=name != "config", dtype=dtype)
                       for name, arr in params.items()}
        self.prior = FactorizedPrior(config.latent_channels)
        self.prior.loc = self.params["prior.loc"]
        self.prior.log_scale = self.params["prior.log_scale"]
        self._fp_cache: tuple = ((), b"")

    @classmethod
    def create(cls, config: CodecConfig | None = None, seed: int = 0) -> "ModelBundle":
        config = config or CodecConfig()
        return cls(config, init_parameters(config, seed))

    def trainable(self) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if k != "config"}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.astype(np.float32) for k, v in self.params.items()}

    def to_bytes(self) -> bytes:
        return weights.dumps(self.state())

    @property
    def fingerprint(self) -> bytes:
        """8-byte FNV-1a hash over every serialized parameter byte."""
        arrays = tuple(v.data for v in self.params.values())
        cached, fp = self._fp_cache
        if len(cached) != len(arrays) or any(a is not b for a, b in zip(cached, arrays)):
            fp = weights.file_hash(self.to_bytes())
            self._fp_cache = (arrays, fp)
        return fp

    def save(self, path: str | os.PathLike) -> bytes:
        return weights.save(path, self.state())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelBundle":
        params = weights.loads(data)
        if "config" not in params:
            raise weights.WeightFileError("weight file has no 'config' tensor; not a codec model")
        return cls(CodecConfig.from_array(params["config"]), params)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelBundle":
        if not os.path.exists(path):
            raise FileNotFoundError(f"model file not found: {path}")
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def astype(self, dtype) -> "ModelBundle":
        """Copy with parameters stored at ``dtype`` (float64 for gradient checks)."""
        return ModelBundle(self.config, {k: v.data for k, v in self.params.items()}, dtype=dtype)

    def _gdn(self, x, prefix, inverse):
        beta = T.add_scalar(T.square(self.params[f"{prefix}.beta_raw"]), T.GDN_BETA_MIN)
        gamma = T.square(self.params[f"{prefix}.gamma_raw"])
        return T.gdn(x, beta, gamma, inverse=inverse)

    def analysis(self, x: T.Tensor) -> T.Tensor:
        cfg = self.config
        for i in range(cfg.stages):
            x = T.pad_reflect(x, PAD, PAD, PAD, PAD)
            x = T.conv2d(x, self.params[f"enc.{i}.weight"], stride=2)
            x = T.add_bias(x, self.params[f"enc.{i}.bias"])
            if i < cfg.stages - 1:
                x = self._gdn(x, f"enc.{i}.gdn", False) if cfg.activation == "gdn" else T.relu(x)
        return x

    def synthesis(self, y: T.Tensor) -> T.Tensor:
        cfg = self.config
        for i in range(cfg.stages):
            y = T.deconv2d(y, self.params[f"dec.{i}.weight"], stride=2, pad=PAD, output_padding=1)
            y = T.add_bias(y, self.params[f"dec.{i}.bias"])
            if i < cfg.stages - 1:
                y = self._gdn(y, f"dec.{i}.igdn", True) if cfg.activation == "gdn" else T.relu(y)
        return y


def padded_size(size: int, factor: int) -> int:
    return -(-size // factor) * factor


def _as_image_tensor(image, dtype=None) -> T.Tensor:
    if isinstance(image, T.Tensor):
        return image
    arr = np.asarray(image)
    return T.Tensor(arr, dtype=dtype or (np.float64 if arr.dtype == np.float64 else np.float32))


def encode(image, model: ModelBundle) -> T.Tensor:
    """Continuous latent of an N x 3 x H x W image in [0, 1].

    The image is reflect-padded on the bottom/right to a multiple of
    2**stages, so the latent is M x ceil(H / 2**stages) x ceil(W / 2**stages).
    """
    x = _as_image_tensor(image, model.params["enc.0.weight"].dtype)
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"expected an N x 3 x H x W image, got {x.shape}")
    f = model.config.factor
    h, w = x.shape[2:]
    if h < f or w < f:
        raise T.ShapeError(f"image {h}x{w} smaller than the {f}x{f} minimum for {model.config.stages} stages")
    if x.data.min() < -1e-6 or x.data.max() > 1 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    x = T.pad_reflect(x, 0, padded_size(h, f) - h, 0, padded_size(w, f) - w)
    return model.analysis(x)


def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize(latent, mode: str = "eval", rng: np.random.Generator | int | None = None):
    """``eval``: round half away from zero. ``train``: add i.i.d. U(-0.5, 0.5) noise."""
    is_tensor = isinstance(latent, T.Tensor)
    y = latent.data if is_tensor else np.asarray(latent)
    if mode == "eval":
        q = round_half_away(y).astype(y.dtype)
        return T.Tensor(q, dtype=y.dtype) if is_tensor else q
    if mode != "train":
        raise ValueError(f"unknown quantization mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode quantization needs a seeded rng")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    y64 = y.astype(np.float64)
    out = (y64 + rng.uniform(-0.5, 0.5, size=y.shape)).astype(y.dtype)
    # float rounding must not push the sample outside the noise interval
    bad = np.abs(out.astype(np.float64) - y64) > 0.5
    while np.any(bad):
        out[bad] = np.nextafter(out[bad], y[bad])
        bad = np.abs(out.astype(np.float64) - y64) > 0.5
    if not is_tensor:
        return out
    return T.from_op(out, (latent,), "noise_quantize", lambda g: (g,))


def decode(latent, model: ModelBundle, size: tuple[int, int] | None = None) -> T.Tensor:
    """Reconstruct an image clamped to [0, 1], cropped to ``size`` (or the code's original dims)."""
    if isinstance(latent, LatentCode):
        if latent.fingerprint != model.fingerprint:
            raise FingerprintMismatch(
                f"latent code was produced by model {latent.fingerprint.hex()}, not {model.fingerprint.hex()}"
            )
        size = (latent.height, latent.width)
        y = T.Tensor(latent.symbols[None].astype(np.float32))
    else:
        y = latent if isinstance(latent, T.Tensor) else T.Tensor(np.asarray(latent, dtype=np.float32))
    if y.data.ndim == 3:
        y = T.Tensor(y.data[None], dtype=y.dtype)
    if y.shape[1] != model.config.latent_channels:
        raise T.ShapeError(f"latent has {y.shape[1]} channels, model expects {model.config.latent_channels}")
    with T.no_grad():
        x = model.synthesis(y)
    h, w = size if size is not None else x.shape[2:]
    if h > x.shape[2] or w > x.shape[3]:
        raise T.ShapeError(f"requested size {h}x{w} exceeds decoded {x.shape[2]}x{x.shape[3]}")
    return T.Tensor(np.clip(x.data[:, :, :h, :w], 0.0, 1.0), dtype=x.dtype)


def latent_code(image, model: ModelBundle) -> LatentCode:
    """Encode and round one image into a ``LatentCode``."""
    x = _as_image_tensor(image)
    with T.no_grad():
        y = encode(x, model)
    symbols = quantize(y.data[0], "eval").astype(np.int32)
    h, w = x.shape[2:]
    code = LatentCode.from_symbols(symbols, h, w, model.fingerprint)
    code.padded_height = padded_size(h, model.config.factor)
    code.padded_width = padded_size(w, model.config.factor)
    return code
