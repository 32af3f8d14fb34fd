"""Rate-distortion-perception training: loss, augmentation, and the optimisation loop.

The objective per batch is

    lmbda * rate_bpp + mse + psi * feature_l2

with the rate measured on noise-quantized latents, MSE on [0, 1] pixels and
the feature term from the fixed feature extractor.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .entropy import rate_bits
from .metrics import FeatureExtractor, feature_l2
from .model import CodecConfig, ModelBundle, encode, quantize

log = logging.getLogger(__name__)

LAMBDA_RANGE = (0.001, 0.1)


class TrainingError(RuntimeError):
    """A step produced an unusable loss, or the run diverged."""


@dataclass
class TrainConfig:
    lmbda: float = 0.01
    psi: float = 0.5
    psi_late: float = 0.7
    psi_switch_epoch: int = 90
    lr: float = 1e-4
    prior_lr: float | None = 1e-2  # entropy-model parameters; None means same as lr
    batch_size: int = 4
    tile_size: int = 224
    epochs: int = 150
    max_steps: int | None = None
    patience: int = 5
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    plateau_rel: float = 1e-4
    divergence_factor: float = 10.0
    divergence_epochs: int = 3
    seed: int = 0
    augment: bool = True
    flip_p: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    hue: float = 0.02

    def __post_init__(self):
        if self.lmbda < 0 or self.psi < 0 or self.psi_late < 0:
            raise ValueError("lmbda and psi must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr <= 0 or (self.prior_lr is not None and self.prior_lr <= 0):
            raise ValueError("learning rates must be positive")

    def psi_at(self, epoch: int) -> float:
        return self.psi if epoch < self.psi_switch_epoch else self.psi_late

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    rate_bpp: float
    mse: float
    feature: float
    lmbda: float
    psi: float
    step: int = 0
    epoch: int = 0
    lr: float = 0.0

    def additive(self, rel: float = 1e-6) -> bool:
        parts = self.lmbda * self.rate_bpp + self.mse + self.psi * self.feature
        return abs(self.total - parts) <= rel * max(abs(self.total), 1e-12)


def lambda_grid(count: int) -> list[float]:
    """``count`` log-spaced rate weights from 0.001 to 0.1, endpoints exact."""
    if count < 2:
        raise ValueError("need at least two rate weights")
    lo, hi = LAMBDA_RANGE
    inner = np.exp(np.linspace(math.log(lo), math.log(hi), count))[1:-1]
    return [lo, *(float(v) for v in inner), hi]


def loss_eg(x, model: ModelBundle, extractor: FeatureExtractor, lmbda: float, psi: float,
            rng, bypass_decoder: bool = False, step: int = 0) -> tuple[T.Tensor, LossBreakdown]:
    """Differentiable training loss on an N x 3 x H x W batch with noise-quantized latents.

    ``bypass_decoder`` substitutes the input for the reconstruction; it
    exists to check the loss arithmetic, not for training.
    """
    x = x if isinstance(x, T.Tensor) else T.Tensor(x, dtype=model.params["enc.0.weight"].dtype)
    n, _, h, w = x.shape
    y = quantize(encode(x, model), "train", rng)
    rate = T.scale(rate_bits(y, model.prior), 1.0 / (n * h * w))
    if bypass_decoder:
        x_hat = x
    else:
        x_hat = T.crop(model.synthesis(y), 0, 0, h, w)
    diff = T.sub(x_hat, x)
    mse = T.mean(T.square(diff))
    feat = feature_l2(x, x_hat, extractor)
    total = T.add(T.add(T.scale(rate, lmbda), mse), T.scale(feat, psi))
    parts = {"rate_bpp": rate.item(), "mse": mse.item(), "feature": feat.item(), "total": total.item()}
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise TrainingError(f"step {step}: non-finite loss components {bad}: {parts}")
    # the breakdown's total is recomputed in float64 so that the additivity identity is exact
    total64 = lmbda * parts["rate_bpp"] + parts["mse"] + psi * parts["feature"]
    return total, LossBreakdown(total64, parts["rate_bpp"], parts["mse"], parts["feature"], lmbda, psi, step)


# ---------------------------------------------------------------- augmentation

_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)
_LUMA = np.array([0.299, 0.587, 0.114])


def augment(tile: np.ndarray, rng, config: TrainConfig | None = None) -> np.ndarray:
    """Random flips and colour jitter of a (3, H, W) tile; the output is clamped to [0, 1].

    Six draws are made per call whatever their outcome: two flip coins,
    brightness, contrast and saturation factors, and a hue rotation in turns
    (applied as a rotation of the YIQ chroma plane).
    """
    c = config or TrainConfig()
    x = np.asarray(tile, dtype=np.float64)
    flip_h = rng.random() < c.flip_p
    flip_v = rng.random() < c.flip_p
    b = rng.uniform(1 - c.brightness, 1 + c.brightness)
    k = rng.uniform(1 - c.contrast, 1 + c.contrast)
    s = rng.uniform(1 - c.saturation, 1 + c.saturation)
    turns = rng.uniform(-c.hue, c.hue)
    if flip_h:
        x = x[:, :, ::-1]
    if flip_v:
        x = x[:, ::-1, :]
    if b != 1.0:
        x = x * b
    if k != 1.0:
        m = float(np.tensordot(_LUMA, x, axes=1).mean())
        x = (x - m) * k + m
    if s != 1.0:
        gray = np.tensordot(_LUMA, x, axes=1)[None]
        x = (x - gray) * s + gray
    if turns != 0.0:
        a = 2 * np.pi * turns
        rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
        x = np.tensordot(_YIQ_INV @ rot @ _YIQ, x, axes=1)
    return np.clip(x, 0.0, 1.0).astype(np.asarray(tile).dtype, copy=False)


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    step: int
    mean_loss: float
    lr: float
    psi: float
    lmbda: float
    checkpoint: str | None = None
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    model: ModelBundle
    history: list  # LossBreakdown per step
    epochs: list  # EpochRecord per epoch

    @property
    def totals(self) -> np.ndarray:
        return np.array([b.total for b in self.history])


class Plateau:
    """Halve the learning rate when the best epoch loss stops improving."""

    def __init__(self, lr: float, patience: int, factor: float, min_lr: float, rel: float):
        self.lr, self.patience, self.factor, self.min_lr, self.rel = lr, patience, factor, min_lr, rel
        self.best = math.inf
        self.bad = 0

    def update(self, loss: float) -> float:
        if loss < self.best * (1 - self.rel):
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.lr


def train(tiles: np.ndarray, config: TrainConfig, model: ModelBundle | None = None,
          codec: CodecConfig | None = None, extractor: FeatureExtractor | None = None,
          checkpoint_dir: str | os.PathLike | None = None, metadata: dict | None = None) -> TrainResult:
    """Optimise a model on (N, 3, H, W) tiles in [0, 1]; deterministic for a fixed seed.

    Each epoch visits a fresh permutation of the tiles in full batches. With
    ``checkpoint_dir`` a weight file per epoch and a JSONL log are written.
    """
    tiles = np.asarray(tiles, dtype=np.float32)
    if tiles.ndim != 4 or tiles.shape[0] == 0:
        raise ValueError("training needs a nonempty (N, 3, H, W) tile array")
    rng = np.random.default_rng(config.seed)
    model = model or ModelBundle.create(codec, seed=config.seed)
    extractor = extractor or FeatureExtractor.load()
    prior_names = set(model.prior.parameters())
    opt = T.Adam([p for k, p in model.trainable().items() if k not in prior_names], lr=config.lr)
    prior_ratio = (config.prior_lr or config.lr) / config.lr
    prior_opt = T.Adam(list(model.prior.parameters().values()), lr=config.lr * prior_ratio)
    plateau = Plateau(config.lr, config.patience, config.lr_factor, config.min_lr, config.plateau_rel)
    batch = min(config.batch_size, tiles.shape[0])
    per_epoch = tiles.shape[0] // batch
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
        (ckpt / "train_log.jsonl").write_text("")

    history: list[LossBreakdown] = []
    epochs: list[EpochRecord] = []
    initial = None
    above = 0
    step = 0
    for epoch in range(config.epochs):
        psi = config.psi_at(epoch)
        order = rng.permutation(tiles.shape[0])
        epoch_hist = []
        for b in range(per_epoch):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = order[b * batch:(b + 1) * batch]
            x = tiles[idx]
            if config.augment:
                x = np.stack([augment(t, rng, config) for t in x])
            opt.zero_grad()
            prior_opt.zero_grad()
            loss, parts = loss_eg(x, model, extractor, config.lmbda, psi, rng, step=step)
            loss.backward()
            opt.step()
            prior_opt.step()
            parts = replace(parts, epoch=epoch, lr=opt.lr)
            history.append(parts)
            epoch_hist.append(parts)
            step += 1
        if not epoch_hist:
            break
        mean_loss = float(np.mean([p.total for p in epoch_hist]))
        initial = history[0].total if initial is None else initial
        record = EpochRecord(epoch, step, mean_loss, opt.lr, psi, config.lmbda,
                             history=[p.total for p in epoch_hist])
        if ckpt is not None:
            path = ckpt / f"epoch_{epoch:04d}.pwgt"
            model.save(path)
            record.checkpoint = str(path)
            with open(ckpt / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps({**asdict(record), "config": config.to_dict(), **(metadata or {})}) + "\n")
        epochs.append(record)
        log.info("epoch %d step %d loss %.6f lr %.2e psi %.2f", epoch, step, mean_loss, opt.lr, psi)
        above = above + 1 if mean_loss > config.divergence_factor * initial else 0
        if above >= config.divergence_epochs:
            raise TrainingError(
                f"diverged: epoch losses {[e.mean_loss for e in epochs[-above:]]} exceed "
                f"{config.divergence_factor}x the initial loss {initial:.6g}"
            )
        opt.lr = plateau.update(mean_loss)
        prior_opt.lr = opt.lr * prior_ratio
    return TrainResult(model, history, epochs)
