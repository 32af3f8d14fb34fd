"""Fully factorized latent prior and the integer CDF tables the range coder uses.

Each latent channel c has a logistic density with location ``mu_c`` and
scale ``exp(s_c)``. The probability of integer ``q`` is the density mass in
``[q - 0.5, q + 0.5)``, floored at ``P_MIN``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

P_MIN = 2.0 ** -15
PRECISION = 16
TOTAL = 1 << PRECISION
LN2 = math.log(2.0)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _dsigmoid(z):
    s = sigmoid(z)
    return s * (1.0 - s)


def bin_mass(q, mu, scale):
    """Logistic mass of [q - 0.5, q + 0.5), evaluated on the tail nearer zero for accuracy."""
    q = np.asarray(q, dtype=np.float64)
    upper = (q + 0.5 - mu) / scale
    lower = (q - 0.5 - mu) / scale
    flip = np.where(upper + lower > 0, -1.0, 1.0)
    return np.abs(sigmoid(flip * upper) - sigmoid(flip * lower))


class FactorizedPrior:
    """Per-channel logistic prior with learnable location and log-scale."""

    def __init__(self, channels: int, loc=None, log_scale=None):
        self.channels = channels
        self.loc = T.Tensor(np.zeros(channels) if loc is None else loc, requires_grad=True)
        self.log_scale = T.Tensor(np.zeros(channels) if log_scale is None else log_scale, requires_grad=True)
        if self.loc.shape != (channels,) or self.log_scale.shape != (channels,):
            raise T.ShapeError(f"prior parameters must have shape ({channels},)")

    def parameters(self) -> dict[str, T.Tensor]:
        return {"prior.loc": self.loc, "prior.log_scale": self.log_scale}

    def scale(self, channel: int) -> float:
        return float(np.exp(np.float64(self.log_scale.data[channel])))

    def pmf(self, q, channel: int, q_range: tuple[int, int] | None = None):
        """Floored bin probability of integer(s) ``q``.

        With ``q_range`` the tails outside the range are folded into its end
        symbols and the result is renormalized over the range.
        """
        if not 0 <= channel < self.channels:
            raise IndexError(f"channel {channel} outside prior with {self.channels} channels")
        mu = np.float64(self.loc.data[channel])
        sc = self.scale(channel)
        if q_range is None:
            return np.maximum(bin_mass(q, mu, sc), P_MIN)
        full = self.range_pmf(channel, *q_range)
        return full[np.asarray(q) - q_range[0]]

    def range_pmf(self, channel: int, q_min: int, q_max: int) -> np.ndarray:
        """Floored, renormalized PMF over [q_min, q_max] with tail mass folded into the ends."""
        if q_min > q_max:
            raise ValueError(f"empty symbol range [{q_min}, {q_max}]")
        mu = np.float64(self.loc.data[channel])
        sc = self.scale(channel)
        qs = np.arange(q_min, q_max + 1, dtype=np.float64)
        p = bin_mass(qs, mu, sc)
        if p.size == 1:
            p[0] = 1.0
        else:
            p[0] = sigmoid((q_min + 0.5 - mu) / sc)
            p[-1] = sigmoid(-(q_max - 0.5 - mu) / sc)
        p = np.maximum(p, P_MIN)
        return p / p.sum()


def rate_bits(latent, prior: FactorizedPrior):
    """Total -log2 P(bin) of an (N, M, H, W) latent under ``prior``.

    Accepts a Tensor (differentiable w.r.t. the latent and both prior
    parameters) or an integer/float array (plain float result).
    """
    is_tensor = isinstance(latent, T.Tensor)
    y = latent.data if is_tensor else np.asarray(latent)
    if y.ndim != 4 or y.shape[1] != prior.channels:
        raise T.ShapeError(f"latent {y.shape} does not match prior with {prior.channels} channels")
    mu = prior.loc.data.astype(np.float64)[None, :, None, None]
    sc = np.exp(prior.log_scale.data.astype(np.float64))[None, :, None, None]
    y64 = y.astype(np.float64)
    p = bin_mass(y64, mu, sc)
    p_eff = np.maximum(p, P_MIN)
    bits = float(-np.sum(np.log(p_eff)) / LN2)
    if not is_tensor:
        return bits

    def bw(g):
        zu = (y64 + 0.5 - mu) / sc
        zl = (y64 - 0.5 - mu) / sc
        du, dl = _dsigmoid(zu), _dsigmoid(zl)
        # the floor is flat, so floored bins contribute no gradient
        dbits_dp = np.where(p > P_MIN, -float(g) / (p_eff * LN2), 0.0)
        dp_dy = (du - dl) / sc
        gy = dbits_dp * dp_dy
        gmu = -gy.sum(axis=(0, 2, 3))
        gs = (dbits_dp * -(du * zu - dl * zl)).sum(axis=(0, 2, 3))
        return gy.astype(latent.dtype), gmu.astype(prior.loc.dtype), gs.astype(prior.log_scale.dtype)

    out = np.asarray(bits, dtype=latent.dtype).reshape(())
    return T.from_op(out, (latent, prior.loc, prior.log_scale), "rate_bits", bw)


def support_rate_bits(symbols, prior: FactorizedPrior, q_min, q_max) -> float:
    """-log2 of an (M, H, W) symbol grid under the prior restricted to each channel's range.

    This is the ideal code length once the per-channel ranges are known; a
    channel whose range holds one value costs nothing.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.ndim != 3 or symbols.shape[0] != prior.channels:
        raise T.ShapeError(f"symbols {symbols.shape} do not match prior with {prior.channels} channels")
    bits = 0.0
    for c in range(prior.channels):
        lo, hi = int(q_min[c]), int(q_max[c])
        p = prior.range_pmf(c, lo, hi)
        bits -= float(np.sum(np.log2(p[symbols[c] - lo])))
    return bits


@dataclass(frozen=True)
class CdfTable:
    """Cumulative 16-bit counts for one channel's symbol range [q_min, q_max]."""

    channel: int
    q_min: int
    q_max: int
    cdf: tuple  # len = symbols + 1, cdf[0] == 0, cdf[-1] == TOTAL

    def __post_init__(self):
        n = self.q_max - self.q_min + 1
        if len(self.cdf) != n + 1 or self.cdf[0] != 0 or self.cdf[-1] != TOTAL:
            raise ValueError(f"malformed CDF table for channel {self.channel}")
        if any(b <= a for a, b in zip(self.cdf, self.cdf[1:])):
            raise ValueError(f"CDF table for channel {self.channel} is not strictly increasing")

    @property
    def counts(self) -> np.ndarray:
        return np.diff(np.asarray(self.cdf, dtype=np.int64))

    def probabilities(self) -> np.ndarray:
        return self.counts / TOTAL

    @classmethod
    def from_pmf(cls, channel: int, q_min: int, pmf) -> "CdfTable":
        counts = quantize_pmf(pmf)
        cdf = np.concatenate([[0], np.cumsum(counts)])
        return cls(channel, q_min, q_min + len(counts) - 1, tuple(int(c) for c in cdf))


def quantize_pmf(pmf) -> np.ndarray:
    """Integer counts summing to 2**16, each >= 1 and within one count of pmf * 2**16.

    Counts are floored, zero counts raised to one, and the leftover is handed
    out by largest fractional part (ties to the more probable symbol). Any
    excess from the raise is taken back from the most probable symbols.
    """
    p = np.asarray(pmf, dtype=np.float64)
    n = p.size
    if n == 0 or n > TOTAL:
        raise ValueError(f"symbol range of {n} symbols is not codable with {PRECISION}-bit counts")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ValueError("pmf must be finite and nonnegative")
    p = p / p.sum()
    exact = p * TOTAL
    counts = np.maximum(np.floor(exact).astype(np.int64), 1)
    left = TOTAL - int(counts.sum())
    if left > 0:
        frac = exact - np.floor(exact)
        frac[np.floor(exact) < 1] = -1.0  # already raised to one
        order = np.lexsort((-p, -frac))
        counts[order[:left]] += 1
    while left < 0:
        i = int(np.argmax(counts))
        take = min(-left, int(counts[i]) - 1)
        counts[i] -= take
        left += take
    return counts


def build_cdf_tables(prior: FactorizedPrior, q_min, q_max) -> list[CdfTable]:
    """One table per channel covering that channel's [q_min, q_max]."""
    q_min = np.asarray(q_min, dtype=np.int64).reshape(-1)
    q_max = np.asarray(q_max, dtype=np.int64).reshape(-1)
    if q_min.size != prior.channels or q_max.size != prior.channels:
        raise ValueError(f"need {prior.channels} symbol ranges, got {q_min.size}")
    tables = []
    for c in range(prior.channels):
        lo, hi = int(q_min[c]), int(q_max[c])
        if lo > hi:
            raise ValueError(f"channel {c}: q_min {lo} > q_max {hi}")
        if hi - lo + 1 > TOTAL:
            raise ValueError(f"channel {c}: range [{lo}, {hi}] wider than {TOTAL} symbols")
        tables.append(CdfTable.from_pmf(c, lo, prior.range_pmf(c, lo, hi)))
    return tables


def table_rate_bits(symbols, channels, tables: list[CdfTable]) -> float:
    """Sum of -log2(count / 2**16) for a symbol sequence coded with ``tables``."""
    symbols = np.asarray(symbols, dtype=np.int64)
    channels = np.asarray(channels, dtype=np.int64)
    bits = 0.0
    for c in np.unique(channels):
        t = tables[int(c)]
        s = symbols[channels == c]
        if s.size and (s.min() < t.q_min or s.max() > t.q_max):
            raise ValueError(f"channel {c}: symbols outside [{t.q_min}, {t.q_max}]")
        counts = t.counts[s - t.q_min]
        bits += float(np.sum(PRECISION - np.log2(counts)))
    return bits
