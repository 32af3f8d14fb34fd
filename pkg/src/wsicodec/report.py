"""Rate-distortion evaluation, CSV reports and SVG plots.

Every bpp here is computed from the bytes of an actual stream. The entropy
estimate of a learned stream only enters through ``EstimateCheck``.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import metrics
from .baseline import block_decode, block_encode
from .bitstream import unpack_bitstream
from .codec import compress, decompress, estimated_bits
from .data import DataError
from .model import ModelBundle, latent_code

RD_SCHEMA_VERSION = 1
RD_COLUMNS = ("schema_version", "codec", "config", "bpp", "psnr", "ms_ssim", "lpips", "n_tiles", "source")
EXTERNAL_COLUMNS = ("codec", "config", "bpp", "psnr", "ms_ssim", "lpips")
SWEEP_COLUMNS = ("kind", "level", "metric", "mean", "std", "n")
PANELS = (("psnr", "PSNR (dB)", "↑"), ("ms_ssim", "MS-SSIM", "↑"), ("lpips", "LPIPS", "↓"))
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isinf(v) or math.isnan(v) else format(v, ".10g")
    return str(v)


@dataclass(frozen=True)
class RdPoint:
    codec: str
    config: str
    bpp: float
    psnr: float
    ms_ssim: float
    lpips: float
    n_tiles: int
    source: str = "measured"
    raw: dict | None = field(default=None, compare=False)  # imported cells, written back unchanged

    def row(self) -> dict:
        cells = {"schema_version": str(RD_SCHEMA_VERSION), "source": self.source}
        for k in ("codec", "config", "bpp", "psnr", "ms_ssim", "lpips", "n_tiles"):
            cells[k] = _fmt(getattr(self, k))
        if self.raw:
            cells.update({k: self.raw[k] for k in self.raw if k in RD_COLUMNS})
        return cells


@dataclass(frozen=True)
class TileResult:
    bpp: float
    psnr: float
    ms_ssim: float
    lpips: float
    file_bytes: int
    payload_bits: int | None = None
    estimate_bits: float | None = None


@dataclass(frozen=True)
class EstimateCheck:
    """Actual payload bits of one learned stream against the entropy-model estimate."""

    payload_bits: int
    estimate_bits: float
    rel: float = 0.05
    slack_bits: float = 64.0

    @property
    def allowed(self) -> float:
        return self.rel * self.estimate_bits + self.slack_bits

    @property
    def ok(self) -> bool:
        return abs(self.payload_bits - self.estimate_bits) <= self.allowed


# ---------------------------------------------------------------- evaluation


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _scores(tile: np.ndarray, recon: np.ndarray, extractor) -> tuple[float, float, float]:
    err = metrics.mse(tile, recon)
    return metrics.psnr_from_mse(err, 1.0), metrics.ms_ssim(tile, recon, 1.0), metrics.lpips(tile, recon, extractor)


def _on_grid(image: np.ndarray) -> np.ndarray:
    """The 8-bit image a decoder would write to disk, as floats."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5) / 255.0


def learned_tile(tile: np.ndarray, model: ModelBundle, extractor) -> TileResult:
    blob = compress(tile[None], model)
    recon = _on_grid(decompress(blob, model).data[0])
    psnr, msssim, lp = _scores(tile, recon, extractor)
    h, w = tile.shape[1:]
    payload = 8 * len(unpack_bitstream(blob).payload)
    est = estimated_bits(latent_code(tile[None], model), model)
    return TileResult(8.0 * len(blob) / (h * w), psnr, msssim, lp, len(blob), payload, est)


def baseline_tile(tile: np.ndarray, quality: int, extractor) -> TileResult:
    blob = block_encode(tile, quality)
    recon = block_decode(blob)
    psnr, msssim, lp = _scores(tile, recon, extractor)
    h, w = tile.shape[1:]
    return TileResult(8.0 * len(blob) / (h * w), psnr, msssim, lp, len(blob))


def aggregate(codec: str, config: str, results: list[TileResult]) -> RdPoint:
    if not results:
        raise DataError("no tiles evaluated")
    mean = lambda k: float(np.mean([getattr(r, k) for r in results]))  # noqa: E731
    return RdPoint(codec, config, mean("bpp"), mean("psnr"), mean("ms_ssim"), mean("lpips"), len(results))


def evaluate_learned(tiles, model: ModelBundle, extractor, label: str = "learned", config: str = "",
                     threads: int = 1) -> tuple[RdPoint, list[TileResult]]:
    tiles = [np.asarray(t, dtype=np.float32) for t in tiles]
    results = _map(lambda t: learned_tile(t, model, extractor), tiles, threads)
    return aggregate(label, config, results), results


def evaluate_baseline(tiles, quality: int, extractor, label: str = "block-dct",
                      threads: int = 1) -> tuple[RdPoint, list[TileResult]]:
    tiles = [np.asarray(t, dtype=np.float64) for t in tiles]
    results = _map(lambda t: baseline_tile(t, quality, extractor), tiles, threads)
    return aggregate(label, f"q={quality}", results), results


def estimate_checks(results: list[TileResult], rel: float = 0.05, slack_bits: float = 64.0) -> list[EstimateCheck]:
    return [EstimateCheck(r.payload_bits, r.estimate_bits, rel, slack_bits)
            for r in results if r.payload_bits is not None]


# ---------------------------------------------------------------- CSV


def write_rd_csv(points, path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RD_COLUMNS, lineterminator="\n")
    w.writeheader()
    for p in points:
        w.writerow(p.row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _float(cell: str, what: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{what}: {cell!r} is not a number") from None


def read_rd_csv(path: str | os.PathLike) -> list[RdPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RD_COLUMNS:
            raise DataError(f"{path}: columns {reader.fieldnames} are not the RD schema {RD_COLUMNS}")
        points = []
        for row in reader:
            if row["schema_version"] != str(RD_SCHEMA_VERSION):
                raise DataError(f"{path}: schema version {row['schema_version']} is not {RD_SCHEMA_VERSION}")
            points.append(RdPoint(row["codec"], row["config"], *(_float(row[k], k) for k in
                                  ("bpp", "psnr", "ms_ssim", "lpips")), int(row["n_tiles"] or 0), row["source"]))
    return points


def read_external_csv(path: str | os.PathLike, n_tiles: int | None = None) -> list[RdPoint]:
    """Import third-party codec results; an ``n_tiles`` column, if present, must match the corpus."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        missing = [c for c in EXTERNAL_COLUMNS if c not in cols]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        points = []
        for row in reader:
            count = row.get("n_tiles") or ""
            if count and n_tiles is not None and int(count) != n_tiles:
                raise DataError(f"{path}: row {row['codec']} {row['config']} was measured on {count} tiles, "
                                f"not the {n_tiles} evaluated here")
            raw = {k: row[k] for k in EXTERNAL_COLUMNS}
            raw["n_tiles"] = count  # left blank when the source did not say
            points.append(RdPoint(row["codec"], row["config"], *(_float(row[k], k) for k in
                                  ("bpp", "psnr", "ms_ssim", "lpips")), int(count) if count else 0,
                                  "external", raw))
    return points


def write_sweep_csv(rows, path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.kind, _fmt(r.level), r.metric, _fmt(r.mean), _fmt(r.std), r.n])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------- SVG


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    return list(np.linspace(lo, hi, count))


def _range(values) -> tuple[float, float]:
    v = [x for x in values if math.isfinite(x)]
    if not v:
        return 0.0, 1.0
    lo, hi = min(v), max(v)
    pad = 0.05 * (hi - lo) if hi > lo else max(abs(lo) * 0.05, 0.5)
    return lo - pad, hi + pad


def rd_svg(points, marker_bpp: float | None = None, width: int = 960, height: int = 320) -> str:
    """Three side-by-side panels (PSNR, MS-SSIM, LPIPS against bpp), one polyline per codec in each."""
    points = list(points)
    codecs = sorted({p.codec for p in points})
    colors = {c: COLORS[i % len(COLORS)] for i, c in enumerate(codecs)}
    xs = [p.bpp for p in points] + ([marker_bpp] if marker_bpp is not None else [])
    x_lo, x_hi = _range(xs)
    pw, ph = width / 3, height
    left, right, top, bottom = 55, 10, 30, 45
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 24}" '
           f'font-family="sans-serif" font-size="11">']
    for i, (key, title, arrow) in enumerate(PANELS):
        y_lo, y_hi = _range([getattr(p, key) for p in points])
        ox = i * pw
        iw, ih = pw - left - right, ph - top - bottom

        def sx(v):
            return ox + left + (v - x_lo) / (x_hi - x_lo) * iw

        def sy(v):
            return top + (1 - (v - y_lo) / (y_hi - y_lo)) * ih

        out.append(f'<g class="panel" data-metric="{key}">')
        out.append(f'<text x="{ox + left + iw / 2:.1f}" y="18" text-anchor="middle">{escape(title)} {arrow}</text>')
        out.append(f'<rect x="{ox + left:.1f}" y="{top}" width="{iw:.1f}" height="{ih:.1f}" fill="none" stroke="#000"/>')
        for t in _ticks(x_lo, x_hi):
            out.append(f'<text x="{sx(t):.1f}" y="{top + ih + 14:.1f}" text-anchor="middle">{t:.3g}</text>')
        for t in _ticks(y_lo, y_hi):
            out.append(f'<text x="{ox + left - 4:.1f}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.4g}</text>')
        out.append(f'<text x="{ox + left + iw / 2:.1f}" y="{top + ih + 32:.1f}" text-anchor="middle">bpp</text>')
        for c in codecs:
            pts = sorted((p.bpp, getattr(p, key)) for p in points if p.codec == c)
            pts = [(a, b) for a, b in pts if math.isfinite(b)]
            coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in pts)
            out.append(f'<polyline class="curve" data-codec="{escape(c)}" points="{coords}" fill="none" '
                       f'stroke="{colors[c]}" stroke-width="1.5"/>')
            for a, b in pts:
                out.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{colors[c]}"/>')
        if marker_bpp is not None:
            out.append(f'<circle class="reference-marker" cx="{sx(marker_bpp):.2f}" cy="{top + ih:.2f}" r="4" '
                       f'fill="red"/>')
        out.append("</g>")
    for j, c in enumerate(codecs):
        x = 10 + j * 140
        out.append(f'<rect x="{x}" y="{height + 8}" width="10" height="10" fill="{colors[c]}"/>'
                   f'<text x="{x + 14}" y="{height + 17}">{escape(c)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
