"""Command-line entry point.

Exit codes: 0 success, 1 failed estimate cross-check, 2 usage error,
3 bad input data (including split leakage and model mismatch), 4 corrupt or
unsupported stream.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import report
from .codec import compress, decompress
from .data import (
    DataError,
    LeakageError,
    check_no_leakage,
    load_image,
    load_tiles,
    read_manifest,
    read_tileset,
    save_image,
    scan_images,
    split_slides,
    write_manifest,
    write_tileset,
)
from .distortions import KINDS, DistortionSpec, distortion_sweep
from .metrics import FeatureExtractor, quality_report
from .model import CodecConfig, FingerprintMismatch, ModelBundle
from .rangecoder import BitstreamError
from .training import TrainConfig, train
from .weights import WeightFileError

log = logging.getLogger("wsicodec")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA, EXIT_STREAM = 0, 1, 2, 3, 4
DEFAULT_QUALITIES = (10, 30, 50, 70, 90)


class UsageError(Exception):
    pass


def sidecar_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.name + ".json")


def read_sidecar(model_path) -> dict:
    p = sidecar_path(model_path)
    return json.loads(p.read_text()) if p.exists() else {}


def load_config(path) -> dict:
    """A JSON file with optional "train" and "codec" sections mirroring the config dataclasses."""
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"train", "codec"}
    if unknown:
        raise UsageError(f"config sections must be 'train' and 'codec', got {sorted(unknown)}")
    return cfg


# ---------------------------------------------------------------- commands


def cmd_tile(args) -> int:
    records = scan_images(args.input, args.tile_size, args.stride)
    if not records:
        raise DataError(f"{args.input}: no PNG/PPM images at least {args.tile_size} px on each side")
    write_manifest(records, args.out)
    print(f"{len(records)} slides, {sum(len(r.tiles) for r in records)} tiles -> {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    train_set, test_set = split_slides(read_manifest(args.manifest), args.test_fraction, args.seed or 0)
    check_no_leakage(train_set, test_set)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tileset(train_set, out / "train.jsonl")
    write_tileset(test_set, out / "test.jsonl")
    print(f"train {len(train_set.slide_ids)} slides / {len(train_set)} tiles, "
          f"test {len(test_set.slide_ids)} slides / {len(test_set)} tiles")
    return EXIT_OK


def _train_config(args, cfg: dict) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    if args.seed is not None:
        d["seed"] = args.seed
    if args.no_augment:
        d["augment"] = False
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _codec_config(args, cfg: dict) -> CodecConfig:
    d = dict(cfg.get("codec", {}))
    for name in ("latent_channels", "hidden_channels", "stages"):
        v = getattr(args, name)
        if v is not None:
            d[name] = v
    try:
        return CodecConfig(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tconf, cconf = _train_config(args, cfg), _codec_config(args, cfg)
    tileset = read_tileset(args.tiles)
    if tileset.split == "test":
        raise LeakageError(f"{args.tiles} is a test split; refusing to train on it")
    tiles = load_tiles(tileset.tiles, args.limit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"train_slides": sorted(tileset.slide_ids)}
    result = train(tiles, tconf, codec=cconf, checkpoint_dir=out / "checkpoints", metadata=meta)
    model_path = out / "model.pwgt"
    result.model.save(model_path)
    sidecar_path(model_path).write_text(json.dumps(
        {"codec": cconf.to_dict(), "train": tconf.to_dict(), **meta,
         "fingerprint": result.model.fingerprint.hex(), "steps": len(result.history)}, indent=1))
    last = result.history[-1]
    print(f"{len(result.history)} steps, final loss {last.total:.6g} (rate {last.rate_bpp:.4g} bpp, "
          f"mse {last.mse:.4g}, feature {last.feature:.4g}) -> {model_path}")
    return EXIT_OK


def cmd_compress(args) -> int:
    model = ModelBundle.load(args.model)
    image = load_image(args.input)
    blob = compress(image, model)
    Path(args.output).write_bytes(blob)
    h, w = image.shape[2:]
    print(f"{len(blob)} bytes, {8.0 * len(blob) / (h * w):.6f} bpp")
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = ModelBundle.load(args.model)
    blob = Path(args.input).read_bytes()
    image = decompress(blob, model)
    save_image(image.data, args.output)
    h, w = image.shape[2:]
    print(f"{h}x{w}, {8.0 * len(blob) / (h * w):.6f} bpp")
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = load_image(args.image_a), load_image(args.image_b)
    if a.shape != b.shape:
        raise DataError(f"image sizes differ: {a.shape[2:]} vs {b.shape[2:]}")
    rep = quality_report(a, b, FeatureExtractor.load(args.extractor), max_val=1.0)
    for k, v in rep.to_dict().items():
        if k != "bpp":
            print(f"{k} {v!r}")
    return EXIT_OK


def cmd_distort(args) -> int:
    try:
        spec = DistortionSpec(args.kind, args.level)
    except ValueError as e:
        raise UsageError(str(e)) from None
    save_image(spec.apply(load_image(args.input)[0]), args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    tiles = load_tiles(read_tileset(args.tiles).tiles, args.n)
    rows = distortion_sweep(list(tiles), FeatureExtractor.load(args.extractor), kinds=tuple(args.kinds))
    report.write_sweep_csv(rows, args.out)
    print(f"{len(rows)} rows over {len(tiles)} images -> {args.out}")
    return EXIT_OK


def _model_label(path, meta: dict) -> tuple[str, str]:
    lmbda = meta.get("train", {}).get("lmbda")
    return "learned", (f"lambda={lmbda:g}" if lmbda is not None else Path(path).stem)


def cmd_rd_curve(args) -> int:
    if not args.model and not args.quality and not args.external:
        raise UsageError("rd-curve needs at least one of --model, --quality, --external")
    test_set = read_tileset(args.tiles)
    if args.train:
        check_no_leakage(read_tileset(args.train), test_set)
    metas = [read_sidecar(m) for m in args.model]
    for path, meta in zip(args.model, metas):
        seen = set(meta.get("train_slides", ())) & test_set.slide_ids
        if seen:
            raise LeakageError(f"model {path} was trained on test slides {sorted(seen)}")
    tiles = load_tiles(test_set.tiles, args.limit)
    extractor = FeatureExtractor.load(args.extractor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    points, checks = [], []
    for path, meta in zip(args.model, metas):
        codec, config = _model_label(path, meta)
        point, results = report.evaluate_learned(tiles, ModelBundle.load(path), extractor, codec, config, args.threads)
        points.append(point)
        checks += [(config, i, c) for i, c in enumerate(report.estimate_checks(results))]
    for q in args.quality:
        points.append(report.evaluate_baseline(tiles, q, extractor, threads=args.threads)[0])
    if args.external:
        points += report.read_external_csv(args.external, len(tiles))
    report.write_rd_csv(points, out / "rd.csv")
    (out / "rd.svg").write_text(report.rd_svg(points, args.marker_bpp))
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("config", "tile", "payload_bits", "estimate_bits", "allowed_bits", "ok"))
        for config, i, c in checks:
            w.writerow((config, i, c.payload_bits, f"{c.estimate_bits:.3f}", f"{c.allowed:.3f}", int(c.ok)))
    for p in points:
        print(f"{p.codec:12s} {p.config:16s} bpp {p.bpp:.4f} psnr {p.psnr:.3f} "
              f"ms_ssim {p.ms_ssim:.5f} lpips {p.lpips:.5f} n {p.n_tiles}")
    bad = [c for c in checks if not c[2].ok]
    if checks:
        print(f"estimate cross-check: {len(checks) - len(bad)}/{len(checks)} streams within 5% + 64 bits")
    return EXIT_CHECK if bad else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wsicodec", description="Learned tile codec and RD benchmark")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1, help="worker threads for tile evaluation")
    p.add_argument("--config", default=None, help="JSON file with 'train' and 'codec' sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tile", help="index the tiles of a directory of images")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--tile-size", type=int, default=224)
    s.add_argument("--stride", type=int, default=None)
    s.set_defaults(fn=cmd_tile)

    s = sub.add_parser("split", help="slide-level train/test split of a manifest")
    s.add_argument("manifest")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.set_defaults(fn=cmd_split)

    s = sub.add_parser("train", help="train a model on a tile set")
    s.add_argument("tiles")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=None, help="use only the first N tiles")
    for f in fields(TrainConfig):
        if f.type in ("float", "int", "int | None", "float | None") and f.name != "seed":
            kind = float if f.type.startswith("float") else int
            s.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)
    s.add_argument("--no-augment", action="store_true")
    for name in ("latent_channels", "hidden_channels", "stages"):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=int, default=None)
    s.set_defaults(fn=cmd_train)

    for name, fn, what in (("compress", cmd_compress, "image to stream"),
                           ("decompress", cmd_decompress, "stream to image")):
        s = sub.add_parser(name, help=what)
        s.add_argument("input")
        s.add_argument("--model", required=True)
        s.add_argument("--output", "-o", required=True)
        s.set_defaults(fn=fn)

    s = sub.add_parser("metrics", help="quality metrics between two images")
    s.add_argument("image_a")
    s.add_argument("image_b")
    s.add_argument("--extractor", default=None)
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("distort", help="apply one controlled distortion")
    s.add_argument("input")
    s.add_argument("--kind", choices=sorted(KINDS), required=True)
    s.add_argument("--level", type=float, required=True)
    s.add_argument("--output", "-o", required=True)
    s.set_defaults(fn=cmd_distort)

    s = sub.add_parser("sweep", help="metric responses to distortion levels")
    s.add_argument("tiles")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--kinds", nargs="+", choices=sorted(KINDS), default=["color_shift", "blocking"])
    s.add_argument("--extractor", default=None)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("rd-curve", help="rate-distortion points, CSV and SVG")
    s.add_argument("tiles", help="test tile set")
    s.add_argument("--out", required=True)
    s.add_argument("--model", action="append", default=[])
    s.add_argument("--quality", type=int, nargs="*", default=None)
    s.add_argument("--baseline", action="store_true", help=f"add the baseline at qualities {DEFAULT_QUALITIES}")
    s.add_argument("--external", default=None, help="CSV of codec,config,bpp,psnr,ms_ssim,lpips")
    s.add_argument("--train", default=None, help="training tile set, checked for slide leakage")
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--marker-bpp", type=float, default=None)
    s.add_argument("--extractor", default=None)
    s.set_defaults(fn=cmd_rd_curve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.command == "rd-curve":
        qs = list(args.quality or [])
        if args.baseline:
            qs += [q for q in DEFAULT_QUALITIES if q not in qs]
        args.quality = qs
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"wsicodec: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BitstreamError as e:
        print(f"wsicodec: corrupt stream: {e}", file=sys.stderr)
        return EXIT_STREAM
    except (DataError, LeakageError, FingerprintMismatch, WeightFileError, FileNotFoundError, ValueError) as e:
        print(f"wsicodec: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
