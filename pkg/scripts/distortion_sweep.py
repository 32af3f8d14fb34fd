"""Metric responses to a colour bias and to blocking artifacts, averaged over sample images.

Uses PNG/PPM images from --images (224 px centre crops) or synthetic tissue tiles.
"""

import argparse
from pathlib import Path

from wsicodec.data import load_image, synthetic_tissue
from wsicodec.distortions import distortion_sweep
from wsicodec.metrics import FeatureExtractor
from wsicodec.report import write_sweep_csv


def centre_crop(img, size):
    _, h, w = img.shape
    y, x = (h - size) // 2, (w - size) // 2
    return img[:, y:y + size, x:x + size]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--images", type=Path, default=None)
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("sweep.csv"))
    args = ap.parse_args()

    if args.images:
        paths = sorted(p for p in args.images.iterdir() if p.suffix.lower() in (".png", ".ppm"))[:args.n]
        images = [centre_crop(load_image(p)[0], args.size) for p in paths]
    else:
        images = [synthetic_tissue(args.seed + i, args.size, args.size) for i in range(args.n)]
    rows = distortion_sweep(images, FeatureExtractor.load())
    write_sweep_csv(rows, args.out)
    for kind in ("color_shift", "blocking"):
        for metric in ("mse", "one_minus_ms_ssim", "lpips"):
            pts = [(r.level, r.mean) for r in rows if r.kind == kind and r.metric == metric]
            print(f"{kind:12s} {metric:18s}", "  ".join(f"{lv:g}:{m:.4g}" for lv, m in pts))
    print(f"{len(rows)} rows over {len(images)} images -> {args.out}")


if __name__ == "__main__":
    main()
