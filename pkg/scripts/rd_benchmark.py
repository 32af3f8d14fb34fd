"""Full benchmark through the command line: tile, split, train one model per rate weight, RD curve.

Without --images a synthetic tissue corpus is written first.
"""

import argparse
import sys
from pathlib import Path

from wsicodec.cli import main as cli
from wsicodec.data import write_synthetic_corpus


def run(*argv):
    code = cli([str(a) for a in argv])
    if code:
        sys.exit(f"wsicodec {' '.join(str(a) for a in argv)} failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--images", type=Path, default=None)
    ap.add_argument("--work", type=Path, default=Path("rd_run"))
    ap.add_argument("--slides", type=int, default=10)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.003, 0.03])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--marker-bpp", type=float, default=None)
    ap.add_argument("--external", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = args.work
    images = args.images
    if images is None:
        images = work / "slides"
        write_synthetic_corpus(images, args.slides, 460, 460, seed=args.seed)
    run("tile", images, "--out", work / "manifest.jsonl")
    run("--seed", args.seed, "split", work / "manifest.jsonl", "--out-dir", work / "split")
    models = []
    for lmbda in args.lambdas:
        out = work / f"model_lambda{lmbda:g}"
        run("--seed", args.seed, "train", work / "split" / "train.jsonl", "--out", out,
            "--lmbda", lmbda, "--lr", args.lr, "--max-steps", args.steps)
        models += ["--model", out / "model.pwgt"]
    extra = ["--external", args.external] if args.external else []
    extra += ["--marker-bpp", args.marker_bpp] if args.marker_bpp is not None else []
    run("rd-curve", work / "split" / "test.jsonl", "--out", work / "rd", *models, "--baseline",
        "--train", work / "split" / "train.jsonl", *extra)
    print(f"report in {work / 'rd'}")


if __name__ == "__main__":
    main()
