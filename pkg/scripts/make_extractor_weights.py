"""Regenerate the packaged default feature-extractor weight file."""

import argparse
from pathlib import Path

from wsicodec import weights
from wsicodec.metrics import DEFAULT_EXTRACTOR, extractor_parameters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path,
                    default=Path(__file__).resolve().parents[1] / "src" / "wsicodec" / "data" / DEFAULT_EXTRACTOR)
    args = ap.parse_args()
    data = weights.save(args.out, extractor_parameters(args.seed))
    print(f"wrote {args.out} ({len(data)} bytes, hash {weights.file_hash(data).hex()})")


if __name__ == "__main__":
    main()
