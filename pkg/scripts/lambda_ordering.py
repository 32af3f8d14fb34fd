"""Train two models that differ only in the rate weight and compare their file sizes on held-out tiles."""

import argparse
import time

import numpy as np

from wsicodec.codec import compress, estimated_bits
from wsicodec.bitstream import unpack_bitstream
from wsicodec.data import synthetic_tissue
from wsicodec.model import latent_code
from wsicodec.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.003, 0.03])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--train-tiles", type=int, default=64)
    ap.add_argument("--held-out", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    s = args.size
    tiles = np.stack([synthetic_tissue(i, s, s) for i in range(args.train_tiles)]).astype(np.float32)
    held = [synthetic_tissue(1000 + i, s, s)[None].astype(np.float32) for i in range(args.held_out)]
    for lmbda in args.lambdas:
        t0 = time.perf_counter()
        cfg = TrainConfig(lmbda=lmbda, lr=args.lr, max_steps=args.steps, seed=args.seed)
        model = train(tiles, cfg).model
        blobs = [compress(x, model) for x in held]
        payload = np.mean([8 * len(unpack_bitstream(b).payload) for b in blobs])
        est = np.mean([estimated_bits(latent_code(x, model), model) for x in held])
        bpp = np.mean([8 * len(b) / (s * s) for b in blobs])
        print(f"lambda {lmbda:g}: file bpp {bpp:.5f}, payload {payload:.1f} bits/tile "
              f"(estimate {est:.1f}), {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
