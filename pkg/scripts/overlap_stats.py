"""Histogram of sampled overlap fractions for a crop size and a range of source extents.

    python3 scripts/overlap_stats.py --crop 160 --src-min 192 --src-max 256 --n 100000
"""

import argparse
import time

import numpy as np

from cva.views import SamplerConfig, overlap_fraction, sample_boxes


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--crop", type=int, default=160)
    ap.add_argument("--src-min", type=int, default=192)
    ap.add_argument("--src-max", type=int, default=256)
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--bins", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = SamplerConfig(crop_size=(args.crop,) * 3)
    rng = np.random.default_rng(args.seed)
    v_p = args.crop ** 3
    t0 = time.perf_counter()
    fr = np.empty(args.n)
    for i in range(args.n):
        src = tuple(int(d) for d in rng.integers(args.src_min, args.src_max + 1, size=3))
        fr[i] = overlap_fraction(*sample_boxes(src, cfg, rng), v_p)
    dt = time.perf_counter() - t0
    counts, edges = np.histogram(fr, bins=args.bins, range=(cfg.gamma_min, cfg.gamma_max))
    print(f"{args.n} pairs in {dt:.1f} s, min {fr.min():.5f}, max {fr.max():.5f}, mean {fr.mean():.4f}")
    for c, lo, hi in zip(counts, edges, edges[1:]):
        print(f"[{lo:.3f}, {hi:.3f})  {c:7d}  {'#' * int(60 * c / counts.max())}")


if __name__ == "__main__":
    main()
