"""Recompute both ranking schemes from the embedded metric tables and compare with the published ranks."""

import argparse
import warnings

from cva import ranking as R

SCHEMES = {"raw": ("raw", R.raw_rank), "range": ("range-weighted", R.range_weighted_score)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tables", nargs="+", choices=sorted(SCHEMES), default=sorted(SCHEMES))
    args = ap.parse_args()
    for table in args.tables:
        label, scheme = SCHEMES[table]
        for track in R.TRACKS:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", R.ZeroRangeWarning)
                rep = scheme(R.load_fixture(table, track))
            pub = R.load_published(table, track)
            print(f"\n{label} ranking, {track}")
            print(f"{'model':24s} {'avg':>6s} {'pub':>6s} {'seg':>6s} {'pub':>6s} {'cls':>6s} {'pub':>6s}")
            for model in rep.order():
                got, ref = rep.row(model), pub[model]
                print(f"{model:24s} " + " ".join(f"{got[k]:6.2f} {ref[k]:6.2f}" for k in ("avg", "seg", "cls")))


if __name__ == "__main__":
    main()
