"""Cost volume vs correlation volume: channels, time and memory against map side n.

    python3 scripts/bench_volumes.py --sizes 8 16 32 64 --csv bench.csv
"""
import argparse
import csv

from meshalign.cli import bench_rows, loglog_slope


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args()

    rows = bench_rows(sizes=tuple(args.sizes), repeats=args.repeats)
    for r in rows:
        print(f"n={r['n']:>3}  channels {r['cost_channels']:>6} vs {r['corr_channels']:>5} (ratio {r['ratio']:.3f})  "
              f"time {r['cost_time'] * 1e3:9.3f} ms vs {r['ccl_time'] * 1e3:9.3f} ms")
    ns = [r["n"] for r in rows]
    print(f"log-log slope: cost volume {loglog_slope(ns, [r['cost_time'] for r in rows]):.2f}, "
          f"correlation + softmax + flow {loglog_slope(ns, [r['ccl_time'] for r in rows]):.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
