#!/usr/bin/env python3
"""Plot mean relative error against iterations or wall clock from trace CSVs.

    python3 scripts/plot_traces.py out/rbk_trace.csv out/rk_trace.csv -o fig.png [--time]
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def mean_curve(path, use_time):
    by_k = defaultdict(list)
    for row in csv.DictReader(open(path)):
        x = float(row["wall_clock_s"]) if use_time else int(row["k"])
        by_k[int(row["k"])].append((x, float(row["rel_error"])))
    ks = sorted(by_k)
    xs = [sum(p[0] for p in by_k[k]) / len(by_k[k]) for k in ks]
    ys = [sum(p[1] for p in by_k[k]) / len(by_k[k]) for k in ks]
    return xs, ys


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("traces", nargs="+")
    ap.add_argument("-o", "--output", default="traces.png")
    ap.add_argument("--time", action="store_true", help="wall clock on the x axis")
    args = ap.parse_args()
    for path in args.traces:
        xs, ys = mean_curve(path, args.time)
        plt.semilogy(xs, [max(y, 1e-300) for y in ys], label=Path(path).stem.removesuffix("_trace"))
    plt.xlabel("wall clock (s)" if args.time else "iteration")
    plt.ylabel("mean relative error")
    plt.legend()
    plt.savefig(args.output, dpi=150, bbox_inches="tight")


if __name__ == "__main__":
    main()
