"""Plot the CSV written by `fbsde penalty-plot`."""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", help="penalty CSV (kind,k,x,p)")
    ap.add_argument("--out", default="penalty.png")
    args = ap.parse_args()

    df = pd.read_csv(args.csv)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k, g in df.groupby("k"):
        ax.plot(g["x"], g["p"], label=f"k = {k:g}")
    ax.set_xlabel("x")
    ax.set_ylabel("p(x)")
    ax.set_title(df["kind"].iloc[0])
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
