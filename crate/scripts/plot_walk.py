"""Plot the swing-knee angle of a multi-footstep walk (walk.csv)."""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", type=Path)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    df = pd.read_csv(args.csv)
    fig, ax = plt.subplots(figsize=(6, 3))
    for fs, g in df.groupby("footstep"):
        ax.plot(g["t"], g["knee"], label=f"footstep {fs} (member {g['member'].iloc[0]})")
    ax.axhline(0.0, color="k", ls="--", lw=1)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("swing knee angle [rad]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out or args.csv.with_suffix(".png"), dpi=150)


if __name__ == "__main__":
    main()
