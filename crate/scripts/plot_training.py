"""Plot the training log and penalty steepness of one or more runs."""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("logs", nargs="+", type=Path, help="train_log.jsonl files")
    ap.add_argument("--out", default="training.png")
    args = ap.parse_args()

    fig, (a, b, c) = plt.subplots(3, 1, figsize=(6, 7), sharex=True)
    for path in args.logs:
        df = pd.read_json(path, lines=True)
        label = path.parent.name
        a.semilogy(df["iteration"], df["loss"], lw=0.8, label=label)
        b.plot(df["iteration"], df["mean_episode_cost"], lw=0.8, label=label)
        c.plot(df["iteration"], df["k"], lw=1.2, label=label)
    a.set_ylabel("loss")
    b.set_ylabel("episode cost")
    c.set_ylabel("k")
    c.set_xlabel("iteration")
    a.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
