"""Plot state trajectories from `fbsde eval` (trajectories.csv)."""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def component_bounds(config: Path) -> dict:
    """Single-component constraints from a resolved config, keyed by column."""
    cfg = json.loads(config.read_text())
    out = {}
    for c in cfg["penalty"]["constraints"]:
        if len(c["terms"]) == 1 and c["terms"][0][1] == 1.0:
            out[f"x{c['terms'][0][0] + 1}"] = (c.get("min"), c.get("max"))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path, help="directory holding trajectories.csv")
    ap.add_argument("--states", default=None, help="comma-separated columns, default all x*")
    ap.add_argument("--max-trials", type=int, default=64)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    df = pd.read_csv(args.run_dir / "trajectories.csv")
    cols = args.states.split(",") if args.states else [c for c in df.columns if c.startswith("x")]
    snapshot = args.run_dir / "config.resolved.json"
    bounds = component_bounds(snapshot) if snapshot.exists() else {}
    trials = df["trial"].unique()[: args.max_trials]

    fig, axes = plt.subplots(len(cols), 1, figsize=(6, 2 * len(cols)), sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], cols):
        for t in trials:
            g = df[df["trial"] == t]
            ax.plot(g["t"], g[col], lw=0.6, alpha=0.5, color="tab:blue")
        for b in bounds.get(col, (None, None)):
            if b is not None:
                ax.axhline(b, color="k", ls="--", lw=1)
        ax.set_ylabel(col)
    axes[-1, 0].set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(args.out or args.run_dir / "trajectories.png", dpi=150)


if __name__ == "__main__":
    main()
