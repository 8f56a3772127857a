"""Tables and figures derived from run-summary documents.

Only this module touches matplotlib, and only when figures are requested.
"""
from __future__ import annotations

import csv
import os

COLUMNS = ["source", "kind", "instance", "seed", "J", "Jstar", "gap", "endogenous", "episodes", "maxDeficiency"]


def summary_row(source, doc):
    deficiency = doc.get("deficiency") or {}
    J, Jstar = doc.get("J"), doc.get("Jstar")
    return {
        "source": source,
        "kind": doc.get("kind", ""),
        "instance": doc.get("instance", ""),
        "seed": doc.get("seed", ""),
        "J": J,
        "Jstar": Jstar,
        "gap": Jstar - J if J is not None and Jstar is not None else "",
        "endogenous": doc.get("endogenous", ""),
        "episodes": doc.get("totalEpisodes", ""),
        "maxDeficiency": max(deficiency.values()) if deficiency else "",
    }


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def render_figures(docs, out_dir):
    """Value gap per run and cover deficiency per layer. Returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    labels = [name for name, _ in docs]
    gaps = [doc["Jstar"] - doc["J"] for _, doc in docs if doc.get("J") is not None and doc.get("Jstar") is not None]
    if gaps:
        fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(gaps) + 2), 3))
        ax.bar(range(len(gaps)), gaps, color="0.4")
        ax.set_xticks(range(len(gaps)))
        ax.set_xticklabels(labels[: len(gaps)], rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("J* - J")
        ax.axhline(0, color="k", lw=0.5)
        fig.tight_layout()
        path = os.path.join(out_dir, "value_gap.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    layered = [(name, doc["deficiency"]) for name, doc in docs if doc.get("deficiency")]
    if layered:
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for name, deficiency in layered:
            layers = sorted(deficiency, key=int)
            ax.plot([int(h) for h in layers], [deficiency[h] for h in layers], marker="o", lw=1, alpha=0.7)
        ax.set_xlabel("layer h")
        ax.set_ylabel("cover deficiency")
        fig.tight_layout()
        path = os.path.join(out_dir, "deficiency.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
