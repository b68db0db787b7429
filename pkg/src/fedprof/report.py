"""Static figures and tabular artifacts written next to the traces."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable SVG ids and no timestamp, so identical runs give identical figures
plt.rcParams["svg.hashsalt"] = "fedprof"
SVG_META = {"Date": None}

KIND_LABELS = {
    "clean": "N",
    "irrelevant": "R",
    "blur": "B",
    "salt_pepper": "P",
    "polluted": "X",
    "gaussian": "G",
}
KIND_COLORS = {
    "clean": "#4c72b0",
    "irrelevant": "#c44e52",
    "blur": "#dd8452",
    "salt_pepper": "#8172b3",
    "polluted": "#937860",
    "gaussian": "#55a868",
}


def selection_counts(traces, n_clients: int, after_round: int = 0) -> np.ndarray:
    counts = np.zeros(n_clients, dtype=int)
    for t in traces:
        if t.round > after_round:
            for cid in t.selected:
                counts[cid] += 1
    return counts


def emit_selection_histogram(traces, kinds: Sequence[str], csv_path, svg_path=None,
                             title: str = "") -> np.ndarray:
    """Write per-client participation counts (with noise-kind annotation) to CSV and SVG."""
    if not traces:
        raise ValueError("need at least one completed round")
    counts = selection_counts(traces, len(kinds))
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "noise_kind", "label", "count"])
        for cid, (kind, n) in enumerate(zip(kinds, counts)):
            w.writerow([cid, kind, KIND_LABELS.get(kind, "?"), int(n)])
    if svg_path is not None:
        plot_selection_histogram(counts, kinds, svg_path, title)
    return counts


def plot_selection_histogram(counts, kinds, path, title=""):
    # clients ordered by data quality, as in the participation-count figures
    rank = {k: i for i, k in enumerate(KIND_LABELS)}
    order = sorted(range(len(kinds)), key=lambda c: (rank.get(kinds[c], 99), c))
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(range(len(order)), [counts[c] for c in order],
           color=[KIND_COLORS.get(kinds[c], "grey") for c in order], width=0.85)
    handles = [plt.Rectangle((0, 0), 1, 1, color=KIND_COLORS[k]) for k in KIND_LABELS
               if k in set(kinds)]
    labels = [f"{KIND_LABELS[k]} ({k})" for k in KIND_LABELS if k in set(kinds)]
    ax.legend(handles, labels, fontsize=7, frameon=False, ncol=3)
    ax.set_xlabel("client (sorted by data quality)")
    ax.set_ylabel("times selected")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def plot_accuracy(curves: Mapping[str, Sequence], path, metric="accuracy", target=None):
    """``curves`` maps a strategy name to per-seed lists of traces."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, seeds in curves.items():
        runs = [[t.accuracy for t in traces] for traces in seeds if traces]
        if not runs:
            continue
        length = min(len(r) for r in runs)
        arr = np.array([r[:length] for r in runs])
        x = np.arange(1, length + 1)
        mean = arr.mean(axis=0)
        line, = ax.plot(x, mean, lw=1.2, label=name)
        if arr.shape[0] > 1:
            ax.fill_between(x, arr.min(axis=0), arr.max(axis=0), color=line.get_color(), alpha=0.15)
    if target is not None:
        ax.axhline(target, color="k", ls=":", lw=0.8)
    ax.set_xlabel("round")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def plot_convergence(steps, errors, gamma, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = np.asarray(steps, dtype=float)
    ax.loglog(steps, errors, lw=1.2, label="mean F(θ) − F*")
    ref = errors[0] * (gamma + steps[0]) / (gamma + steps)
    ax.loglog(steps, ref, ls="--", lw=0.9, color="k", label="∝ 1/(γ+t)")
    ax.set_xlabel("step t")
    ax.set_ylabel("optimality gap")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def write_trace_csv(path, traces):
    from .federation import TRACE_HEADER, trace_rows

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(trace_rows(traces))


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
