"""Deterministic result plotting (reconstruction MSE versus client accuracy)."""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

REQUIRED_COLUMNS = ("defense", "recon_mse_norm", "client_acc", "hyperparameter")

_MARKERS = ["o", "s", "^", "D", "v", "P", "X", "*"]


class PlotError(ValueError):
    pass


def _read_rows(csv_paths) -> list:
    rows = []
    for path in csv_paths:
        if not os.path.isfile(path):
            raise PlotError(f"missing CSV: {path}")
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            for col in REQUIRED_COLUMNS:
                if col not in header:
                    raise PlotError(f"{path}: missing column {col!r}")
            rows.extend(reader)
    if not rows:
        raise PlotError("no data rows in the given CSVs")
    return rows


def plot_mse_vs_accuracy(csv_paths, out_path) -> int:
    """Scatter of reconstruction MSE against client accuracy, one series
    per defense. Rendering is pinned (fixed hash salt, no date metadata)
    so identical inputs produce byte-identical SVG files.

    Returns the number of plotted series.
    """
    rows = _read_rows(csv_paths)
    series = {}
    for row in rows:
        try:
            x = float(row["recon_mse_norm"])
            y = float(row["client_acc"])
        except ValueError as e:
            raise PlotError(f"non-numeric metric value: {e}") from e
        series.setdefault(row["defense"], []).append((x, y))

    plt.rcParams["svg.hashsalt"] = "fedshield"
    fig, ax = plt.subplots(figsize=(5.0, 3.75))
    for idx, name in enumerate(sorted(series)):
        pts = sorted(series[name])
        ax.scatter([p[0] for p in pts], [p[1] for p in pts],
                   label=name, marker=_MARKERS[idx % len(_MARKERS)], s=36)
    ax.set_xlabel("Reconstruction MSE (normalized)")
    ax.set_ylabel("Client accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return len(series)
