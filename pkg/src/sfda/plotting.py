"""Static figures, each written next to a CSV holding the plotted numbers."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def line_figure(stem, x, series: dict[str, list], *, xlabel="epoch", ylabel="", title="") -> tuple[Path, Path]:
    """Line plot of several series over a shared x axis.  Writes ``stem.png`` and ``stem.csv``."""
    stem = Path(stem)
    names = list(series)
    csv_path = write_csv(stem.with_suffix(".csv"), [xlabel, *names],
                         [[xv, *(series[n][i] for n in names)] for i, xv in enumerate(x)])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for n in names:
            ax.plot(x, series[n], marker="o" if len(x) < 30 else None, ms=3, label=n)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if names:
            ax.legend()
        fig.tight_layout()
        fig.savefig(stem.with_suffix(".png"))
        plt.close(fig)
    return stem.with_suffix(".png"), csv_path


def bar_figure(stem, labels: list[str], values: list[float], *, errors=None, ylabel="", title="") -> tuple[Path, Path]:
    stem = Path(stem)
    header = ["label", "value"] + (["std"] if errors is not None else [])
    rows = [[l, v] + ([errors[i]] if errors is not None else []) for i, (l, v) in enumerate(zip(labels, values))]
    csv_path = write_csv(stem.with_suffix(".csv"), header, rows)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(values)), values, yerr=errors, capsize=3, color="tab:blue", alpha=0.8)
        ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(stem.with_suffix(".png"))
        plt.close(fig)
    return stem.with_suffix(".png"), csv_path
