"""Static SVG charts of run artifacts

matplotlib is an optional dependency (``biascite[plot]``); it is only imported when a chart
is requested.
"""
from pathlib import Path
from typing import Sequence
from typing import Tuple

from biascite.errors import BiasCiteError
from biascite.metrics import EvalReport


__all__ = ["PlottingUnavailable", "plot_history", "plot_report", "plot_sweep"]


class PlottingUnavailable(BiasCiteError, RuntimeError):
    """matplotlib is not installed"""


def _pyplot():
    try:
        import matplotlib  # pylint: disable=import-outside-toplevel
    except ImportError as err:
        raise PlottingUnavailable("charts need matplotlib; install the 'plot' extra") from err
    matplotlib.use("Agg")
    matplotlib.rcParams.update({"font.family": "DejaVu Sans", "axes.unicode_minus": False, "svg.hashsalt": "biascite"})
    import matplotlib.pyplot as plt  # pylint: disable=import-outside-toplevel

    return plt


def _save(plt, fig, path: Path) -> Path:
    # no creation date, so reruns write identical files
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_history(epochs: Sequence[int], train: Sequence[float], val: Sequence[float], path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.6), constrained_layout=True)
    ax.plot(epochs, train, label="train total")
    ax.plot(epochs, val, label="validation")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    return _save(plt, fig, path)


def plot_report(report: EvalReport, path: Path) -> Path:
    """Bar chart of MALE and RMSLE overall and per environment"""
    plt = _pyplot()
    rows = [row for row in report.rows() if row[1] == "all"]
    labels = [row[0] for row in rows]
    positions = list(range(len(rows)))
    fig, ax = plt.subplots(figsize=(6, 3.6), constrained_layout=True)
    ax.bar([item - 0.2 for item in positions], [row[2] for row in rows], width=0.4, label="MALE")
    ax.bar([item + 0.2 for item in positions], [row[3] for row in rows], width=0.4, label="RMSLE")
    ax.set_xticks(positions)
    ax.set_xticklabels(labels)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    return _save(plt, fig, path)


def plot_sweep(param: str, points: Sequence[Tuple[float, float, float]], path: Path) -> Path:
    """MALE and RMSLE against the swept loss weight

    :param points: ``(value, male, rmsle)`` per sweep cell
    """
    plt = _pyplot()
    ordered = sorted(points)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), constrained_layout=True)
    for ax, column, title in zip(axes, (1, 2), ("MALE", "RMSLE")):
        ax.plot([item[0] for item in ordered], [item[column] for item in ordered], marker="o")
        ax.set_title(title)
        ax.set_xlabel(param)
        ax.grid(True, alpha=0.3)
    return _save(plt, fig, path)
