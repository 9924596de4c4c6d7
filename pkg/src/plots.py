"""SVG figures for the CLI: Bode plot, training curves, search progress."""

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.acsim import BodeTable  # noqa: E402

# fixed ids and no timestamp keep repeated runs byte-identical
matplotlib.rcParams["svg.hashsalt"] = "cktgrid"
matplotlib.rcParams["svg.fonttype"] = "none"


def save_svg(fig, path: Path, description: str = "") -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    plt.close(fig)


def plot_bode(table: BodeTable, path: Path, title: str = "", description: str = "") -> None:
    fig, (ax_mag, ax_phase) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    ax_mag.semilogx(table.f_hz, table.mag_db)
    ax_mag.axhline(0.0, color="grey", linewidth=0.8)
    ax_mag.set_ylabel("magnitude [dB]")
    ax_phase.semilogx(table.f_hz, table.phase_deg)
    ax_phase.set_ylabel("phase [deg]")
    ax_phase.set_xlabel("frequency [Hz]")
    if title:
        ax_mag.set_title(title)
    for ax in (ax_mag, ax_phase):
        ax.grid(True, which="both", linewidth=0.3)
    save_svg(fig, path, description)


def plot_loss_curves(curves: Sequence[Dict[str, float]], path: Path, description: str = "") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    epochs = [row["epoch"] for row in curves]
    for key in ("total", "recon_type", "recon_edge", "recon_param", "kl"):
        ax.plot(epochs, [row[key] for row in curves], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss per circuit")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    ax.grid(True, linewidth=0.3)
    save_svg(fig, path, description)


def plot_best_so_far(series: Dict[str, Sequence[tuple]], path: Path, dataset_best: float = None,
                     description: str = "") -> None:
    """``series`` maps a method name to (iteration, best FoM) pairs."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, points in series.items():
        if points:
            xs, ys = zip(*points)
            ax.step(xs, ys, where="post", marker="o", label=name)
    if dataset_best is not None and np.isfinite(dataset_best):
        ax.axhline(dataset_best, color="grey", linestyle="--", label="dataset best")
    ax.set_xlabel("iteration")
    ax.set_ylabel("best FoM")
    ax.legend()
    ax.grid(True, linewidth=0.3)
    save_svg(fig, path, description)
