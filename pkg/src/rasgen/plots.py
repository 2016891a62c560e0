"""Comparison figures: target vs generated reflection spectra, in dB."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .oracle import FREQ_GHZ

DB_FLOOR = -40.0


def to_db(values: np.ndarray, floor_db: float = DB_FLOOR) -> np.ndarray:
    """20 log10 of linear magnitude, floored (zero maps to the floor)."""
    v = np.asarray(values, dtype=np.float64)
    out = np.full(v.shape, floor_db)
    pos = v > 0
    out[pos] = np.maximum(20.0 * np.log10(v[pos]), floor_db)
    return out


def plot_comparison(target: np.ndarray, generated: list[np.ndarray], out_path) -> None:
    """SVG figure of the target spectrum against generated ones."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(FREQ_GHZ, to_db(target), "k-", lw=2, label="target")
    for k, spec in enumerate(generated):
        ax.plot(FREQ_GHZ, to_db(spec), lw=1, alpha=0.8, label=f"generated {k}")
    ax.axhline(-10.0, color="gray", ls="--", lw=0.8, label="-10 dB")
    ax.set_xlim(FREQ_GHZ[0], FREQ_GHZ[-1])
    ax.set_ylim(DB_FLOOR, 2.0)
    ax.set_xlabel("frequency (GHz)")
    ax.set_ylabel("|S11| (dB)")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
