"""Evaluation metrics: spectral agreement, band alignment, and diversity.

All spectral metrics operate on linear |S11| magnitudes. Absorption bands
are the grid points at or below the -10 dB threshold (0.3162 linear).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .oracle import N_FREQ, edge_pixels

BAND_THRESHOLD = 10.0 ** (-0.5)  # -10 dB in linear magnitude


@dataclass(frozen=True)
class DiversityConfig:
    lambda_mix: float = 0.5
    delta_px: int = 2
    eps_stab: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValueError("lambda_mix must be in [0, 1]")
        if self.delta_px < 0:
            raise ValueError("delta_px must be >= 0")
        if not self.eps_stab > 0.0:
            raise ValueError("eps_stab must be positive")


def band_set(spectrum: np.ndarray) -> frozenset[int]:
    """Indices of grid points where |S11| <= -10 dB (inclusive)."""
    values = np.asarray(spectrum, dtype=np.float64)
    return frozenset(int(i) for i in np.flatnonzero(values <= BAND_THRESHOLD))


def _as_pairs(gen: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if gen.shape != target.shape:
        raise ValueError(f"shape mismatch: {gen.shape} vs {target.shape}")
    return gen, target


def spectral_mse(gen: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pair mean squared spectral error and its dataset average."""
    gen, target = _as_pairs(gen, target)
    per_pair = np.mean((gen - target) ** 2, axis=1)
    return per_pair, float(np.mean(per_pair))


def aae(gen: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pair mean absolute spectral error and its dataset average."""
    gen, target = _as_pairs(gen, target)
    per_pair = np.mean(np.abs(gen - target), axis=1)
    return per_pair, float(np.mean(per_pair))


def baa(
    target: np.ndarray, gen: np.ndarray, variant: str = "normalized"
) -> float:
    """Band alignment between target and generated -10 dB regions.

    normalized: I^2 / (|B_target| * |B_gen|), bounded in [0, 1] and used for
    validity thresholds. literal: I^2 / |B_target|, an unnormalized variant
    that exceeds 1 once the intersection outgrows |B_target|; reported for
    reference only. Both spectra empty -> 1; exactly one empty -> 0.
    """
    if variant not in ("normalized", "literal"):
        raise ValueError(f"unknown variant {variant!r}")
    b_t = band_set(target)
    b_g = band_set(gen)
    if not b_t and not b_g:
        return 1.0
    if not b_t or not b_g:
        return 0.0
    inter = len(b_t & b_g)
    if variant == "normalized":
        return inter**2 / (len(b_t) * len(b_g))
    return inter**2 / len(b_t)


def baa_pairs(
    gen: np.ndarray, target: np.ndarray, variant: str = "normalized"
) -> tuple[np.ndarray, float]:
    gen, target = _as_pairs(gen, target)
    per_pair = np.array([baa(t, g, variant) for g, t in zip(gen, target)])
    return per_pair, float(np.mean(per_pair))


def valid_fraction(gen: np.ndarray, target: np.ndarray) -> float:
    """Fraction of pairs whose normalized band alignment exceeds 0.8."""
    per_pair, _ = baa_pairs(gen, target)
    if per_pair.size == 0:
        raise ValueError("valid_fraction needs at least one pair")
    return float(np.mean(per_pair > 0.8))


def boundary_band(mask: np.ndarray, delta_px: int) -> np.ndarray:
    """Pattern pixels within Chebyshev distance delta of an edge pixel."""
    mask = np.asarray(mask).astype(bool)
    edges = edge_pixels(mask)
    if delta_px == 0:
        return edges
    dilated = ndimage.maximum_filter(edges, size=2 * delta_px + 1)
    return dilated & mask


def _iou_distance(a: np.ndarray, b: np.ndarray, eps: float) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(a, b).sum()
    return 1.0 - inter / (union + eps)


def diversity(
    masks: np.ndarray, config: DiversityConfig = DiversityConfig()
) -> float:
    """Average pairwise structural dissimilarity of N binary masks.

    Each pair mixes a whole-mask IoU distance with an IoU distance between
    boundary bands; both-empty operands contribute zero distance.
    """
    masks = [np.asarray(m).astype(bool) for m in masks]
    n = len(masks)
    if n < 2:
        raise ValueError("diversity needs at least two masks")
    bands = [boundary_band(m, config.delta_px) for m in masks]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d1 = _iou_distance(masks[i], masks[j], config.eps_stab)
            d2 = _iou_distance(bands[i], bands[j], config.eps_stab)
            total += config.lambda_mix * d1 + (1.0 - config.lambda_mix) * d2
    return 2.0 * total / (n * (n - 1))


def evaluate_pairs(
    gen: np.ndarray,
    target: np.ndarray,
    masks: np.ndarray | None = None,
    config: DiversityConfig = DiversityConfig(),
) -> dict:
    """Full metric report over a generated set, as emitted by `evaluate`."""
    gen, target = _as_pairs(gen, target)
    if gen.shape[1] != N_FREQ:
        raise ValueError(f"expected {N_FREQ}-point spectra, got {gen.shape[1]}")
    _, mse_avg = spectral_mse(gen, target)
    _, aae_avg = aae(gen, target)
    _, baa_norm = baa_pairs(gen, target, "normalized")
    _, baa_lit = baa_pairs(gen, target, "literal")
    report = {
        "mse": mse_avg,
        "aae": aae_avg,
        "baa_normalized": baa_norm,
        "baa_literal": baa_lit,
        "valid_fraction": valid_fraction(gen, target),
        "diversity": None,
        "n_pairs": int(gen.shape[0]),
        "config": {
            "lambda_mix": config.lambda_mix,
            "delta_px": config.delta_px,
            "eps_stab": config.eps_stab,
        },
    }
    if masks is not None and len(masks) >= 2:
        report["diversity"] = diversity(masks, config)
    return report
