"""Analytic forward model: meta-atom + substrate -> reflection spectrum.

Transmission-line stand-in for a full-wave solver. The patterned sheet is a
lumped shunt branch (R in series with L and C derived from simple pattern
features), the grounded substrate is a shorted line section, and an optional
protective cover is a second line section. Deterministic, fast, and shaped
like the real physics: a lossless metal-backed slab reflects everything, and
a 377 ohm/sq sheet a quarter wave above the ground plane is a perfect
Salisbury absorber.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .codec import DUAL, MetaAtom

Z0_OHM = 376.730
C0_M_PER_S = 299792458.0

N_FREQ = 201
FREQ_MIN_GHZ = 2.0
FREQ_MAX_GHZ = 18.0
FREQ_GHZ = np.linspace(FREQ_MIN_GHZ, FREQ_MAX_GHZ, N_FREQ)
FREQ_STEP_GHZ = (FREQ_MAX_GHZ - FREQ_MIN_GHZ) / (N_FREQ - 1)

# Lumped-element constants of the sheet model. Toolkit values, chosen so the
# pattern families sweep resonances across the 2-18 GHz band.
_METAL_FLOOR_OHM = 0.01
_FILL_FLOOR = 0.05
_L_BASE_H = 1.0e-9
_C_BASE_F = 0.08e-12
_FULL_SHEET_FILL = 0.999
_COVER_FRACTION = 0.2


@dataclass(frozen=True)
class Material:
    """Substrate: relative permittivity, loss tangent, thickness."""

    name: str
    eps_r: float
    tan_delta: float
    thickness_mm: float

    def __post_init__(self) -> None:
        if self.eps_r < 1.0:
            raise ValueError(f"eps_r must be >= 1, got {self.eps_r}")
        if self.tan_delta < 0.0:
            raise ValueError(f"tan_delta must be >= 0, got {self.tan_delta}")
        if not self.thickness_mm > 0.0:
            raise ValueError(f"thickness_mm must be > 0, got {self.thickness_mm}")

    def as_vector(self) -> np.ndarray:
        return np.array([self.eps_r, self.tan_delta, self.thickness_mm])


@dataclass(frozen=True)
class PatternFeatures:
    """Scalar features of a binary pattern driving the sheet model."""

    fill: float
    edge_density: float
    components: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.fill <= 1.0:
            raise ValueError(f"fill must be in [0,1], got {self.fill}")
        if not 0.0 <= self.edge_density <= 1.0:
            raise ValueError(f"edge_density out of range: {self.edge_density}")
        if not 0 <= self.components <= 8:
            raise ValueError(f"components must be in [0,8], got {self.components}")
        if self.fill == 0.0 and (self.edge_density != 0.0 or self.components != 0):
            raise ValueError("empty pattern must have zero edge_density/components")


def edge_pixels(mask: np.ndarray) -> np.ndarray:
    """Pattern pixels with an empty 4-neighbour inside the grid.

    The grid border itself does not count as an edge; this is the one
    boundary definition shared by the sheet model and the diversity metric.
    """
    mask = np.asarray(mask).astype(bool)
    empty = ~mask
    edge = np.zeros_like(mask)
    edge[1:, :] |= mask[1:, :] & empty[:-1, :]
    edge[:-1, :] |= mask[:-1, :] & empty[1:, :]
    edge[:, 1:] |= mask[:, 1:] & empty[:, :-1]
    edge[:, :-1] |= mask[:, :-1] & empty[:, 1:]
    return edge


def pattern_features(meta_atom: MetaAtom) -> PatternFeatures:
    """Fill fraction, in-grid boundary density, and component count (8-conn)."""
    mask = meta_atom.pattern.astype(bool)
    n = mask.size
    if not mask.any():
        return PatternFeatures(fill=0.0, edge_density=0.0, components=0)
    fill = float(mask.sum()) / n
    edge_density = float(edge_pixels(mask).sum()) / n
    _, n_comp = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return PatternFeatures(
        fill=fill, edge_density=edge_density, components=min(int(n_comp), 8)
    )


def _check_freq(f_ghz: np.ndarray) -> np.ndarray:
    f = np.asarray(f_ghz, dtype=np.float64)
    if np.any(f < FREQ_MIN_GHZ) or np.any(f > FREQ_MAX_GHZ):
        raise ValueError(f"frequency outside [{FREQ_MIN_GHZ}, {FREQ_MAX_GHZ}] GHz")
    return f


def sheet_impedance(
    features: PatternFeatures, sheet_resistance: float, f_ghz
) -> np.ndarray | None:
    """Shunt impedance of the patterned sheet, ohm (None = open circuit).

    Continuous sheets (fill >= 0.999) are purely resistive; patterned sheets
    get a series RLC whose L grows with sparsity and whose C grows with
    fill-complement product and edge density.
    """
    if sheet_resistance < 0.0:
        raise ValueError(f"sheet_resistance must be >= 0, got {sheet_resistance}")
    f = _check_freq(f_ghz)
    if features.fill == 0.0:
        return None
    r_floor = max(sheet_resistance, _METAL_FLOOR_OHM)
    if features.fill >= _FULL_SHEET_FILL:
        return np.full_like(f, r_floor, dtype=np.complex128)
    omega = 2.0 * np.pi * f * 1e9
    r_eff = r_floor / (features.fill + _FILL_FLOOR)
    l_eff = _L_BASE_H * (0.3 + 1.4 * (1.0 - features.fill))
    c_eff = _C_BASE_F * (
        0.3
        + 6.0 * features.fill * (1.0 - features.fill)
        + 2.0 * features.edge_density
    )
    return r_eff + 1j * (omega * l_eff - 1.0 / (omega * c_eff))


def _slab_params(material: Material, f_ghz) -> tuple[np.ndarray, np.ndarray]:
    """Characteristic impedance (ohm) and propagation constant (1/m)."""
    f = _check_freq(f_ghz)
    eps = material.eps_r * (1.0 - 1j * material.tan_delta)
    root = np.sqrt(eps + 0j)
    z_d = Z0_OHM / root
    gamma = 1j * (2.0 * np.pi * f * 1e9 / C0_M_PER_S) * root
    return z_d, gamma


def grounded_slab_impedance(material: Material, f_ghz) -> np.ndarray:
    """Input impedance of the metal-backed substrate: Z_d tanh(gamma t)."""
    z_d, gamma = _slab_params(material, f_ghz)
    return z_d * np.tanh(gamma * material.thickness_mm * 1e-3)


def reflection_from_features(
    features: PatternFeatures,
    sheet_resistance: float,
    layers: str,
    material: Material,
    f_ghz=None,
) -> np.ndarray:
    """|S11| of the sheet-on-grounded-slab stack at the given frequencies."""
    f = FREQ_GHZ if f_ghz is None else _check_freq(f_ghz)
    z_slab = grounded_slab_impedance(material, f)
    z_sheet = sheet_impedance(features, sheet_resistance, f)
    if z_sheet is None:
        z_p = z_slab
    else:
        z_p = z_sheet * z_slab / (z_sheet + z_slab)
    if layers == DUAL:
        z_d, gamma = _slab_params(material, f)
        t_cover = _COVER_FRACTION * material.thickness_mm * 1e-3
        th = np.tanh(gamma * t_cover)
        z_top = z_d * (z_p + z_d * th) / (z_d + z_p * th)
    else:
        z_top = z_p
    gamma_refl = (z_top - Z0_OHM) / (z_top + Z0_OHM)
    return np.clip(np.abs(gamma_refl), 0.0, 1.0)


def reflection_spectrum(meta_atom: MetaAtom, material: Material) -> np.ndarray:
    """201-point linear |S11| on the 2-18 GHz grid."""
    feats = pattern_features(meta_atom)
    return reflection_from_features(
        feats, meta_atom.sheet_resistance, meta_atom.layers, material
    )


def absorption(spectrum: np.ndarray) -> np.ndarray:
    """Absorbed power fraction; the ground plane kills transmission."""
    values = validate_spectrum(spectrum)
    return 1.0 - values**2


def validate_spectrum(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (N_FREQ,):
        raise ValueError(f"spectrum must have shape ({N_FREQ},), got {values.shape}")
    if not np.all((values >= 0.0) & (values <= 1.0)):
        raise ValueError("spectrum magnitudes must lie in [0, 1]")
    return values


# Fig. 6 substrate presets plus two thicker toolkit substrates that widen the
# reachable category mix (multi-resonant / ultra-wideband responses).
MATERIAL_PRESETS: dict[str, Material] = {
    m.name: m
    for m in [
        Material("RT/Duroid 5880", 2.2, 0.0009, 1.575),
        Material("RO4835", 3.48, 0.0037, 1.524),
        Material("AD255C", 2.6, 0.0013, 3.175),
        Material("RO4533", 3.45, 0.0025, 1.524),
        Material("Kappa 438", 4.38, 0.005, 1.524),
        Material("RO4360G2", 6.4, 0.0038, 1.524),
        Material("FoamClad 6.0", 1.25, 0.002, 6.0),
        Material("FoamClad 9.0", 1.25, 0.002, 9.0),
    ]
}


def save_material_presets(path, presets: dict[str, Material] | None = None) -> None:
    presets = MATERIAL_PRESETS if presets is None else presets
    table = {
        name: {
            "eps_r": m.eps_r,
            "tan_delta": m.tan_delta,
            "thickness_mm": m.thickness_mm,
        }
        for name, m in presets.items()
    }
    Path(path).write_text(json.dumps(table, indent=2, sort_keys=True))


def load_material_presets(path) -> dict[str, Material]:
    table = json.loads(Path(path).read_text())
    return {
        name: Material(name, rec["eps_r"], rec["tan_delta"], rec["thickness_mm"])
        for name, rec in table.items()
    }


def save_spectra(path, spectra: np.ndarray) -> None:
    """Write spectra as little-endian float32, 201 values per record."""
    arr = np.atleast_2d(np.asarray(spectra))
    if arr.shape[1] != N_FREQ:
        raise ValueError(f"expected {N_FREQ} values per spectrum, got {arr.shape[1]}")
    arr.astype("<f4").tofile(path)


def load_spectra(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % N_FREQ != 0:
        raise ValueError(f"{path}: size {raw.size} not a multiple of {N_FREQ}")
    return raw.reshape(-1, N_FREQ).astype(np.float64)
