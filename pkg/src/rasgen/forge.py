"""Synthetic dataset generation, spectral categorization, and splits.

Meta-atoms come from eight procedural pattern families with documented
parameter ranges. Each sample is labelled by the analytic oracle, binned
into a spectral response category, and assigned to train/val/test by a
stratified split that keeps rare categories represented.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, oracle
from .codec import DUAL, GRID_SIZE, METAL, MetaAtom, RESISTIVE, SINGLE
from .metrics import BAND_THRESHOLD
from .oracle import FREQ_STEP_GHZ, Material

NON_ABSORBING = "non_absorbing"
SINGLE_RESONANCE = "single_resonance"
MULTIPLE_RESONANCE = "multiple_resonance"
WIDEBAND = "wideband"
ULTRA_WIDEBAND = "ultra_wideband"
CATEGORIES = (
    NON_ABSORBING,
    SINGLE_RESONANCE,
    MULTIPLE_RESONANCE,
    WIDEBAND,
    ULTRA_WIDEBAND,
)

MANIFEST_SCHEMA = 1

# Resistive sheet values the generator draws from; metal handled separately.
_RESISTIVE_CHOICES = (50.0, 70.0, 75.0, 100.0)
_METAL_PROB = 0.15
_DUAL_PROB = 0.4

# Thin substrates give almost exclusively non-absorbing responses in band;
# the draw keeps them (they anchor that category) but favours the thicker
# structure-producing substrates so rare categories stay populated.
DEFAULT_MATERIAL_WEIGHTS = {
    "RT/Duroid 5880": 0.5,
    "RO4835": 0.5,
    "RO4533": 0.5,
    "Kappa 438": 0.7,
    "RO4360G2": 1.0,
    "AD255C": 1.5,
    "FoamClad 6.0": 1.5,
    "FoamClad 9.0": 1.2,
}


def categorize_spectrum(spectrum: np.ndarray) -> str:
    """Bin a spectrum by its -10 dB absorption bands.

    Bands are maximal runs of grid points at or below the threshold; band
    width is the point count times the 0.08 GHz grid step. Two or more bands
    always mean multiple_resonance; a single band is ultra_wideband above
    10 GHz total width, wideband at 2 GHz or more, single_resonance below.
    """
    values = oracle.validate_spectrum(spectrum)
    below = values <= BAND_THRESHOLD
    if not below.any():
        return NON_ABSORBING
    # run-length encode the below-threshold mask
    changes = np.flatnonzero(np.diff(below.astype(np.int8)))
    starts = np.concatenate(([0], changes + 1))
    ends = np.concatenate((changes, [below.size - 1]))
    runs = [(s, e) for s, e in zip(starts, ends) if below[s]]
    if len(runs) >= 2:
        return MULTIPLE_RESONANCE
    s, e = runs[0]
    bandwidth_ghz = (e - s + 1) * FREQ_STEP_GHZ
    if bandwidth_ghz > 10.0:
        return ULTRA_WIDEBAND
    if bandwidth_ghz >= 2.0:
        return WIDEBAND
    return SINGLE_RESONANCE


# ---------------------------------------------------------------------------
# Pattern families
# ---------------------------------------------------------------------------

_G = GRID_SIZE
_C = _G // 2  # even grid: geometric centre sits between pixels C-1 and C


def _centered_box(half: int) -> np.ndarray:
    """Centered square of side 2*half; exactly rot90-invariant on even grids."""
    m = np.zeros((_G, _G), dtype=np.uint8)
    m[_C - half : _C + half, _C - half : _C + half] = 1
    return m


def _rect(r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    m = np.zeros((_G, _G), dtype=np.uint8)
    m[r0:r1, c0:c1] = 1
    return m


def _patch(rng: np.random.Generator) -> np.ndarray:
    # centered rectangle, half-sides 4..14 px (fill 0.06..0.77)
    hw = int(rng.integers(4, 15))
    hh = int(rng.integers(4, 15))
    return _rect(_C - hh, _C + hh, _C - hw, _C + hw)


def _ring(rng: np.random.Generator) -> np.ndarray:
    # square annulus, outer half-size 6..15, thickness 2..5 (fill 0.05..0.6)
    a = int(rng.integers(6, 16))
    t = int(rng.integers(2, min(6, a)))
    return _centered_box(a) & ~_centered_box(a - t)


def _cross(rng: np.random.Generator) -> np.ndarray:
    # plus sign with equal arms, half-length 6..15, half-width 1..4
    l = int(rng.integers(6, 16))
    w = int(rng.integers(1, 5))
    v = _rect(_C - l, _C + l, _C - w, _C + w)
    h = _rect(_C - w, _C + w, _C - l, _C + l)
    return v | h


def _split_ring(rng: np.random.Generator) -> np.ndarray:
    ring = _ring(rng)
    gap = int(rng.integers(2, 7))
    ring[: _C, _C - gap // 2 : _C - gap // 2 + gap] = 0
    return np.rot90(ring, k=int(rng.integers(0, 4))).copy()


def _grid_lattice(rng: np.random.Generator) -> np.ndarray:
    # lattice of small squares: pitch 6..11, square side 2..pitch-2
    p = int(rng.integers(6, 12))
    s = int(rng.integers(2, p - 1))
    off = (p - s) // 2
    m = np.zeros((_G, _G), dtype=np.uint8)
    for r in range(off, _G, p):
        for c in range(off, _G, p):
            m[r : min(r + s, _G), c : min(c + s, _G)] = 1
    return m


def _concentric_squares(rng: np.random.Generator) -> np.ndarray:
    # two nested square rings, optional centre patch
    a1 = int(rng.integers(12, 16))
    t1 = int(rng.integers(2, 4))
    gap = int(rng.integers(2, 4))
    a2 = a1 - t1 - gap
    t2 = int(rng.integers(2, min(4, a2)))
    m = _centered_box(a1) & ~_centered_box(a1 - t1)
    m |= _centered_box(a2) & ~_centered_box(a2 - t2)
    if rng.random() < 0.5:
        core = max(1, a2 - t2 - gap)
        m |= _centered_box(core)
    return m


def _dipole_array(rng: np.random.Generator) -> np.ndarray:
    # 2..4 parallel bars, width 2..4 rows, length 16..28
    n_bars = int(rng.integers(2, 5))
    w = int(rng.integers(2, 5))
    l = int(rng.integers(8, 15)) * 2
    m = np.zeros((_G, _G), dtype=np.uint8)
    spacing = _G // (n_bars + 1)
    for k in range(1, n_bars + 1):
        r = k * spacing - w // 2
        m[max(r, 0) : min(r + w, _G), _C - l // 2 : _C + l // 2] = 1
    return np.rot90(m, k=int(rng.integers(0, 4))).copy()


def _windmill(rng: np.random.Generator) -> np.ndarray:
    # one radial arm, symmetrized under 90-degree rotation
    l = int(rng.integers(8, 15))
    w = int(rng.integers(2, 5))
    off = int(rng.integers(0, 5))
    arm = _rect(_C - l, _C, _C + off - w, _C + off)
    m = arm.astype(bool)
    for _ in range(3):
        m = m | np.rot90(m)
    return m.astype(np.uint8)


_FAMILY_BUILDERS = {
    "patch": _patch,
    "ring": _ring,
    "cross": _cross,
    "split_ring": _split_ring,
    "grid": _grid_lattice,
    "concentric_squares": _concentric_squares,
    "dipole_array": _dipole_array,
    "windmill": _windmill,
}
FAMILIES = tuple(_FAMILY_BUILDERS)
# families whose masks are exactly invariant under 90-degree rotation
SYMMETRIC_FAMILIES = ("ring", "cross", "concentric_squares", "windmill")
_FAMILY_IDS = {name: k for k, name in enumerate(FAMILIES)}


def sample_meta_atom(seed: int, family: str) -> MetaAtom:
    """Draw one meta-atom, deterministic in (seed, family)."""
    if family not in _FAMILY_BUILDERS:
        raise ValueError(f"unknown family {family!r}")
    rng = np.random.default_rng([seed, _FAMILY_IDS[family]])
    mask = _FAMILY_BUILDERS[family](rng)
    if rng.random() < _METAL_PROB:
        kind, r_s = METAL, 0.0
    else:
        kind, r_s = RESISTIVE, float(rng.choice(_RESISTIVE_CHOICES))
    layers = DUAL if rng.random() < _DUAL_PROB else SINGLE
    return MetaAtom(
        pattern=mask, pattern_kind=kind, sheet_resistance=r_s, layers=layers
    )


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    meta_atom: MetaAtom
    material: Material
    image: np.ndarray
    spectrum: np.ndarray
    category: str
    split: str
    seed: int
    family: str


@dataclass
class ForgeConfig:
    n: int
    seed: int
    families: dict[str, float] = field(
        default_factory=lambda: {name: 1.0 for name in FAMILIES}
    )
    materials: dict[str, Material] = field(
        default_factory=lambda: dict(oracle.MATERIAL_PRESETS)
    )
    material_weights: dict[str, float] | None = None
    max_resample: int = 10

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError(f"dataset size must be >= 1, got {self.n}")
        if not self.materials:
            raise ValueError("material table must be nonempty")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown families: {sorted(unknown)}")

    def resolved_material_weights(self) -> np.ndarray:
        w = np.array(
            [
                (self.material_weights or DEFAULT_MATERIAL_WEIGHTS).get(name, 1.0)
                for name in self.materials
            ]
        )
        return w / w.sum()


def _draw_sample(config: ForgeConfig, index: int) -> Sample | None:
    """Deterministic per-index sample; None when fabricability keeps failing."""
    names = list(config.families)
    weights = np.array([config.families[n] for n in names], dtype=np.float64)
    weights /= weights.sum()
    material_names = list(config.materials)
    material_weights = config.resolved_material_weights()
    for attempt in range(config.max_resample):
        seq = np.random.SeedSequence([config.seed, index, attempt])
        rng = np.random.default_rng(seq)
        family = names[int(rng.choice(len(names), p=weights))]
        material = config.materials[
            material_names[int(rng.choice(len(material_names), p=material_weights))]
        ]
        atom_seed = int(seq.generate_state(1, np.uint64)[0])
        meta = sample_meta_atom(atom_seed, family)
        if not codec.check_fabricable(meta).passed:
            continue
        image = codec.encode(meta)
        spectrum = oracle.reflection_spectrum(meta, material)
        return Sample(
            meta_atom=meta,
            material=material,
            image=image,
            spectrum=spectrum,
            category=categorize_spectrum(spectrum),
            split="train",
            seed=atom_seed,
            family=family,
        )
    return None


def stratified_split(
    categories: list[str],
    seed: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    min_eval: int = 1,
) -> tuple[list[str], list[str]]:
    """Assign train/val/test per category; returns (splits, warnings).

    Categories with >= 10 members get floor(10%) val and test with the
    remainder in train. Smaller categories get min_eval in val and test when
    at least 3 members exist; below that, train keeps one sample and the
    rest goes to val then test, with a warning.
    """
    categories = list(categories)
    splits = ["train"] * len(categories)
    notes: list[str] = []
    rng = np.random.default_rng([seed, 0x5711])
    present = [c for c in CATEGORIES if c in categories] + sorted(
        set(categories) - set(CATEGORIES)
    )
    for cat in present:
        idx = np.flatnonzero(np.asarray(categories, dtype=object) == cat)
        rng.shuffle(idx)
        count = idx.size
        if count >= 10:
            n_val = int(np.floor(count * ratios[1]))
            n_test = int(np.floor(count * ratios[2]))
        elif count >= 3:
            n_val = n_test = min_eval
        elif count == 2:
            n_val, n_test = 1, 0
            notes.append(f"category {cat}: only 2 samples, test split empty")
        else:
            n_val = n_test = 0
            notes.append(f"category {cat}: only 1 sample, val/test splits empty")
        for i in idx[:n_val]:
            splits[i] = "val"
        for i in idx[n_val : n_val + n_test]:
            splits[i] = "test"
    for note in notes:
        warnings.warn(note)
    return splits, notes


def sampling_weights(categories: list[str]) -> np.ndarray:
    """Inverse-category-frequency weight per sample (for weighted draws)."""
    if len(categories) == 0:
        raise ValueError("empty split")
    counts: dict[str, int] = {}
    for c in categories:
        counts[c] = counts.get(c, 0) + 1
    return np.array([1.0 / counts[c] for c in categories])


def build_dataset(config: ForgeConfig, out_dir) -> dict:
    """Forge the dataset on disk; returns the manifest dict."""
    config.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    samples: list[Sample] = []
    skipped = 0
    for i in range(config.n):
        sample = _draw_sample(config, i)
        if sample is None:
            skipped += 1
            continue
        samples.append(sample)

    splits, split_notes = stratified_split([s.category for s in samples], config.seed)
    for s, sp in zip(samples, splits):
        s.split = sp

    spectra = np.stack([s.spectrum for s in samples])
    oracle.save_spectra(out / "spectra.bin", spectra)

    records = []
    for k, s in enumerate(samples):
        image_name = f"images/{k:05d}.png"
        codec.save_encoded_png(s.image, out / image_name)
        records.append(
            {
                "index": k,
                "seed": s.seed,
                "family": s.family,
                "material": s.material.name,
                "category": s.category,
                "split": s.split,
                "image": image_name,
                "spectrum_offset": k * oracle.N_FREQ * 4,
            }
        )

    histogram = {c: 0 for c in CATEGORIES}
    for s in samples:
        histogram[s.category] += 1
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "config": {
            "n": config.n,
            "seed": config.seed,
            "families": config.families,
            "materials": {
                name: {
                    "eps_r": m.eps_r,
                    "tan_delta": m.tan_delta,
                    "thickness_mm": m.thickness_mm,
                }
                for name, m in config.materials.items()
            },
            "max_resample": config.max_resample,
        },
        "n_samples": len(samples),
        "skipped": skipped,
        "category_histogram": histogram,
        "split_warnings": split_notes,
        "records": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir) -> list[Sample]:
    """Rebuild samples from a forged dataset directory.

    Meta-atoms are regenerated from their recorded seeds (bit-exact), images
    re-encoded in float, spectra read back from the binary records.
    """
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    if manifest["schema"] != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {manifest['schema']}")
    materials = {
        name: Material(name, rec["eps_r"], rec["tan_delta"], rec["thickness_mm"])
        for name, rec in manifest["config"]["materials"].items()
    }
    spectra = oracle.load_spectra(data_dir / "spectra.bin")
    samples = []
    for rec in manifest["records"]:
        meta = sample_meta_atom(rec["seed"], rec["family"])
        samples.append(
            Sample(
                meta_atom=meta,
                material=materials[rec["material"]],
                image=codec.encode(meta),
                spectrum=spectra[rec["index"]],
                category=rec["category"],
                split=rec["split"],
                seed=rec["seed"],
                family=rec["family"],
            )
        )
    return samples
