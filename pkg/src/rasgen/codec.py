"""Meta-atom geometry and its 3-channel image representation.

A meta-atom is a binary pattern of metal or resistive sheet printed on a
grounded dielectric cell. The generative model consumes and produces a
3-channel image of the cell: R holds the pattern mask, G the mask weighted
by the normalized sheet resistance, and B the mask weighted by the layer
flag (0 = single layer, 1 = dual layer with protective cover). Channels are
stored in [0, 1]; 8-bit PNG is the on-disk form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

GRID_SIZE = 32
R_MAX_OHM_SQ = 200.0
# Sheet resistances a design may use (ohm/sq); 0 denotes metal.
SHEET_RESISTANCE_VALUES = (0.0, 50.0, 70.0, 75.0, 100.0)
DEFAULT_CELL_SIZE_MM = 10.0
MIN_FEATURE_MM = 0.1

METAL = "metal"
RESISTIVE = "resistive"
SINGLE = "single"
DUAL = "dual"


@dataclass
class MetaAtom:
    """Physical description of one unit cell.

    pattern is an H x W array of {0, 1}; 1 marks pattern material.
    sheet_resistance is 0 exactly for metal and in (0, R_MAX_OHM_SQ] for
    resistive sheet.
    """

    pattern: np.ndarray
    pattern_kind: str
    sheet_resistance: float
    layers: str
    cell_size_mm: float = DEFAULT_CELL_SIZE_MM

    def __post_init__(self) -> None:
        self.pattern = np.asarray(self.pattern)
        self.validate()

    def validate(self, grid_size: int | None = None) -> None:
        expected = grid_size if grid_size is not None else GRID_SIZE
        if self.pattern.ndim != 2 or self.pattern.shape != (expected, expected):
            raise ValueError(
                f"pattern must be {expected}x{expected}, got {self.pattern.shape}"
            )
        vals = np.unique(self.pattern)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("pattern must be binary")
        if self.pattern_kind not in (METAL, RESISTIVE):
            raise ValueError(f"unknown pattern_kind {self.pattern_kind!r}")
        if self.pattern_kind == METAL:
            if self.sheet_resistance != 0.0:
                raise ValueError("metal patterns must have sheet_resistance 0")
        else:
            if not 0.0 < self.sheet_resistance <= R_MAX_OHM_SQ:
                raise ValueError(
                    f"resistive sheet_resistance must be in (0, {R_MAX_OHM_SQ}], "
                    f"got {self.sheet_resistance}"
                )
        if self.layers not in (SINGLE, DUAL):
            raise ValueError(f"unknown layers {self.layers!r}")
        if not self.cell_size_mm > 0:
            raise ValueError("cell_size_mm must be positive")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetaAtom):
            return NotImplemented
        return (
            np.array_equal(self.pattern, other.pattern)
            and self.pattern_kind == other.pattern_kind
            and self.sheet_resistance == other.sheet_resistance
            and self.layers == other.layers
            and self.cell_size_mm == other.cell_size_mm
        )


@dataclass(frozen=True)
class FabricabilityReport:
    min_feature_mm: float
    passed: bool


def encode(meta_atom: MetaAtom) -> np.ndarray:
    """Encode a meta-atom as a (3, H, W) float image in [0, 1].

    R = pattern mask, G = mask * sheet_resistance / R_MAX, B = mask * layer
    flag. Metal therefore encodes with an all-zero G channel.
    """
    meta_atom.validate(grid_size=meta_atom.pattern.shape[0])
    mask = meta_atom.pattern.astype(np.float64)
    g = mask * (meta_atom.sheet_resistance / R_MAX_OHM_SQ)
    b = mask * (1.0 if meta_atom.layers == DUAL else 0.0)
    return np.stack([mask, g, b])


def validate_encoded_image(image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"encoded image must be (3, H, W), got {image.shape}")
    if not np.all((image >= 0.0) & (image <= 1.0)):
        raise ValueError("encoded image values must lie in [0, 1]")
    support = image[0] > 0
    for name, ch in (("G", image[1]), ("B", image[2])):
        if np.any((ch > 0) & ~support):
            raise ValueError(f"{name} channel has support outside the R channel")


def decode(image: np.ndarray, cell_size_mm: float = DEFAULT_CELL_SIZE_MM) -> MetaAtom:
    """Decode a (possibly noisy) 3-channel image back to a MetaAtom.

    Total function: values are clamped to [0, 1], the mask is thresholded at
    0.5, and the sheet resistance is snapped to the nearest allowed value so
    decoded designs stay manufacturable. An empty mask decodes to a metal,
    single-layer atom.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    image = np.clip(image, 0.0, 1.0)
    mask = image[0] >= 0.5
    if not mask.any():
        return MetaAtom(
            pattern=np.zeros(image.shape[1:], dtype=np.uint8),
            pattern_kind=METAL,
            sheet_resistance=0.0,
            layers=SINGLE,
            cell_size_mm=cell_size_mm,
        )
    r_raw = float(image[1][mask].mean()) * R_MAX_OHM_SQ
    allowed = np.asarray(SHEET_RESISTANCE_VALUES)
    r_snap = float(allowed[np.argmin(np.abs(allowed - r_raw))])
    dual = float(image[2][mask].mean()) >= 0.5
    return MetaAtom(
        pattern=mask.astype(np.uint8),
        pattern_kind=METAL if r_snap == 0.0 else RESISTIVE,
        sheet_resistance=r_snap,
        layers=DUAL if dual else SINGLE,
        cell_size_mm=cell_size_mm,
    )


def _feature_width_px(mask: np.ndarray) -> int:
    """Side length of the smallest pattern feature, in pixels.

    Largest odd k such that opening with a k x k square element retains every
    pattern pixel. Pixels outside the grid count as pattern (cells tile
    periodically), so the cell border is not an edge; a full mask caps at the
    grid size.
    """
    h = mask.shape[0]
    padded = np.pad(mask, h, mode="constant", constant_values=1).astype(bool)
    if np.all(padded):
        return h
    # Chebyshev distance to the nearest in-grid background pixel.
    dist = ndimage.distance_transform_cdt(padded, metric="chessboard")
    inner = (slice(h, 2 * h), slice(h, 2 * h))
    r_max = 0
    for r in range(1, (h + 1) // 2 + 1):
        eroded = dist > r
        covered = ndimage.maximum_filter(eroded, size=2 * r + 1)[inner]
        if np.all(covered[mask.astype(bool)]):
            r_max = r
        else:
            break
    return min(2 * r_max + 1, h)


def check_fabricable(meta_atom: MetaAtom) -> FabricabilityReport:
    """Check the minimum feature size against the 0.1 mm etching limit.

    An empty pattern passes vacuously (reported min feature is +inf).
    """
    mask = meta_atom.pattern.astype(bool)
    if not mask.any():
        return FabricabilityReport(min_feature_mm=float("inf"), passed=True)
    pitch = meta_atom.cell_size_mm / mask.shape[0]
    min_feature = pitch * _feature_width_px(meta_atom.pattern)
    return FabricabilityReport(
        min_feature_mm=min_feature, passed=min_feature > MIN_FEATURE_MM
    )


def meta_atom_to_json(meta_atom: MetaAtom) -> dict:
    h, w = meta_atom.pattern.shape
    return {
        "pattern": "".join(str(int(v)) for v in meta_atom.pattern.ravel()),
        "height": h,
        "width": w,
        "pattern_kind": meta_atom.pattern_kind,
        "sheet_resistance": meta_atom.sheet_resistance,
        "layers": meta_atom.layers,
        "cell_size_mm": meta_atom.cell_size_mm,
    }


def meta_atom_from_json(record: dict) -> MetaAtom:
    h, w = record["height"], record["width"]
    flat = np.frombuffer(record["pattern"].encode("ascii"), dtype=np.uint8) - ord("0")
    if flat.size != h * w:
        raise ValueError("pattern string length does not match height*width")
    return MetaAtom(
        pattern=flat.reshape(h, w).copy(),
        pattern_kind=record["pattern_kind"],
        sheet_resistance=float(record["sheet_resistance"]),
        layers=record["layers"],
        cell_size_mm=float(record["cell_size_mm"]),
    )


def save_encoded_png(image: np.ndarray, path) -> None:
    validate_encoded_image(image)
    arr = np.round(255.0 * np.asarray(image)).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_encoded_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def meta_atom_json_str(meta_atom: MetaAtom) -> str:
    return json.dumps(meta_atom_to_json(meta_atom), sort_keys=True)
