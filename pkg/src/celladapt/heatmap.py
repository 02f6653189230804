"""Conversion between cell centroids and cell-position heatmaps.

A cell-position heatmap places an isotropic Gaussian bump (amplitude 255,
width ``sigma``) at every cell centroid; overlapping bumps are combined by
pixelwise maximum, never by summation. Peaks above a threshold are read back
out with windowed non-maximum suppression, which lets a distorted prediction
be re-rendered as a clean "pseudo" heatmap. Negative training samples for
the heatmap discriminator are produced by perturbing a true point set
(adding, removing, or shifting one Gaussian).

Everything here is a pure function of its inputs plus an explicit seed.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter

DEFAULT_AMPLITUDE = 255.0

# Rejection-sampling budget for placing a perturbed Gaussian before giving up
# and falling back to a removal.
MAX_PLACEMENT_ATTEMPTS = 1000


class PerturbationMode(enum.Enum):
    ADD = "add"
    REMOVE = "remove"
    SHIFT = "shift"


@dataclass(frozen=True)
class PointSet:
    """Cell centroid coordinates within one patch, in (row, col) pixels.

    Points must lie inside ``[0, H) x [0, W)`` and be pairwise distinct.
    """

    points: tuple[tuple[float, float], ...]
    patch_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.patch_shape
        if h <= 0 or w <= 0:
            raise ValueError(f"patch_shape must be positive, got {self.patch_shape}")
        pts = tuple((float(r), float(c)) for r, c in self.points)
        for r, c in pts:
            if not (math.isfinite(r) and math.isfinite(c)):
                raise ValueError(f"non-finite point ({r}, {c})")
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"point ({r}, {c}) outside patch {h}x{w}")
        if len(set(pts)) != len(pts):
            raise ValueError("duplicate points in point set")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "patch_shape", (int(h), int(w)))

    def __len__(self) -> int:
        return len(self.points)

    def to_array(self) -> np.ndarray:
        """(N, 2) float64 array of (row, col) coordinates."""
        if not self.points:
            return np.zeros((0, 2), dtype=np.float64)
        return np.asarray(self.points, dtype=np.float64)


@dataclass(frozen=True)
class Heatmap:
    """Single-channel real-valued map with values in [0, 255]."""

    values: np.ndarray
    sigma: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"heatmap must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("heatmap contains non-finite values")
        if v.min() < 0 or v.max() > 255:
            raise ValueError(
                f"heatmap values outside [0, 255]: min={v.min()}, max={v.max()}"
            )
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class NegativePerturbation:
    """Record of how a negative sample was derived from its positive source."""

    mode: PerturbationMode
    affected_point: tuple[float, float]
    shift_vector: tuple[float, float] | None = None


def generate_heatmap(
    points: PointSet, sigma: float, amplitude: float = DEFAULT_AMPLITUDE
) -> Heatmap:
    """Render the cell-position heatmap for ``points``.

    Each centroid z contributes amplitude * exp(-||u - z||^2 / sigma^2) at
    pixel u; contributions combine by pixelwise maximum. An empty point set
    yields an all-zero map.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (0 < amplitude <= 255):
        raise ValueError(f"amplitude must be in (0, 255], got {amplitude}")
    h, w = points.patch_shape
    out = np.zeros((h, w), dtype=np.float64)
    if len(points):
        rows = np.arange(h, dtype=np.float64)[:, None]
        cols = np.arange(w, dtype=np.float64)[None, :]
        inv = 1.0 / (sigma * sigma)
        for r, c in points.points:
            d2 = (rows - r) ** 2 + (cols - c) ** 2
            np.maximum(out, amplitude * np.exp(-d2 * inv), out=out)
    return Heatmap(values=out, sigma=sigma)


def detect_peaks(h: Heatmap, th_d: float, min_separation: int = 6) -> PointSet:
    """Detect peak pixels: strictly above ``th_d`` and maximal in their window.

    A pixel is a peak if its value exceeds ``th_d`` and no pixel within a
    square window of Chebyshev radius ``min_separation`` is larger. Plateau
    ties are broken toward smaller row, then smaller column, keeping exactly
    one pixel per tied cluster.
    """
    if not (0 < th_d < 255):
        raise ValueError(f"th_d must be in (0, 255), got {th_d}")
    if min_separation < 1:
        raise ValueError(f"min_separation must be >= 1, got {min_separation}")
    v = h.values
    size = 2 * int(min_separation) + 1
    window_max = maximum_filter(v, size=size, mode="constant", cval=-np.inf)
    candidates = np.argwhere((v >= window_max) & (v > th_d))  # row-major order
    kept: list[tuple[int, int]] = []
    for r, c in candidates:
        # Two window-max candidates within one window necessarily tie in
        # value, so suppressing by distance alone implements the row-major
        # plateau tie-break.
        if all(
            max(abs(r - kr), abs(c - kc)) > min_separation for kr, kc in kept
        ):
            kept.append((int(r), int(c)))
    return PointSet(points=tuple((float(r), float(c)) for r, c in kept),
                    patch_shape=v.shape)


def regenerate_pseudo_heatmap(
    pred: Heatmap,
    th_d: float,
    sigma: float,
    min_separation: int | None = None,
) -> tuple[Heatmap, PointSet]:
    """Re-render a (possibly distorted) prediction as clean Gaussians.

    Peaks are detected in ``pred`` and a fresh amplitude-255 heatmap is
    generated from them. Zero detected peaks yield an all-zero map with an
    empty point set, a legal "no cell here" pseudo label.
    """
    if min_separation is None:
        min_separation = max(1, int(sigma))
    peaks = detect_peaks(pred, th_d, min_separation)
    return generate_heatmap(peaks, sigma, DEFAULT_AMPLITUDE), peaks


def _sample_distant_site(
    rng: np.random.Generator,
    shape: tuple[int, int],
    existing: np.ndarray,
    min_dist: float,
) -> tuple[float, float] | None:
    """Uniformly sample an integer pixel >= min_dist from all existing points."""
    h, w = shape
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        r = float(rng.integers(0, h))
        c = float(rng.integers(0, w))
        if existing.size == 0:
            return (r, c)
        d = np.hypot(existing[:, 0] - r, existing[:, 1] - c)
        if d.min() >= min_dist:
            return (r, c)
    return None


def synthesize_negative(
    points: PointSet,
    sigma: float,
    rng_seed: int,
    min_dist: float = 15.0,
    mode: PerturbationMode | None = None,
) -> tuple[Heatmap, PointSet, NegativePerturbation]:
    """Perturb one Gaussian of the positive heatmap for ``points``.

    Picks uniformly among the applicable modes (ADD always; REMOVE/SHIFT only
    when points exist) unless ``mode`` forces one. ADD/SHIFT destinations are
    rejection-sampled to sit at least ``min_dist`` pixels from every original
    centroid; if no site is found within the attempt budget the perturbation
    falls back to REMOVE. Deterministic given ``rng_seed``.
    """
    gen = np.random.Generator(np.random.PCG64(rng_seed))
    applicable = [PerturbationMode.ADD]
    if len(points):
        applicable += [PerturbationMode.REMOVE, PerturbationMode.SHIFT]
    if mode is None:
        mode = applicable[int(gen.integers(0, len(applicable)))]
    elif mode not in applicable:
        raise ValueError(f"mode {mode.value} not applicable to {len(points)} points")

    arr = points.to_array()

    def _remove() -> tuple[PointSet, NegativePerturbation]:
        idx = int(gen.integers(0, len(points)))
        removed = points.points[idx]
        rest = points.points[:idx] + points.points[idx + 1:]
        return (
            PointSet(points=rest, patch_shape=points.patch_shape),
            NegativePerturbation(PerturbationMode.REMOVE, removed),
        )

    if mode is PerturbationMode.ADD:
        site = _sample_distant_site(gen, points.patch_shape, arr, min_dist)
        if site is None:
            new_points, perturbation = _remove()
        else:
            new_points = PointSet(points=points.points + (site,),
                                  patch_shape=points.patch_shape)
            perturbation = NegativePerturbation(PerturbationMode.ADD, site)
    elif mode is PerturbationMode.REMOVE:
        new_points, perturbation = _remove()
    else:  # SHIFT
        idx = int(gen.integers(0, len(points)))
        site = _sample_distant_site(gen, points.patch_shape, arr, min_dist)
        if site is None:
            new_points, perturbation = _remove()
        else:
            moved = points.points[idx]
            rest = points.points[:idx] + points.points[idx + 1:]
            new_points = PointSet(points=rest + (site,),
                                  patch_shape=points.patch_shape)
            perturbation = NegativePerturbation(
                PerturbationMode.SHIFT,
                moved,
                shift_vector=(site[0] - moved[0], site[1] - moved[1]),
            )

    negative = generate_heatmap(new_points, sigma, DEFAULT_AMPLITUDE)
    return negative, new_points, perturbation


# ---------------------------------------------------------------------------
# serialization


def write_points_csv(points: PointSet, path: str | Path) -> None:
    """Write a point set as CSV with header ``row,col``."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "col"])
        for r, c in points.points:
            writer.writerow([repr(r), repr(c)])


def read_points_csv(path: str | Path, patch_shape: tuple[int, int]) -> PointSet:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["row", "col"]:
            raise ValueError(f"{path}: expected header 'row,col', got {header}")
        pts = tuple((float(row[0]), float(row[1])) for row in reader if row)
    return PointSet(points=pts, patch_shape=patch_shape)


def write_heatmap(h: Heatmap, path: str | Path) -> None:
    """Lossless serialization (``.npz`` with values and sigma) for exact round trips."""
    np.savez(path, values=h.values, sigma=np.float64(h.sigma))


def read_heatmap(path: str | Path) -> Heatmap:
    with np.load(path, allow_pickle=False) as data:
        return Heatmap(values=data["values"], sigma=float(data["sigma"]))


def write_heatmap_png(h: Heatmap, path: str | Path) -> None:
    """8-bit grayscale rendering (values rounded) for visualization."""
    img = np.clip(np.rint(h.values), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
