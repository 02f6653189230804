"""Dataset ingestion, patch extraction, and the synthetic domain-shift generator.

Real data enters as full-frame grayscale images with centroid annotations in
a ``frame,row,col`` CSV; frames are min-max normalized to [0, 255] and tiled
into 128 x 128 patches by a sliding window (the last window per axis is
anchored at the image edge).

The synthetic generator renders phase-contrast-looking blob cells (dark
interior, bright halo) with exact centroid ground truth. Two presets, ROUND
and ELONGATED, stand in for the culture-condition shifts of the real data:
a detector trained on one sees a genuine appearance shift on the other.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .heatmap import Heatmap, PointSet, read_points_csv, write_points_csv
from .seeds import rng as seeded_rng


class DataError(Exception):
    """Malformed or inconsistent input data."""


class GenerationError(DataError):
    """Synthetic generation could not satisfy its placement constraints."""


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Origin(enum.Enum):
    ANNOTATED = "annotated"
    PSEUDO = "pseudo"


@dataclass(frozen=True)
class Patch:
    """One grayscale window, values in [0, 255]."""

    pixels: np.ndarray
    source_id: str
    domain_tag: Domain = Domain.SOURCE

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"patch must be 2-D, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise DataError(f"patch {self.source_id}: non-finite pixels")
        if px.min() < 0 or px.max() > 255:
            raise ValueError(f"patch {self.source_id}: pixels outside [0, 255]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LabeledSample:
    """A patch paired with its (true or pseudo) cell-position heatmap.

    ``points`` optionally keeps the centroids the heatmap was rendered from,
    which downstream negative synthesis perturbs.
    """

    patch: Patch
    heatmap: Heatmap
    origin: Origin = Origin.ANNOTATED
    iteration_added: int = 0
    points: PointSet | None = None

    def __post_init__(self):
        if self.patch.shape != self.heatmap.shape:
            raise ValueError(
                f"{self.patch.source_id}: heatmap shape {self.heatmap.shape} "
                f"!= patch shape {self.patch.shape}"
            )
        if self.points is not None and self.points.patch_shape != self.patch.shape:
            raise ValueError(
                f"{self.patch.source_id}: point set shape {self.points.patch_shape} "
                f"!= patch shape {self.patch.shape}"
            )


@dataclass(frozen=True)
class AnnotatedImage:
    """Full-frame grayscale image with centroid annotations."""

    image: np.ndarray
    centroids: tuple[tuple[float, float], ...]
    condition: str = ""
    frame_index: int = 0

    def __post_init__(self):
        img = np.asarray(self.image)
        h, w = img.shape
        for r, c in self.centroids:
            if not (0 <= r < h and 0 <= c < w):
                raise DataError(
                    f"frame {self.frame_index}: centroid ({r}, {c}) outside {h}x{w}"
                )


def normalize(image: np.ndarray) -> np.ndarray:
    """Affine min-max rescale to [0, 255]; constant images map to all zeros."""
    img = np.asarray(image, dtype=np.float64)
    if np.any(np.isnan(img)):
        raise DataError("image contains NaN")
    lo, hi = img.min(), img.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise DataError("image contains infinite values")
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) * (255.0 / (hi - lo))


def _window_origins(dim: int, size: int, stride: int) -> list[int]:
    origins = list(range(0, dim - size + 1, stride))
    if origins[-1] != dim - size:
        origins.append(dim - size)  # anchor the last window at the edge
    return origins


def extract_patches(
    img: AnnotatedImage,
    size: int = 128,
    stride: int | None = None,
    domain_tag: Domain = Domain.SOURCE,
) -> list[tuple[Patch, PointSet]]:
    """Tile a frame into patches; each carries the centroids inside it.

    A centroid belongs to every window containing its integer pixel and is
    re-expressed in patch-local coordinates.
    """
    if stride is None:
        stride = size
    h, w = img.image.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image dims {h}x{w}")
    out = []
    for r0 in _window_origins(h, size, stride):
        for c0 in _window_origins(w, size, stride):
            local = tuple(
                (r - r0, c - c0)
                for r, c in img.centroids
                if r0 <= int(r) < r0 + size and c0 <= int(c) < c0 + size
            )
            patch = Patch(
                pixels=img.image[r0:r0 + size, c0:c0 + size],
                source_id=f"{img.condition or 'frame'}{img.frame_index:04d}_r{r0}_c{c0}",
                domain_tag=domain_tag,
            )
            out.append((patch, PointSet(points=local, patch_shape=(size, size))))
    return out


def load_annotations(csv_path: str | Path) -> list[AnnotatedImage]:
    """Load ``frame,row,col`` annotations and bind them to ``frame_{index}.png``.

    Image files are looked up next to the CSV. Malformed rows and
    out-of-bounds centroids are rejected with their line number.
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"annotation file not found: {csv_path}")
    by_frame: dict[int, list[tuple[float, float]]] = {}
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "row", "col"]:
            raise DataError(f"{csv_path}: expected header 'frame,row,col', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                frame, r, c = int(row[0]), float(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{csv_path}:{lineno}: malformed row {row}") from exc
            by_frame.setdefault(frame, []).append((r, c))

    images = []
    for frame in sorted(by_frame):
        img_path = csv_path.parent / f"frame_{frame}.png"
        if not img_path.exists():
            raise DataError(f"missing image file {img_path} for frame {frame}")
        pixels = np.asarray(Image.open(img_path), dtype=np.float64)
        h, w = pixels.shape
        for r, c in by_frame[frame]:
            if not (0 <= r < h and 0 <= c < w):
                lineno = _find_line(csv_path, frame, r, c)
                raise DataError(
                    f"{csv_path}:{lineno}: centroid ({r}, {c}) outside frame {frame} ({h}x{w})"
                )
        images.append(
            AnnotatedImage(
                image=pixels,
                centroids=tuple(by_frame[frame]),
                condition=csv_path.stem,
                frame_index=frame,
            )
        )
    return images


def _find_line(csv_path: Path, frame: int, r: float, c: float) -> int:
    with open(csv_path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if lineno == 1 or not row:
                continue
            try:
                if int(row[0]) == frame and float(row[1]) == r and float(row[2]) == c:
                    return lineno
            except (ValueError, IndexError):
                continue
    return -1


# ---------------------------------------------------------------------------
# synthetic domain generator


class CellShape(enum.Enum):
    ROUND = "round"
    ELONGATED = "elongated"


_RANGE_FIELDS = ("eccentricity", "radius", "cells_per_patch",
                 "halo_amplitude", "interior_depth")


@dataclass
class SyntheticDomainSpec:
    """Parameters of one synthetic imaging condition.

    Range fields are sampled per cell (uniformly), so a condition is a
    distribution over appearances; overlapping ranges between two conditions
    give the partial domain overlap that self-training relies on.
    """

    cell_shape: CellShape = CellShape.ROUND
    eccentricity: tuple[float, float] = (1.0, 1.35)
    radius: tuple[float, float] = (5.0, 8.0)  # minor-axis radius, px
    cells_per_patch: tuple[int, int] = (1, 6)
    empty_fraction: float = 0.05
    halo_amplitude: tuple[float, float] = (55.0, 85.0)
    interior_depth: tuple[float, float] = (40.0, 65.0)
    background: float = 120.0
    noise_sigma: float = 5.0
    min_separation: float = 8.0
    border_margin: float = 10.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cell_shape"] = self.cell_shape.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDomainSpec":
        d = dict(d)
        shape = d.pop("cell_shape", "round")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        for key in _RANGE_FIELDS:
            if key in d:
                d[key] = tuple(d[key])
        return cls(cell_shape=CellShape(shape), **d)


def round_spec(seed: int = 0) -> SyntheticDomainSpec:
    """Source-like condition: round, high-contrast cells."""
    return SyntheticDomainSpec(cell_shape=CellShape.ROUND, seed=seed)


def elongated_spec(seed: int = 0) -> SyntheticDomainSpec:
    """Target-like condition: elongated cells over a wider, weaker contrast
    range whose upper end touches the source condition."""
    return SyntheticDomainSpec(
        cell_shape=CellShape.ELONGATED,
        eccentricity=(2.2, 4.2),
        radius=(3.0, 5.0),
        halo_amplitude=(10.0, 48.0),
        interior_depth=(8.0, 38.0),
        seed=seed,
    )


def _place_centroids(
    gen: np.random.Generator, n: int, size: int, spec: SyntheticDomainSpec
) -> list[tuple[float, float]]:
    margin = spec.border_margin
    pts: list[tuple[float, float]] = []
    for _ in range(n):
        for _attempt in range(2000):
            r = float(np.round(gen.uniform(margin, size - margin)))
            c = float(np.round(gen.uniform(margin, size - margin)))
            if all(np.hypot(r - pr, c - pc) >= spec.min_separation for pr, pc in pts):
                pts.append((r, c))
                break
        else:
            raise GenerationError(
                f"could not place {n} cells with separation {spec.min_separation} "
                f"in a {size}x{size} patch"
            )
    return pts


def _render_cell(
    canvas: np.ndarray, r: float, c: float, a: float, b: float, theta: float,
    halo: float, depth: float,
) -> None:
    """Add one phase-contrast blob: dark interior, bright rim just outside."""
    h, w = canvas.shape
    reach = int(np.ceil(a + 6))
    r0, r1 = max(0, int(r) - reach), min(h, int(r) + reach + 1)
    c0, c1 = max(0, int(c) - reach), min(w, int(c) + reach + 1)
    rows = np.arange(r0, r1, dtype=np.float64)[:, None] - r
    cols = np.arange(c0, c1, dtype=np.float64)[None, :] - c
    u = (rows * np.cos(theta) + cols * np.sin(theta)) / a
    v = (-rows * np.sin(theta) + cols * np.cos(theta)) / b
    q = np.sqrt(u * u + v * v)  # normalized radius, 1.0 at the boundary
    interior = -depth * np.exp(-((q / 0.8) ** 4))
    ring = halo * np.exp(-(((q - 1.25) / 0.28) ** 2))
    canvas[r0:r1, c0:c1] += interior + ring


def generate_synthetic_patch(
    spec: SyntheticDomainSpec,
    gen: np.random.Generator,
    size: int = 128,
    source_id: str = "synth",
    domain_tag: Domain = Domain.SOURCE,
) -> tuple[Patch, PointSet]:
    """Render one patch with exact centroid ground truth."""
    if gen.uniform() < spec.empty_fraction:
        n = 0
    else:
        lo, hi = spec.cells_per_patch
        n = int(gen.integers(lo, hi + 1))
    pts = _place_centroids(gen, n, size, spec)
    canvas = np.full((size, size), spec.background, dtype=np.float64)
    for r, c in pts:
        ecc = gen.uniform(*spec.eccentricity)
        b = gen.uniform(*spec.radius)
        a = b * ecc
        theta = gen.uniform(0, np.pi)
        halo = gen.uniform(*spec.halo_amplitude)
        depth = gen.uniform(*spec.interior_depth)
        _render_cell(canvas, r, c, a, b, theta, halo, depth)
    if spec.noise_sigma > 0:
        canvas += gen.normal(0.0, spec.noise_sigma, size=canvas.shape)
    np.clip(canvas, 0, 255, out=canvas)
    patch = Patch(pixels=canvas, source_id=source_id, domain_tag=domain_tag)
    return patch, PointSet(points=tuple(pts), patch_shape=(size, size))


def generate_synthetic_dataset(
    spec: SyntheticDomainSpec,
    n_patches: int,
    seed: int | None = None,
    size: int = 128,
    id_prefix: str | None = None,
    domain_tag: Domain = Domain.SOURCE,
) -> list[tuple[Patch, PointSet]]:
    """Render ``n_patches`` patches; deterministic given spec and seed."""
    if n_patches < 1:
        raise ValueError(f"n_patches must be >= 1, got {n_patches}")
    if seed is None:
        seed = spec.seed
    prefix = id_prefix or spec.cell_shape.value
    gen = seeded_rng(seed, "synth", prefix)
    return [
        generate_synthetic_patch(
            spec, gen, size=size, source_id=f"{prefix}_{i:05d}", domain_tag=domain_tag
        )
        for i in range(n_patches)
    ]


def sample_labeled_patches(
    pairs: list[tuple[Patch, PointSet]], n: int, seed: int
) -> list[tuple[Patch, PointSet]]:
    """Uniform seeded sample of ``n`` patches that contain at least one cell."""
    eligible = [p for p in pairs if len(p[1]) >= 1]
    if len(eligible) < n:
        raise DataError(f"only {len(eligible)} patches with cells, need {n}")
    gen = seeded_rng(seed, "labeled-sample")
    idx = gen.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in sorted(idx)]


# ---------------------------------------------------------------------------
# dataset directory layout: manifest.json + patches/*.png + points/*.csv


def write_dataset(
    out_dir: str | Path,
    pairs: list[tuple[Patch, PointSet]],
    spec: SyntheticDomainSpec | None = None,
    seed: int | None = None,
) -> None:
    """Write patches as 8-bit PNGs plus per-patch ground-truth CSVs and a manifest."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "points").mkdir(parents=True, exist_ok=True)
    entries = []
    for patch, points in pairs:
        img = np.clip(np.rint(patch.pixels), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(out / "patches" / f"{patch.source_id}.png")
        write_points_csv(points, out / "points" / f"{patch.source_id}.csv")
        entries.append(
            {
                "id": patch.source_id,
                "patch": f"patches/{patch.source_id}.png",
                "points": f"points/{patch.source_id}.csv",
                "n_cells": len(points),
            }
        )
    manifest = {
        "format": "celladapt-dataset-v1",
        "seed": seed,
        "spec": spec.to_dict() if spec is not None else None,
        "patches": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(
    data_dir: str | Path, domain_tag: Domain = Domain.SOURCE
) -> list[tuple[Patch, PointSet]]:
    """Load a dataset directory written by :func:`write_dataset`."""
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    pairs = []
    for entry in manifest["patches"]:
        img_path = root / entry["patch"]
        if not img_path.exists():
            raise DataError(f"missing patch image {img_path}")
        pixels = np.asarray(Image.open(img_path), dtype=np.float32)
        patch = Patch(pixels=pixels, source_id=entry["id"], domain_tag=domain_tag)
        points = read_points_csv(root / entry["points"], patch.shape)
        pairs.append((patch, points))
    return pairs
