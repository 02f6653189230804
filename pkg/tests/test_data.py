"""Patch extraction, normalization, synthetic generation, dataset IO."""

import dataclasses

import numpy as np
import pytest
from PIL import Image

from celladapt.data import (
    AnnotatedImage,
    DataError,
    Domain,
    GenerationError,
    SyntheticDomainSpec,
    elongated_spec,
    extract_patches,
    generate_synthetic_dataset,
    load_annotations,
    load_dataset,
    normalize,
    round_spec,
    sample_labeled_patches,
    write_dataset,
)

from conftest import tiny_round_spec


# ---------------------------------------------------------------------------
# normalize


def test_normalize_full_range():
    img = np.array([[0.0, 65535.0]])
    out = normalize(img)
    assert out.min() == 0.0 and out.max() == 255.0


def test_normalize_constant_image_is_zero():
    out = normalize(np.full((4, 4), 77.0))
    assert np.all(out == 0.0)


def test_normalize_affine_values():
    out = normalize(np.array([10.0, 20.0, 30.0]))
    np.testing.assert_allclose(out, [0.0, 127.5, 255.0])


def test_normalize_rejects_nan():
    with pytest.raises(DataError):
        normalize(np.array([1.0, np.nan]))


# ---------------------------------------------------------------------------
# extract_patches


def frame(h, w, centroids=(), idx=0):
    return AnnotatedImage(image=np.zeros((h, w)), centroids=tuple(centroids),
                          condition="t", frame_index=idx)


def test_exact_tiling():
    out = extract_patches(frame(256, 256), size=128, stride=128)
    assert len(out) == 4


def test_centroid_lands_in_correct_patch_with_local_coords():
    out = extract_patches(frame(256, 256, [(130.0, 5.0)]), size=128, stride=128)
    carriers = [(p.source_id, pts.points) for p, pts in out if len(pts)]
    assert carriers == [("t0000_r128_c0", ((2.0, 5.0),))]


def test_c2c12_frame_gives_9_by_11_grid():
    out = extract_patches(frame(1040, 1392), size=128, stride=128)
    assert len(out) == 9 * 11


def test_edge_anchored_remainder_windows():
    out = extract_patches(frame(200, 128), size=128, stride=128)
    origins = sorted(p.source_id for p, _ in out)
    assert origins == ["t0000_r0_c0", "t0000_r72_c0"]


def test_local_to_global_round_trip():
    rng = np.random.default_rng(0)
    centroids = [(float(rng.uniform(0, 300)), float(rng.uniform(0, 300)))
                 for _ in range(30)]
    img = frame(300, 300, centroids)
    recovered = set()
    for patch, pts in extract_patches(img, size=128, stride=64):
        _, r_part, c_part = patch.source_id.split("_r")[0], *patch.source_id.split("_")[1:]
        r0, c0 = int(r_part[1:]), int(c_part[1:])
        for r, c in pts.points:
            recovered.add((r + r0, c + c0))
    assert recovered == set(centroids)


def test_patch_larger_than_image_rejected():
    with pytest.raises(ValueError):
        extract_patches(frame(64, 64), size=128)


# ---------------------------------------------------------------------------
# synthetic generator


def test_generator_deterministic():
    a = generate_synthetic_dataset(round_spec(), 4, seed=5)
    b = generate_synthetic_dataset(round_spec(), 4, seed=5)
    for (pa, ga), (pb, gb) in zip(a, b):
        np.testing.assert_array_equal(pa.pixels, pb.pixels)
        assert ga.points == gb.points


def test_generator_centroid_constraints():
    for patch, pts in generate_synthetic_dataset(round_spec(), 10, seed=6):
        arr = pts.to_array()
        for i in range(len(arr)):
            for j in range(i + 1, len(arr)):
                assert np.hypot(*(arr[i] - arr[j])) >= 8.0


def blob_aspect_ratio(pixels, background):
    """Second-moment aspect ratio of the dark interior of a single blob."""
    mask = pixels < background - 10.0
    rows, cols = np.nonzero(mask)
    rows = rows - rows.mean()
    cols = cols - cols.mean()
    cov = np.cov(np.stack([rows, cols]))
    eigvals = np.sort(np.linalg.eigvalsh(cov))
    return float(np.sqrt(eigvals[1] / eigvals[0]))


def test_forced_eccentricity_four_measured_by_moments():
    spec = dataclasses.replace(
        elongated_spec(),
        eccentricity=(4.0, 4.0),
        radius=(4.0, 4.0),
        cells_per_patch=(1, 1),
        empty_fraction=0.0,
        noise_sigma=0.0,
        halo_amplitude=(40.0, 40.0),
        interior_depth=(40.0, 40.0),
    )
    ratios = [
        blob_aspect_ratio(patch.pixels, spec.background)
        for patch, _ in generate_synthetic_dataset(spec, 20, seed=8)
    ]
    assert 3.5 <= np.mean(ratios) <= 4.5


def test_round_vs_elongated_separable_by_shape_statistic():
    one_cell = dict(cells_per_patch=(1, 1), empty_fraction=0.0, noise_sigma=2.0)
    round_pairs = generate_synthetic_dataset(
        dataclasses.replace(round_spec(), **one_cell), 50, seed=9)
    elong_pairs = generate_synthetic_dataset(
        dataclasses.replace(elongated_spec(), **one_cell,
                            halo_amplitude=(30.0, 48.0),
                            interior_depth=(25.0, 38.0)), 50, seed=10)
    cutoff = 1.7
    correct = sum(blob_aspect_ratio(p.pixels, 120.0) < cutoff for p, _ in round_pairs)
    correct += sum(blob_aspect_ratio(p.pixels, 120.0) >= cutoff for p, _ in elong_pairs)
    assert correct / 100 >= 0.95


def test_infeasible_placement_raises():
    spec = dataclasses.replace(round_spec(), cells_per_patch=(40, 40),
                               empty_fraction=0.0)
    with pytest.raises(GenerationError):
        generate_synthetic_dataset(spec, 1, seed=0, size=48)


def test_sample_labeled_patches_requires_cells():
    pairs = generate_synthetic_dataset(
        dataclasses.replace(tiny_round_spec(), empty_fraction=0.5), 40,
        seed=11, size=32)
    picked = sample_labeled_patches(pairs, 10, seed=1)
    assert len(picked) == 10
    assert all(len(pts) >= 1 for _, pts in picked)
    with pytest.raises(DataError):
        sample_labeled_patches(pairs, 40, seed=1)


# ---------------------------------------------------------------------------
# dataset directory round trip


def test_dataset_write_load_round_trip(tmp_path):
    pairs = generate_synthetic_dataset(tiny_round_spec(), 5, seed=12, size=32)
    write_dataset(tmp_path / "ds", pairs, spec=tiny_round_spec(), seed=12)
    back = load_dataset(tmp_path / "ds", domain_tag=Domain.TARGET)
    assert [p.source_id for p, _ in back] == [p.source_id for p, _ in pairs]
    for (pa, ga), (pb, gb) in zip(pairs, back):
        assert pb.domain_tag is Domain.TARGET
        assert ga.points == gb.points
        # PNG quantizes to uint8; values must round-trip within 0.5
        assert np.abs(pa.pixels - pb.pixels).max() <= 0.5


def test_load_dataset_without_manifest_rejected(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


# ---------------------------------------------------------------------------
# annotation CSV loading


def write_frame_png(path, shape=(64, 64)):
    Image.fromarray(np.zeros(shape, dtype=np.uint8), mode="L").save(path)


def test_load_annotations_groups_by_frame(tmp_path):
    write_frame_png(tmp_path / "frame_0.png")
    csv_path = tmp_path / "ann.csv"
    csv_path.write_text("frame,row,col\n0,10,20\n0,30.5,40\n")
    images = load_annotations(csv_path)
    assert len(images) == 1
    assert images[0].centroids == ((10.0, 20.0), (30.5, 40.0))


def test_load_annotations_malformed_row_reports_line(tmp_path):
    write_frame_png(tmp_path / "frame_0.png")
    csv_path = tmp_path / "ann.csv"
    csv_path.write_text("frame,row,col\n0,10,20\n0,oops,40\n")
    with pytest.raises(DataError, match=":3"):
        load_annotations(csv_path)


def test_load_annotations_out_of_bounds_reports_line(tmp_path):
    write_frame_png(tmp_path / "frame_0.png", shape=(32, 32))
    csv_path = tmp_path / "ann.csv"
    csv_path.write_text("frame,row,col\n0,10,20\n0,99,1\n")
    with pytest.raises(DataError, match=":3"):
        load_annotations(csv_path)


def test_load_annotations_missing_image(tmp_path):
    csv_path = tmp_path / "ann.csv"
    csv_path.write_text("frame,row,col\n7,10,20\n")
    with pytest.raises(DataError, match="frame_7"):
        load_annotations(csv_path)


def test_annotated_frames_yield_24_labeled_source_patches(tmp_path):
    # full-frame export -> patches -> seeded 24-patch labeled sample
    rng = np.random.default_rng(2)
    shape = (400, 400)
    centroids = []
    while len(centroids) < 60:
        r, c = rng.uniform(10, 390), rng.uniform(10, 390)
        if all(np.hypot(r - cr, c - cc) >= 12 for cr, cc in centroids):
            centroids.append((float(round(r)), float(round(c))))
    img = AnnotatedImage(image=np.zeros(shape), centroids=tuple(centroids))
    pairs = extract_patches(img, size=128, stride=64)
    labeled = sample_labeled_patches(pairs, 24, seed=4)
    assert len(labeled) == 24
    assert all(len(pts) >= 1 for _, pts in labeled)
