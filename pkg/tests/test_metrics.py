"""Overlap and surface metrics pinned to hand-computed fixtures and checked
against the pairwise/BFS oracles on random small grids."""

from __future__ import annotations

import json

import numpy as np
import pytest

from brainorch.errors import GridMismatch
from brainorch.metrics import (
    compute_metric_report,
    connected_components,
    dice,
    hausdorff,
    lesionwise_dice,
    nsd,
    surface_voxels,
)
from brainorch.registry import Label

import oracles


def cube(shape, lo, hi):
    out = np.zeros(shape, dtype=bool)
    out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    return out


def random_mask(seed, shape=(6, 6, 6), density=0.35):
    rng = np.random.default_rng(seed)
    return rng.random(shape) < density


# -- dice ---------------------------------------------------------------------


def test_dice_half_overlap_fixture():
    a = cube((6, 6, 6), (0, 0, 0), (2, 2, 2))  # 8 voxels
    b = cube((6, 6, 6), (1, 0, 0), (3, 2, 2))  # 8 voxels, 4 shared
    assert dice(a, b) == 0.5


def test_dice_identical_masks():
    a = cube((5, 5, 5), (1, 1, 1), (4, 4, 4))
    assert dice(a, a) == 1.0


def test_dice_empty_conventions():
    empty = np.zeros((4, 4, 4), dtype=bool)
    full = cube((4, 4, 4), (0, 0, 0), (2, 2, 2))
    assert dice(empty, empty) == 1.0
    assert dice(empty, full) == 0.0
    assert dice(full, empty) == 0.0


@pytest.mark.parametrize("seed", range(6))
def test_dice_matches_counting_oracle(seed):
    a = random_mask(seed)
    b = random_mask(seed + 100)
    assert dice(a, b) == pytest.approx(oracles.brute_dice(a, b), abs=1e-12)


# -- surfaces -------------------------------------------------------------


def test_surface_of_solid_cube():
    mask = cube((8, 8, 8), (2, 2, 2), (6, 6, 6))  # 4^3 cube
    surf = surface_voxels(mask)
    assert surf.sum() == 64 - 8  # all but the 2^3 interior


def test_grid_edge_counts_as_surface():
    mask = np.ones((3, 3, 3), dtype=bool)
    surf = surface_voxels(mask)
    assert surf.sum() == 26  # only the very center voxel is interior


@pytest.mark.parametrize("seed", range(6))
def test_surface_matches_oracle(seed):
    mask = random_mask(seed)
    expected = np.zeros_like(mask)
    for idx in oracles.brute_surface(mask):
        expected[idx] = True
    np.testing.assert_array_equal(surface_voxels(mask), expected)


# -- hausdorff ------------------------------------------------------------


def test_hausdorff_two_points_three_apart():
    a = np.zeros((8, 4, 4), dtype=bool)
    b = np.zeros((8, 4, 4), dtype=bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert hausdorff(a, b, (1.0, 1.0, 1.0)) == pytest.approx(3.0)
    assert hausdorff(a, b, (1.0, 1.0, 1.0), percentile=100) == pytest.approx(3.0)


def test_hausdorff_respects_anisotropic_spacing():
    a = np.zeros((8, 4, 4), dtype=bool)
    b = np.zeros((8, 4, 4), dtype=bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert hausdorff(a, b, (2.0, 1.0, 1.0)) == pytest.approx(6.0)


def test_hausdorff_identical_masks_is_zero():
    a = cube((6, 6, 6), (1, 1, 1), (4, 4, 4))
    assert hausdorff(a, a, (1.0, 1.0, 1.0)) == 0.0


def test_hausdorff_empty_is_undefined():
    empty = np.zeros((4, 4, 4), dtype=bool)
    full = cube((4, 4, 4), (0, 0, 0), (2, 2, 2))
    assert hausdorff(empty, full, (1, 1, 1)) is None
    assert hausdorff(full, empty, (1, 1, 1)) is None
    assert hausdorff(empty, empty, (1, 1, 1)) is None


def test_hausdorff_percentile_bounds():
    a = cube((4, 4, 4), (0, 0, 0), (2, 2, 2))
    with pytest.raises(ValueError):
        hausdorff(a, a, (1, 1, 1), percentile=0)
    with pytest.raises(ValueError):
        hausdorff(a, a, (1, 1, 1), percentile=101)


@pytest.mark.parametrize("seed", range(5))
def test_hausdorff_nondecreasing_in_percentile(seed):
    a = random_mask(seed) | cube((6, 6, 6), (0, 0, 0), (1, 1, 1))
    b = random_mask(seed + 50) | cube((6, 6, 6), (5, 5, 5), (6, 6, 6))
    values = [hausdorff(a, b, (1, 1, 1), percentile=p) for p in (25, 50, 75, 95, 100)]
    assert all(lo <= hi + 1e-12 for lo, hi in zip(values, values[1:]))


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("percentile", [50.0, 95.0, 100.0])
def test_hausdorff_matches_pairwise_oracle(seed, percentile):
    a = random_mask(seed)
    b = random_mask(seed + 31)
    if not a.any() or not b.any():
        pytest.skip("degenerate draw")
    spacing = (1.0, 0.8, 1.5)
    got = hausdorff(a, b, spacing, percentile=percentile)
    want = oracles.brute_hausdorff(a, b, spacing, percentile)
    assert got == pytest.approx(want, abs=1e-9)


# -- nsd -------------------------------------------------------------------


def test_nsd_fixture_offset_cubes():
    a = cube((6, 6, 6), (0, 0, 0), (2, 2, 2))
    b = cube((6, 6, 6), (1, 0, 0), (3, 2, 2))
    assert nsd(a, b, (1, 1, 1), tolerance_mm=1.0) == pytest.approx(1.0)
    assert nsd(a, b, (1, 1, 1), tolerance_mm=0.5) == pytest.approx(0.5)


def test_nsd_empty_conventions():
    empty = np.zeros((4, 4, 4), dtype=bool)
    full = cube((4, 4, 4), (0, 0, 0), (2, 2, 2))
    assert nsd(empty, empty, (1, 1, 1)) == 1.0
    assert nsd(empty, full, (1, 1, 1)) == 0.0
    assert nsd(full, empty, (1, 1, 1)) == 0.0


def test_nsd_rejects_negative_tolerance():
    a = cube((4, 4, 4), (0, 0, 0), (2, 2, 2))
    with pytest.raises(ValueError):
        nsd(a, a, (1, 1, 1), tolerance_mm=-0.1)


@pytest.mark.parametrize("seed", range(5))
def test_nsd_nondecreasing_in_tolerance(seed):
    a = random_mask(seed) | cube((6, 6, 6), (0, 0, 0), (1, 1, 1))
    b = random_mask(seed + 77) | cube((6, 6, 6), (5, 5, 5), (6, 6, 6))
    values = [nsd(a, b, (1, 1, 1), tolerance_mm=t) for t in (0.0, 0.5, 1.0, 2.0, 10.0)]
    assert all(lo <= hi + 1e-12 for lo, hi in zip(values, values[1:]))
    assert values[-1] == pytest.approx(1.0)  # every distance fits eventually


@pytest.mark.parametrize("seed", range(4))
def test_nsd_matches_pairwise_oracle(seed):
    a = random_mask(seed)
    b = random_mask(seed + 13)
    spacing = (1.0, 1.2, 0.7)
    got = nsd(a, b, spacing, tolerance_mm=1.0)
    want = oracles.brute_nsd(a, b, spacing, 1.0)
    assert got == pytest.approx(want, abs=1e-9)


# -- connected components ---------------------------------------------------


def test_component_ids_follow_scan_order():
    mask = np.zeros((7, 7, 7), dtype=bool)
    mask[5, 5, 5] = True  # last in scan order despite being set first
    mask[0, 0, 0] = True
    mask[0, 0, 3] = True
    cc = connected_components(mask, connectivity=6)
    assert cc.count == 3
    assert cc.component_map[0, 0, 0] == 1
    assert cc.component_map[0, 0, 3] == 2
    assert cc.component_map[5, 5, 5] == 3


def test_connectivity_semantics():
    plane_diag = np.zeros((3, 3, 3), dtype=bool)
    plane_diag[0, 0, 0] = plane_diag[1, 1, 0] = True  # share an edge
    assert connected_components(plane_diag, 6).count == 2
    assert connected_components(plane_diag, 18).count == 1
    assert connected_components(plane_diag, 26).count == 1

    corner_diag = np.zeros((3, 3, 3), dtype=bool)
    corner_diag[0, 0, 0] = corner_diag[1, 1, 1] = True  # share a corner only
    assert connected_components(corner_diag, 6).count == 2
    assert connected_components(corner_diag, 18).count == 2
    assert connected_components(corner_diag, 26).count == 1


def test_component_sizes_and_masks():
    mask = np.zeros((6, 6, 6), dtype=bool)
    mask[0:2, 0:2, 0:2] = True
    mask[4, 4, 4] = True
    cc = connected_components(mask)
    assert cc.sizes() == {1: 8, 2: 1}
    assert cc.component_mask(1).sum() == 8
    with pytest.raises(ValueError):
        cc.component_mask(3)


def test_empty_mask_has_no_components():
    cc = connected_components(np.zeros((4, 4, 4), dtype=bool))
    assert cc.count == 0
    assert cc.sizes() == {}


def test_invalid_connectivity_rejected():
    with pytest.raises(ValueError, match="connectivity"):
        connected_components(np.zeros((4, 4, 4), dtype=bool), connectivity=4)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_components_match_bfs_oracle(seed, connectivity):
    mask = random_mask(seed, density=0.4)
    cc = connected_components(mask, connectivity)
    expected = oracles.brute_components(mask, connectivity)
    assert cc.count == len(expected)
    for comp_id, voxels in enumerate(expected, start=1):
        got = {tuple(v) for v in np.argwhere(cc.component_map == comp_id)}
        assert got == voxels


# -- lesion-wise dice --------------------------------------------------------


def test_lesionwise_fixture_exact_match_plus_false_positive():
    ref = np.zeros((10, 10, 10), dtype=bool)
    ref[0:2, 0:2, 0:2] = True  # lesion 1, 8 voxels
    ref[7, 7, 7] = True  # lesion 2, 1 voxel
    pred = np.zeros_like(ref)
    pred[0:2, 0:2, 0:2] = True  # covers lesion 1 exactly
    pred[4, 9, 0] = True  # overlaps nothing
    report = lesionwise_dice(ref, pred)
    assert [e.dsc for e in report.entries] == [1.0, 0.0]
    assert [e.matched for e in report.entries] == [True, False]
    assert [e.size_voxels for e in report.entries] == [8, 1]
    assert report.false_positive_components == 1
    assert report.mean_dsc == pytest.approx(0.5)


def test_lesionwise_union_matching():
    ref = np.zeros((8, 8, 8), dtype=bool)
    ref[0:4, 0, 0] = True  # one 4-voxel lesion
    pred = np.zeros_like(ref)
    pred[0, 0, 0] = True
    pred[2, 0, 0] = True  # two separate components, both overlap the lesion
    report = lesionwise_dice(ref, pred, connectivity=6)
    assert len(report.entries) == 1
    assert report.entries[0].dsc == pytest.approx(2 * 2 / (4 + 2))
    assert report.false_positive_components == 0


def test_lesionwise_min_size_filter():
    ref = np.zeros((8, 8, 8), dtype=bool)
    ref[0:2, 0:2, 0:2] = True  # 8 voxels, kept
    ref[6, 6, 6] = True  # 1 voxel, filtered out
    pred = np.zeros_like(ref)
    pred[6, 6, 6] = True  # overlaps only the filtered lesion
    report = lesionwise_dice(ref, pred, min_lesion_voxels=2)
    assert len(report.entries) == 1
    assert report.entries[0].size_voxels == 8
    # the prediction component matched nothing that counts
    assert report.false_positive_components == 1


def test_lesionwise_empty_reference():
    ref = np.zeros((6, 6, 6), dtype=bool)
    pred = np.zeros_like(ref)
    pred[1, 1, 1] = True
    report = lesionwise_dice(ref, pred)
    assert report.entries == ()
    assert report.mean_dsc is None
    assert report.false_positive_components == 1


@pytest.mark.parametrize("seed", range(4))
def test_lesionwise_matches_oracle(seed):
    ref = random_mask(seed, density=0.2)
    pred = random_mask(seed + 500, density=0.2)
    report = lesionwise_dice(ref, pred, connectivity=26)
    rows, fps = oracles.brute_lesionwise(ref, pred, 26)
    assert [(e.size_voxels, e.matched) for e in report.entries] == [
        (size, matched) for size, _, matched in rows
    ]
    for entry, (_, dsc, _) in zip(report.entries, rows):
        assert entry.dsc == pytest.approx(dsc, abs=1e-12)
    assert report.false_positive_components == fps


# -- report assembly -----------------------------------------------------------


def test_metric_report_shape_and_json():
    labels = (Label(1, "NETC"), Label(3, "ET"))
    ref = np.zeros((8, 8, 8), dtype=np.uint8)
    pred = np.zeros_like(ref)
    ref[0:2, 0:2, 0:2] = 1
    pred[0:2, 0:2, 0:2] = 1
    ref[5:7, 5:7, 5:7] = 3
    pred[5:7, 5:7, 6:8] = 3
    report = compute_metric_report(ref, pred, labels, spacing=(1.0, 1.0, 1.0))
    assert set(report.per_label) == {"NETC", "ET"}
    assert report.per_label["NETC"].dsc == 1.0
    assert report.per_label["NETC"].hd_mm == 0.0
    assert report.per_label["ET"].dsc == pytest.approx(0.5)
    doc = json.loads(json.dumps(report.to_json_dict()))
    assert doc["per_label"]["ET"]["hd95_mm"] is not None
    assert "hd95_mm" in doc["per_label"]["NETC"]
    assert doc["lesionwise"]["false_positive_components"] == 0
    assert doc["spacing_mm"] == [1.0, 1.0, 1.0]


def test_metric_report_absent_label_conventions():
    labels = (Label(2, "SNFH"),)
    ref = np.zeros((6, 6, 6), dtype=np.uint8)
    pred = np.zeros_like(ref)
    report = compute_metric_report(ref, pred, labels, spacing=(1.0, 1.0, 1.0))
    metrics = report.per_label["SNFH"]
    assert metrics.dsc == 1.0
    assert metrics.hd_mm is None
    assert metrics.nsd == 1.0


def test_metric_report_grid_mismatch():
    with pytest.raises(GridMismatch):
        compute_metric_report(
            np.zeros((4, 4, 4), dtype=np.uint8),
            np.zeros((4, 4, 5), dtype=np.uint8),
            (Label(1, "NETC"),),
            spacing=(1, 1, 1),
        )
