"""Segmentation metrics: Dice, percentile Hausdorff, NSD, lesion-wise Dice.

All functions take binary numpy arrays on a shared voxel grid plus, where
physical distances matter, the voxel spacing in mm. Conventions are pinned
here once and shared by every caller:

- Two empty masks agree perfectly: DSC and NSD are 1.0. Hausdorff is
  undefined when either mask is empty and returns ``None``.
- A surface voxel is a foreground voxel with at least one background
  6-neighbor; positions outside the grid count as background, so foreground
  touching the grid edge is surface.
- Connected-component ids are assigned by first-voxel scan order
  (lexicographic (i, j, k)), independent of the labeling backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GridMismatch

CONNECTIVITIES = (6, 18, 26)
_STRUCT_RANK = {6: 1, 18: 2, 26: 3}

DEFAULT_HAUSDORFF_PERCENTILE = 95.0
DEFAULT_NSD_TOLERANCE_MM = 1.0
DEFAULT_CONNECTIVITY = 26


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3-D array, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def _check_same_grid(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise GridMismatch(f"masks live on different grids: {a.shape} vs {b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice-Sorensen coefficient of two binary masks.

    2|A n B| / (|A| + |B|); two empty masks score 1.0.
    """
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    _check_same_grid(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of foreground voxels with a background 6-neighbor."""
    mask = _as_bool(mask, "mask")
    if not mask.any():
        return np.zeros_like(mask)
    struct = ndimage.generate_binary_structure(3, 1)
    # border_value=0: outside the grid counts as background, so edge
    # foreground is surface.
    interior = ndimage.binary_erosion(mask, structure=struct, border_value=0)
    return mask & ~interior


def _spacing_array(spacing) -> np.ndarray:
    arr = np.asarray(spacing, dtype=np.float64)
    if arr.shape != (3,) or not np.all(arr > 0):
        raise ValueError(f"spacing must be 3 positive numbers, got {spacing!r}")
    return arr


def _surface_distances(from_mask: np.ndarray, to_mask: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance in mm from each surface voxel of ``from_mask`` to the
    nearest surface voxel of ``to_mask``."""
    to_surface = surface_voxels(to_mask)
    # EDT of the complement: each voxel gets its distance to the surface set.
    dist = ndimage.distance_transform_edt(~to_surface, sampling=spacing)
    return dist[surface_voxels(from_mask)]


def hausdorff(
    a: np.ndarray,
    b: np.ndarray,
    spacing,
    percentile: float = DEFAULT_HAUSDORFF_PERCENTILE,
) -> float | None:
    """Symmetric percentile Hausdorff distance between mask surfaces, in mm.

    Returns ``None`` when either mask is empty (the distance is undefined).
    ``percentile=100`` is the classic maximum Hausdorff distance.
    """
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    _check_same_grid(a, b)
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    if not a.any() or not b.any():
        return None
    sp = _spacing_array(spacing)
    d_ab = _surface_distances(a, b, sp)
    d_ba = _surface_distances(b, a, sp)
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def nsd(
    a: np.ndarray,
    b: np.ndarray,
    spacing,
    tolerance_mm: float = DEFAULT_NSD_TOLERANCE_MM,
) -> float:
    """Normalized surface distance: fraction of surface within tolerance.

    Computed in both directions and averaged. Two empty masks score 1.0; one
    empty mask scores 0.0.
    """
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    _check_same_grid(a, b)
    if tolerance_mm < 0:
        raise ValueError(f"tolerance_mm must be >= 0, got {tolerance_mm}")
    a_any, b_any = bool(a.any()), bool(b.any())
    if not a_any and not b_any:
        return 1.0
    if a_any != b_any:
        return 0.0
    sp = _spacing_array(spacing)
    d_ab = _surface_distances(a, b, sp)
    d_ba = _surface_distances(b, a, sp)
    frac_ab = float(np.mean(d_ab <= tolerance_mm))
    frac_ba = float(np.mean(d_ba <= tolerance_mm))
    return (frac_ab + frac_ba) / 2.0


@dataclass(frozen=True)
class ComponentLabeling:
    """Connected components with deterministic ids 1..count."""

    component_map: np.ndarray
    count: int
    connectivity: int

    def component_mask(self, component_id: int) -> np.ndarray:
        if not 1 <= component_id <= self.count:
            raise ValueError(f"component id {component_id} outside 1..{self.count}")
        return self.component_map == component_id

    def sizes(self) -> dict[int, int]:
        counts = np.bincount(self.component_map.ravel(), minlength=self.count + 1)
        return {cid: int(counts[cid]) for cid in range(1, self.count + 1)}


def connected_components(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentLabeling:
    """Label 3-D connected components under 6, 18, or 26 connectivity.

    Ids are renumbered so component 1 contains the first foreground voxel in
    scan order, component 2 the first voxel not in component 1, and so on.
    """
    mask = _as_bool(mask, "mask")
    if connectivity not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {connectivity}")
    struct = ndimage.generate_binary_structure(3, _STRUCT_RANK[connectivity])
    labeled, count = ndimage.label(mask, structure=struct)
    labeled = labeled.astype(np.int32, copy=False)
    if count:
        # The backend's id order is an implementation detail; renumber by
        # each component's first voxel in C scan order.
        flat = labeled.ravel(order="C")
        ids, first_index = np.unique(flat, return_index=True)
        keep = ids != 0
        order = ids[keep][np.argsort(first_index[keep], kind="stable")]
        remap = np.zeros(count + 1, dtype=np.int32)
        remap[order] = np.arange(1, count + 1, dtype=np.int32)
        labeled = remap[labeled]
    labeled.setflags(write=False)
    return ComponentLabeling(component_map=labeled, count=int(count), connectivity=connectivity)


@dataclass(frozen=True)
class LesionMatch:
    """Per-reference-lesion outcome of lesion-wise matching."""

    lesion_id: int
    size_voxels: int
    dsc: float
    matched: bool


@dataclass(frozen=True)
class LesionwiseReport:
    entries: tuple[LesionMatch, ...]
    false_positive_components: int
    connectivity: int
    min_lesion_voxels: int

    @property
    def mean_dsc(self) -> float | None:
        if not self.entries:
            return None
        return float(np.mean([e.dsc for e in self.entries]))

    def to_json_dict(self) -> dict:
        return {
            "connectivity": self.connectivity,
            "min_lesion_voxels": self.min_lesion_voxels,
            "lesions": [
                {
                    "lesion_id": e.lesion_id,
                    "size_voxels": e.size_voxels,
                    "dsc": e.dsc,
                    "matched": e.matched,
                }
                for e in self.entries
            ],
            "false_positive_components": self.false_positive_components,
            "mean_dsc": self.mean_dsc,
        }


def lesionwise_dice(
    reference: np.ndarray,
    prediction: np.ndarray,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_lesion_voxels: int = 0,
) -> LesionwiseReport:
    """Per-lesion Dice with overlap-union matching.

    Each reference lesion (connected component) is scored against the union
    of all prediction components that overlap it; an unmatched lesion scores
    0. Prediction components overlapping no counted lesion are tallied as
    false positives. Reference lesions below ``min_lesion_voxels`` are
    ignored entirely.
    """
    reference = _as_bool(reference, "reference")
    prediction = _as_bool(prediction, "prediction")
    _check_same_grid(reference, prediction)
    ref_cc = connected_components(reference, connectivity)
    pred_cc = connected_components(prediction, connectivity)

    entries: list[LesionMatch] = []
    matched_pred_ids: set[int] = set()
    for lesion_id in range(1, ref_cc.count + 1):
        lesion = ref_cc.component_mask(lesion_id)
        size = int(lesion.sum())
        if size < min_lesion_voxels:
            continue
        overlapping = set(np.unique(pred_cc.component_map[lesion])) - {0}
        overlapping_ids = {int(v) for v in overlapping}
        matched_pred_ids |= overlapping_ids
        if overlapping_ids:
            union = np.isin(pred_cc.component_map, sorted(overlapping_ids))
            entries.append(
                LesionMatch(lesion_id=lesion_id, size_voxels=size, dsc=dice(lesion, union), matched=True)
            )
        else:
            entries.append(LesionMatch(lesion_id=lesion_id, size_voxels=size, dsc=0.0, matched=False))

    false_positives = pred_cc.count - len(matched_pred_ids)
    return LesionwiseReport(
        entries=tuple(entries),
        false_positive_components=false_positives,
        connectivity=connectivity,
        min_lesion_voxels=min_lesion_voxels,
    )


@dataclass(frozen=True)
class LabelMetrics:
    dsc: float
    hd_mm: float | None
    nsd: float

    def to_json_dict(self) -> dict:
        return {"dsc": self.dsc, "hd95_mm": self.hd_mm, "nsd": self.nsd}


@dataclass(frozen=True)
class MetricReport:
    """Per-label overlap/surface metrics plus lesion-wise Dice on the
    whole-foreground masks."""

    per_label: dict[str, LabelMetrics] = field(default_factory=dict)
    lesionwise: LesionwiseReport | None = None
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def to_json_dict(self) -> dict:
        return {
            "spacing_mm": list(self.spacing_mm),
            "per_label": {name: m.to_json_dict() for name, m in self.per_label.items()},
            "lesionwise": self.lesionwise.to_json_dict() if self.lesionwise else None,
        }


def compute_metric_report(
    reference: np.ndarray,
    prediction: np.ndarray,
    labels,
    spacing,
    hausdorff_percentile: float = DEFAULT_HAUSDORFF_PERCENTILE,
    nsd_tolerance_mm: float = DEFAULT_NSD_TOLERANCE_MM,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_lesion_voxels: int = 0,
) -> MetricReport:
    """Score a multi-label prediction against a reference mask.

    ``labels`` is an iterable of objects with ``code`` and ``name`` (the
    registry's label type). Per-label metrics binarize on the code; the
    lesion-wise report runs on any-foreground masks.
    """
    reference = np.asarray(reference)
    prediction = np.asarray(prediction)
    if reference.shape != prediction.shape:
        raise GridMismatch(
            f"masks live on different grids: {reference.shape} vs {prediction.shape}"
        )
    sp = _spacing_array(spacing)
    per_label: dict[str, LabelMetrics] = {}
    for label in labels:
        ref_bin = reference == label.code
        pred_bin = prediction == label.code
        per_label[label.name] = LabelMetrics(
            dsc=dice(ref_bin, pred_bin),
            hd_mm=hausdorff(ref_bin, pred_bin, sp, percentile=hausdorff_percentile),
            nsd=nsd(ref_bin, pred_bin, sp, tolerance_mm=nsd_tolerance_mm),
        )
    report = lesionwise_dice(
        reference != 0, prediction != 0, connectivity=connectivity, min_lesion_voxels=min_lesion_voxels
    )
    return MetricReport(
        per_label=per_label,
        lesionwise=report,
        spacing_mm=(float(sp[0]), float(sp[1]), float(sp[2])),
    )
