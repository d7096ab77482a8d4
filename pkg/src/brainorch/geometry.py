"""Affine transforms between coordinate spaces, grid resampling, sidecars.

World coordinates are millimeters. Every transform carries source and target
space tags (``native``, ``SRI24``, ``MNI152``) so compositions and warps can
be checked instead of trusted. Transform sidecars are JSON files holding a
row-major 4x4 matrix plus the two tags; units are always mm.

Masks resample with nearest-neighbor lookup (labels never blend, voxels that
map outside the source grid become background), images with trilinear
interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateGrid,
    IoFailure,
    MalformedTransform,
    SingularTransform,
    SpaceMismatch,
)
from .nifti import Volume

SPACES = ("native", "SRI24", "MNI152")
ATLAS_SPACES = ("SRI24", "MNI152")

_DET_FLOOR = 1e-12


@dataclass(frozen=True)
class AffineTransform:
    """A 4x4 voxel-world affine map between two tagged spaces."""

    matrix: np.ndarray
    source_space: str
    target_space: str

    def __post_init__(self):
        for tag in (self.source_space, self.target_space):
            if tag not in SPACES:
                raise SpaceMismatch(f"unknown space tag {tag!r}; expected one of {SPACES}")
        matrix = np.array(self.matrix, dtype=np.float64, copy=True)
        if matrix.shape != (4, 4):
            raise MalformedTransform(f"transform matrix must be 4x4, got {matrix.shape}")
        if not np.allclose(matrix[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise MalformedTransform(f"transform bottom row must be (0,0,0,1), got {matrix[3]}")
        matrix[3] = (0.0, 0.0, 0.0, 1.0)
        if abs(np.linalg.det(matrix[:3, :3])) <= _DET_FLOOR:
            raise SingularTransform("transform linear part is singular")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)


def invert_affine(transform: AffineTransform) -> AffineTransform:
    """Inverse map with the space tags swapped."""
    try:
        inv = np.linalg.inv(transform.matrix)
    except np.linalg.LinAlgError as exc:  # constructor should have caught this
        raise SingularTransform(str(exc)) from exc
    return AffineTransform(
        matrix=inv,
        source_space=transform.target_space,
        target_space=transform.source_space,
    )


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """The map "apply ``inner``, then ``outer``".

    Requires ``outer.source_space == inner.target_space``; the result maps
    ``inner.source_space`` to ``outer.target_space``.
    """
    if outer.source_space != inner.target_space:
        raise SpaceMismatch(
            f"cannot compose: outer consumes {outer.source_space!r} but inner "
            f"produces {inner.target_space!r}"
        )
    return AffineTransform(
        matrix=outer.matrix @ inner.matrix,
        source_space=inner.source_space,
        target_space=outer.target_space,
    )


@dataclass(frozen=True)
class GridSpec:
    """A sampling grid: integer extents plus a voxel-to-world affine."""

    shape: tuple[int, int, int]
    affine: np.ndarray

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3:
            raise DegenerateGrid(f"grid shape must have 3 extents, got {shape}")
        if any(n < 1 for n in shape):
            raise DegenerateGrid(f"grid extents must be positive, got {shape}")
        affine = np.array(self.affine, dtype=np.float64, copy=True)
        if affine.shape != (4, 4) or not np.allclose(affine[3], (0, 0, 0, 1), atol=1e-9):
            raise DegenerateGrid("grid affine must be 4x4 with bottom row (0,0,0,1)")
        affine[3] = (0.0, 0.0, 0.0, 1.0)
        if abs(np.linalg.det(affine[:3, :3])) <= _DET_FLOOR:
            raise DegenerateGrid("grid affine is singular")
        affine.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "affine", affine)

    @property
    def spacing(self) -> np.ndarray:
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    @classmethod
    def from_volume(cls, vol: Volume) -> "GridSpec":
        return cls(shape=vol.shape, affine=vol.affine)


def _source_index_map(source_affine: np.ndarray, world_map: np.ndarray, target: GridSpec) -> np.ndarray:
    """Source voxel coordinates for every target voxel, shape (3, N).

    A target index v maps through target voxel->world, then the inverse world
    map, then world->source voxel.
    """
    m = np.linalg.inv(source_affine) @ np.linalg.inv(world_map) @ target.affine
    idx = np.indices(target.shape, dtype=np.float64).reshape(3, -1)
    return m[:3, :3] @ idx + m[:3, 3:4]


def resample_mask(mask: Volume, world_map: AffineTransform, target: GridSpec) -> Volume:
    """Nearest-neighbor resample of a label mask onto ``target``.

    ``world_map`` maps the mask's world coordinates into the target grid's
    world coordinates. Voxels that land outside the source grid become 0.
    The output label set is always a subset of the input's plus background.
    """
    data = mask.data
    if not np.issubdtype(data.dtype, np.integer):
        raise ValueError(f"mask resampling needs integer labels, got dtype {data.dtype}")
    coords = _source_index_map(mask.affine, world_map.matrix, target)
    nearest = np.rint(coords).astype(np.int64)
    inside = np.ones(nearest.shape[1], dtype=bool)
    for axis in range(3):
        inside &= (nearest[axis] >= 0) & (nearest[axis] < data.shape[axis])
    out = np.zeros(int(np.prod(target.shape)), dtype=data.dtype)
    out[inside] = data[nearest[0, inside], nearest[1, inside], nearest[2, inside]]
    out = out.reshape(target.shape)
    out.setflags(write=False)
    return Volume(data=out, affine=target.affine)


def resample_image(image: Volume, world_map: AffineTransform, target: GridSpec) -> Volume:
    """Trilinear resample of an intensity image onto ``target``.

    Out-of-grid samples read as 0. Output is float64.
    """
    coords = _source_index_map(image.affine, world_map.matrix, target)
    data = image.data.astype(np.float64, copy=False)
    sampled = ndimage.map_coordinates(data, coords, order=1, mode="constant", cval=0.0)
    out = sampled.reshape(target.shape)
    out.setflags(write=False)
    return Volume(data=out, affine=target.affine)


def _check_forward(forward: AffineTransform) -> None:
    if forward.source_space != "native" or forward.target_space not in ATLAS_SPACES:
        raise SpaceMismatch(
            f"expected a forward native->atlas transform, got "
            f"{forward.source_space!r}->{forward.target_space!r}"
        )


def inverse_warp_to_native(mask: Volume, forward: AffineTransform, native_grid: GridSpec) -> Volume:
    """Carry an atlas-space mask back to the subject's native grid.

    ``forward`` is the stored native->atlas registration; the warp applies
    its inverse with nearest-neighbor lookup.
    """
    _check_forward(forward)
    return resample_mask(mask, invert_affine(forward), native_grid)


def inverse_warp_image_to_native(
    image: Volume, forward: AffineTransform, native_grid: GridSpec
) -> Volume:
    """Trilinear counterpart of :func:`inverse_warp_to_native` for images."""
    _check_forward(forward)
    return resample_image(image, invert_affine(forward), native_grid)


def write_transform(transform: AffineTransform, path: str | Path) -> Path:
    """Write a transform sidecar (JSON, row-major matrix, mm units)."""
    path = Path(path)
    doc = {
        "matrix": [float(v) for v in np.asarray(transform.matrix).reshape(-1)],
        "source_space": transform.source_space,
        "target_space": transform.target_space,
        "units": "mm",
    }
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_transform(path: str | Path) -> AffineTransform:
    """Read a transform sidecar, rejecting non-affine or non-mm content."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedTransform(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedTransform(f"{path}: sidecar must be a JSON object")
    for key in ("matrix", "source_space", "target_space", "units"):
        if key not in doc:
            raise MalformedTransform(f"{path}: missing key {key!r}")
    if doc["units"] != "mm":
        raise MalformedTransform(f"{path}: units must be 'mm', got {doc['units']!r}")
    matrix = np.asarray(doc["matrix"], dtype=np.float64)
    if matrix.size != 16:
        raise MalformedTransform(f"{path}: matrix must hold 16 numbers, got {matrix.size}")
    matrix = matrix.reshape(4, 4)
    if not np.allclose(matrix[3], (0, 0, 0, 1), atol=1e-9):
        raise MalformedTransform(f"{path}: bottom row {matrix[3].tolist()} is not affine")
    try:
        return AffineTransform(
            matrix=matrix,
            source_space=str(doc["source_space"]),
            target_space=str(doc["target_space"]),
        )
    except SpaceMismatch as exc:
        raise MalformedTransform(f"{path}: {exc}") from exc


def transform_sidecar_name(subject_id: str, source_space: str, target_space: str) -> str:
    """Conventional sidecar filename, e.g. ``sub-01_native2SRI24.json``."""
    return f"{subject_id}_{source_space}2{target_space}.json"
