"""Five-tissue-type anatomy prior and the anatomical streamline rules.

Labels: 0 background, 1 cortical GM, 2 sub-cortical GM, 3 WM, 4 CSF,
5 pathological tissue. Streamline seeding happens on WM voxels that touch
gray matter; accepted streamlines must start and end in gray matter, stay
out of CSF and background, and respect volume-derived length bounds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import VoxelGrid, load_volume, nearest_voxel_index, nearest_voxel_indices

BACKGROUND, CORTICAL_GM, SUBCORTICAL_GM, WM, CSF, PATHOLOGICAL = range(6)

TISSUE_NAMES = {
    BACKGROUND: "background",
    CORTICAL_GM: "cortical_gm",
    SUBCORTICAL_GM: "subcortical_gm",
    WM: "wm",
    CSF: "csf",
    PATHOLOGICAL: "pathological",
}

REJECT_REASONS = (
    "too_short",
    "too_long",
    "endpoint_not_gm",
    "entered_csf",
    "exited_brain",
    "invalid_interior",
)

_SIX_NEIGHBORS = np.array(
    [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
)


@dataclass
class FiveTissueTypeMap:
    """Hard tissue labels plus the derived brain volume in mm^3."""

    labels: VoxelGrid
    brain_volume: float

    @property
    def affine(self):
        return self.labels.affine

    def tissue_volume(self, labels: tuple[int, ...]) -> float:
        """Volume of the given label set, mm^3 (for alternative length bounds)."""
        data = self.labels.data
        count = int(np.isin(data, labels).sum())
        return count * self.labels.voxel_volume()


@dataclass
class InterfaceMask:
    """Boolean grid marking seed voxels on the gray/white boundary."""

    mask: VoxelGrid

    @property
    def voxel_indices(self) -> np.ndarray:
        return np.argwhere(self.mask.data > 0)

    def __len__(self) -> int:
        return int(np.count_nonzero(self.mask.data))


@dataclass(frozen=True)
class LengthBounds:
    min_mm: float
    max_mm: float

    def __post_init__(self):
        if not (0 < self.min_mm < self.max_mm):
            raise ValueError(f"invalid length bounds [{self.min_mm}, {self.max_mm}]")


def five_tt_from_grid(labels: VoxelGrid) -> FiveTissueTypeMap:
    """Build the map from an integer-label grid (validates the code range)."""
    data = labels.data
    if not np.issubdtype(data.dtype, np.integer):
        if not np.allclose(data, np.round(data)):
            raise FormatError("tissue labels must be integers")
        data = np.round(data).astype(np.int32)
        labels = VoxelGrid(data, labels.affine)
    if data.min() < 0 or data.max() > PATHOLOGICAL:
        raise FormatError(
            f"tissue labels out of range 0..5 (found {data.min()}..{data.max()})"
        )
    n_brain = int((data > 0).sum())
    return FiveTissueTypeMap(labels=labels, brain_volume=n_brain * labels.voxel_volume())


def load_5tt(path: str | Path) -> FiveTissueTypeMap:
    """Load a 5TT volume: integer labels, or 5 partial-volume channels.

    Five-channel input collapses to hard labels by per-voxel argmax over the
    channels (cGM, sGM, WM, CSF, pathological); all-zero voxels become
    background.
    """
    grid = load_volume(path)
    if grid.data.ndim == 4:
        if grid.n_channels != 5:
            raise FormatError(
                f"{path}: 4-D tissue map must have 5 channels, got {grid.n_channels}"
            )
        pv = grid.data
        hard = np.argmax(pv, axis=3).astype(np.int32) + 1
        hard[pv.sum(axis=3) <= 0] = BACKGROUND
        return five_tt_from_grid(VoxelGrid(hard, grid.affine))
    return five_tt_from_grid(grid)


def gmwmi_extract(tt: FiveTissueTypeMap) -> InterfaceMask:
    """WM voxels with a six-connected cortical or sub-cortical GM neighbor."""
    labels = tt.labels.data
    is_wm = labels == WM
    is_gm = (labels == CORTICAL_GM) | (labels == SUBCORTICAL_GM)
    touch = np.zeros_like(is_wm)
    for ax in range(3):
        for sign in (1, -1):
            shifted = np.roll(is_gm, sign, axis=ax)
            # roll wraps around; sever the wrapped face
            sl = [slice(None)] * 3
            sl[ax] = 0 if sign == 1 else -1
            shifted[tuple(sl)] = False
            touch |= shifted
    return InterfaceMask(mask=VoxelGrid((is_wm & touch).astype(np.uint8), tt.affine))


def length_bounds(tt: FiveTissueTypeMap, volume_mm3: float | None = None) -> LengthBounds:
    """Streamline length window from the brain volume.

    min = cbrt(V)/1.6, max = cbrt(V)/0.55. By default V counts all
    non-background labels; pass volume_mm3 to use an alternative volume
    (e.g. tissue_volume((1, 2, 3)) to exclude CSF).
    """
    v = tt.brain_volume if volume_mm3 is None else float(volume_mm3)
    if v <= 0:
        raise ValueError("brain volume must be positive")
    croot = v ** (1.0 / 3.0)
    return LengthBounds(min_mm=croot / 1.6, max_mm=croot / 0.55)


def classify_position(tt: FiveTissueTypeMap, world_point) -> int:
    """Tissue label of the nearest voxel; background outside the grid."""
    idx = nearest_voxel_index(tt.labels, world_point)
    if idx is None:
        return BACKGROUND
    return int(tt.labels.data[idx])


def classify_positions(tt: FiveTissueTypeMap, world_points: np.ndarray) -> np.ndarray:
    """Vectorized classify_position."""
    idx, inside = nearest_voxel_indices(tt.labels, world_points)
    out = np.full(len(idx), BACKGROUND, dtype=np.int32)
    if inside.any():
        ii = idx[inside]
        out[inside] = tt.labels.data[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


def streamline_length(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def judge_streamline(
    points: np.ndarray, tt: FiveTissueTypeMap, bounds: LengthBounds
) -> tuple[bool, str | None]:
    """Accept or reject an ordered streamline against the anatomy rules.

    Accepts iff arc length lies in [min_mm, max_mm], both endpoints are in
    cortical or sub-cortical GM, no interior point is in CSF or background,
    and interior points stay in WM or sub-cortical GM. Checks run in that
    order; the first failure is the verdict.
    Returns (accepted, reason) with reason None on accept.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2 or points.shape[1] != 3:
        raise ValueError("streamline needs at least two 3-D points")
    arc = streamline_length(points)
    if arc < bounds.min_mm:
        return False, "too_short"
    if arc > bounds.max_mm:
        return False, "too_long"
    labels = classify_positions(tt, points)
    if labels[0] not in (CORTICAL_GM, SUBCORTICAL_GM) or labels[-1] not in (
        CORTICAL_GM,
        SUBCORTICAL_GM,
    ):
        return False, "endpoint_not_gm"
    interior = labels[1:-1]
    if (interior == CSF).any():
        return False, "entered_csf"
    if (interior == BACKGROUND).any():
        return False, "exited_brain"
    if not np.isin(interior, (WM, SUBCORTICAL_GM)).all():
        return False, "invalid_interior"
    return True, None
