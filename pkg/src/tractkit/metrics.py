"""Tract density maps, binary masks, and mask-agreement metrics.

Distances are between voxel centers in mm; surfaces are mask voxels with a
six-connected non-mask neighbor (out-of-grid counts as non-mask); the 95th
percentiles use the nearest-rank convention, as does the density threshold.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .grid import VoxelGrid
from .tracker import Tractogram

SUPERSAMPLE = 4  # polyline sampling at step/4 to avoid skipped voxels


def _visited_voxels(points: np.ndarray, grid: VoxelGrid) -> set[tuple[int, int, int]]:
    """Voxels a polyline passes through, on the supersampled trace."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return set()
    if len(pts) == 1:
        dense = pts
    else:
        chunks = []
        for a, b in zip(pts[:-1], pts[1:]):
            ts = np.linspace(0.0, 1.0, SUPERSAMPLE, endpoint=False)
            chunks.append(a[None, :] + ts[:, None] * (b - a)[None, :])
        chunks.append(pts[-1:])
        dense = np.vstack(chunks)
    vox = grid.affine.world_to_voxel(dense)
    idx = np.ceil(vox - 0.5).astype(np.int64)
    nx, ny, nz = grid.shape3
    ok = (
        (idx[:, 0] >= 0) & (idx[:, 0] < nx)
        & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        & (idx[:, 2] >= 0) & (idx[:, 2] < nz)
    )
    return {tuple(v) for v in idx[ok]}


def density_map(tractogram: Tractogram | list[np.ndarray], reference: VoxelGrid) -> VoxelGrid:
    """Streamlines-per-voxel counts on the reference grid geometry.

    Each streamline increments every voxel it visits exactly once.
    """
    point_lists = (
        tractogram.point_lists() if isinstance(tractogram, Tractogram) else tractogram
    )
    counts = np.zeros(reference.shape3, dtype=np.int32)
    for pts in point_lists:
        for v in _visited_voxels(pts, reference):
            counts[v] += 1
    return VoxelGrid(counts, reference.affine)


def binarize_percentile(density: VoxelGrid, pct: float = 1.0) -> VoxelGrid:
    """Threshold at the nearest-rank pct percentile of non-zero densities.

    Voxels with density >= threshold survive. With pct small enough the
    threshold is the minimum positive density and the whole support is kept.
    """
    if not (0 < pct <= 100):
        raise ValueError("pct must lie in (0, 100]")
    values = np.sort(density.data[density.data > 0].ravel())
    if len(values) == 0:
        raise ValueError("density map has no non-zero voxels")
    rank = max(1, int(np.ceil(pct / 100.0 * len(values))))
    threshold = values[rank - 1]
    return VoxelGrid((density.data >= threshold).astype(np.uint8), density.affine)


def _check_same_grid(a: VoxelGrid, b: VoxelGrid) -> None:
    if a.shape3 != b.shape3:
        raise ValueError(f"mask grids differ: {a.shape3} vs {b.shape3}")
    if np.abs(a.affine.matrix - b.affine.matrix).max() > 1e-6:
        raise ValueError("mask affines differ")


def dsc(a: VoxelGrid, b: VoxelGrid) -> float:
    """Dice overlap 2|A&B|/(|A|+|B|); defined as 1 when both masks are empty."""
    _check_same_grid(a, b)
    am = a.data > 0
    bm = b.data > 0
    denom = int(am.sum()) + int(bm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / denom


def _surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a six-connected neighbor outside the mask."""
    m = mask.astype(bool)
    interior = np.ones_like(m)
    for ax in range(3):
        for sign in (1, -1):
            shifted = np.roll(m, sign, axis=ax)
            sl = [slice(None)] * 3
            sl[ax] = 0 if sign == 1 else -1
            shifted[tuple(sl)] = False  # out-of-grid is non-mask
            interior &= shifted
    return np.argwhere(m & ~interior)


def _surface_points_mm(mask: VoxelGrid) -> np.ndarray:
    vox = _surface_voxels(mask.data)
    if len(vox) == 0:
        raise ValueError("mask is empty; surface distances undefined")
    return mask.affine.voxel_to_world(vox.astype(np.float64))


def _directed_distances(a_pts: np.ndarray, b_pts: np.ndarray) -> np.ndarray:
    tree = cKDTree(b_pts)
    d, _ = tree.query(a_pts, k=1)
    return d


def hd95(a: VoxelGrid, b: VoxelGrid) -> float:
    """Max of the two directed 95th-percentile (nearest-rank) distances, mm."""
    _check_same_grid(a, b)
    pa, pb = _surface_points_mm(a), _surface_points_mm(b)
    dab = np.sort(_directed_distances(pa, pb))
    dba = np.sort(_directed_distances(pb, pa))

    def nearest_rank_95(d):
        rank = max(1, int(np.ceil(0.95 * len(d))))
        return d[rank - 1]

    return float(max(nearest_rank_95(dab), nearest_rank_95(dba)))


def assd(a: VoxelGrid, b: VoxelGrid) -> float:
    """Mean of all directed surface distances pooled both ways, mm."""
    _check_same_grid(a, b)
    pa, pb = _surface_points_mm(a), _surface_points_mm(b)
    dab = _directed_distances(pa, pb)
    dba = _directed_distances(pb, pa)
    return float((dab.sum() + dba.sum()) / (len(dab) + len(dba)))


def voldiff(a: VoxelGrid, b: VoxelGrid) -> float:
    """|vol(A) - vol(B)| / ((vol(A) + vol(B)) / 2)."""
    _check_same_grid(a, b)
    va = int((a.data > 0).sum()) * a.voxel_volume()
    vb = int((b.data > 0).sum()) * b.voxel_volume()
    if va + vb == 0:
        raise ValueError("both masks are empty; VolDiff undefined")
    return abs(va - vb) / ((va + vb) / 2.0)


def all_mask_metrics(a: VoxelGrid, b: VoxelGrid) -> dict[str, float]:
    return {
        "dsc": dsc(a, b),
        "hd95_mm": hd95(a, b),
        "assd_mm": assd(a, b),
        "voldiff": voldiff(a, b),
    }


def filter_by_rois(
    tractogram: Tractogram,
    include: list[VoxelGrid] | None = None,
    exclude: list[VoxelGrid] | None = None,
) -> Tractogram:
    """Keep streamlines visiting every include mask and no exclude mask."""
    include = include or []
    exclude = exclude or []
    kept = []
    for sl in tractogram.streamlines:
        visited = {}

        def hits(mask: VoxelGrid) -> bool:
            key = id(mask)
            if key not in visited:
                visited[key] = _visited_voxels(sl.points, mask)
            vox = visited[key]
            data = mask.data
            return any(data[v] > 0 for v in vox)

        if all(hits(m) for m in include) and not any(hits(m) for m in exclude):
            kept.append(sl)
    return Tractogram(
        streamlines=kept,
        config=tractogram.config,
        rejections=dict(tractogram.rejections),
        attempts=tractogram.attempts,
    )
