"""Voxel lattice container, coordinate transforms, and trilinear sampling.

Conventions: voxel centers sit at integer index coordinates; the affine maps
continuous index coordinates to world millimeters. Float data is held as
float64 in memory and written as float32 by default; integer data keeps its
dtype end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti


@dataclass(frozen=True)
class AffineTransform:
    """4x4 voxel-index -> world-mm transform with a cached inverse."""

    matrix: np.ndarray
    _inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("affine matrix must be 4x4")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("affine upper-left 3x3 is not invertible")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_inverse", np.linalg.inv(m))

    def voxel_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return idx @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def world_to_voxel(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self._inverse[:3, :3].T + self._inverse[:3, 3]

    @property
    def spacing(self) -> np.ndarray:
        """Per-axis voxel size in mm (column norms)."""
        return np.linalg.norm(self.matrix[:3, :3], axis=0)

    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.matrix[:3, :3])))


class VoxelGrid:
    """A 3-D scalar or multi-channel lattice with world geometry.

    data is [nx, ny, nz] or [nx, ny, nz, nc]. Instances are treated as
    immutable once constructed; nothing here mutates data in place.
    """

    def __init__(self, data: np.ndarray, affine, disk_dtype: np.dtype | None = None):
        data = np.asarray(data)
        if data.ndim not in (3, 4):
            raise ValueError(f"grid data must be 3-D or 4-D, got shape {data.shape}")
        if np.issubdtype(data.dtype, np.floating):
            self.data = data.astype(np.float64, copy=False)
            self.disk_dtype = np.dtype(disk_dtype or np.float32)
        elif np.issubdtype(data.dtype, np.integer):
            self.data = data
            self.disk_dtype = np.dtype(disk_dtype or data.dtype)
        elif data.dtype == bool:
            self.data = data.astype(np.uint8)
            self.disk_dtype = np.dtype(np.uint8)
        else:
            raise ValueError(f"unsupported grid dtype {data.dtype}")
        self.affine = affine if isinstance(affine, AffineTransform) else AffineTransform(affine)

    @property
    def shape3(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_channels(self) -> int:
        return self.data.shape[3] if self.data.ndim == 4 else 1

    @property
    def spacing(self) -> np.ndarray:
        return self.affine.spacing

    def voxel_volume(self) -> float:
        return self.affine.voxel_volume()

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        """Same geometry, new samples."""
        return VoxelGrid(data, self.affine)


def load_volume(path: str | Path) -> VoxelGrid:
    """Load a NIfTI-1 volume; float data is promoted to float64 in memory."""
    data, affine = nifti.read_nifti(path)
    disk_dtype = data.dtype.newbyteorder("=")
    if np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    else:
        data = data.astype(disk_dtype)
    return VoxelGrid(data, affine, disk_dtype=disk_dtype)


def save_volume(grid: VoxelGrid, path: str | Path, dtype=None) -> None:
    """Write a grid as NIfTI-1.

    dtype overrides the on-disk type; by default integer grids keep their
    dtype and float grids use the grid's disk_dtype (float32 unless loaded
    from a float64 file).
    """
    out_dtype = np.dtype(dtype) if dtype is not None else grid.disk_dtype
    nifti.write_nifti(path, grid.data.astype(out_dtype), grid.affine.matrix)


def sample_trilinear(grid: VoxelGrid, world_point) -> np.ndarray | None:
    """Trilinear sample at a world-mm point; None when out of bounds.

    Out of bounds means the continuous voxel coordinate leaves [0, n-1] on
    any axis, where interpolation is no longer supported by 8 neighbors.
    Returns an (nc,) vector (nc=1 for scalar grids).
    """
    vox = grid.affine.world_to_voxel(np.asarray(world_point, dtype=np.float64))
    out = _sample_trilinear_vox(grid.data, vox[None, :])
    return None if out is None or np.isnan(out[0, 0]) else out[0]


def sample_trilinear_many(grid: VoxelGrid, world_points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized trilinear sampling.

    Returns (values (n, nc), inside (n,) bool); values are NaN where outside.
    """
    pts = np.asarray(world_points, dtype=np.float64)
    vox = grid.affine.world_to_voxel(pts)
    vals = _sample_trilinear_vox(grid.data, vox)
    inside = ~np.isnan(vals[:, 0])
    return vals, inside


def _sample_trilinear_vox(data: np.ndarray, vox: np.ndarray) -> np.ndarray:
    nx, ny, nz = data.shape[:3]
    flat = data.reshape(nx, ny, nz, -1)
    nc = flat.shape[3]

    n = vox.shape[0]
    out = np.full((n, nc), np.nan)
    inside = (
        (vox[:, 0] >= 0) & (vox[:, 0] <= nx - 1)
        & (vox[:, 1] >= 0) & (vox[:, 1] <= ny - 1)
        & (vox[:, 2] >= 0) & (vox[:, 2] <= nz - 1)
    )
    if not inside.any():
        return out
    v = vox[inside]
    i0 = np.floor(v).astype(np.int64)
    # top edge: step back one cell so i0+1 stays valid, fraction becomes 1
    for ax, na in enumerate((nx, ny, nz)):
        hi = i0[:, ax] >= na - 1
        i0[hi, ax] = max(na - 2, 0)
    f = v - i0
    if nx == 1:
        f[:, 0] = 0.0
    if ny == 1:
        f[:, 1] = 0.0
    if nz == 1:
        f[:, 2] = 0.0
    i1 = np.minimum(i0 + 1, np.array([nx - 1, ny - 1, nz - 1]))

    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    c000 = flat[i0[:, 0], i0[:, 1], i0[:, 2]]
    c100 = flat[i1[:, 0], i0[:, 1], i0[:, 2]]
    c010 = flat[i0[:, 0], i1[:, 1], i0[:, 2]]
    c110 = flat[i1[:, 0], i1[:, 1], i0[:, 2]]
    c001 = flat[i0[:, 0], i0[:, 1], i1[:, 2]]
    c101 = flat[i1[:, 0], i0[:, 1], i1[:, 2]]
    c011 = flat[i0[:, 0], i1[:, 1], i1[:, 2]]
    c111 = flat[i1[:, 0], i1[:, 1], i1[:, 2]]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out


def nearest_voxel_index(grid: VoxelGrid, world_point) -> tuple[int, int, int] | None:
    """Nearest voxel index with a round-half-down tie break; None if outside."""
    vox = grid.affine.world_to_voxel(np.asarray(world_point, dtype=np.float64))
    idx = np.ceil(vox - 0.5).astype(np.int64)
    nx, ny, nz = grid.shape3
    if (idx < 0).any() or idx[0] >= nx or idx[1] >= ny or idx[2] >= nz:
        return None
    return int(idx[0]), int(idx[1]), int(idx[2])


def nearest_voxel_indices(grid: VoxelGrid, world_points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized nearest-voxel lookup: (indices (n,3), inside (n,))."""
    pts = np.asarray(world_points, dtype=np.float64)
    vox = grid.affine.world_to_voxel(pts)
    idx = np.ceil(vox - 0.5).astype(np.int64)
    nx, ny, nz = grid.shape3
    inside = (
        (idx[:, 0] >= 0) & (idx[:, 0] < nx)
        & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        & (idx[:, 2] >= 0) & (idx[:, 2] < nz)
    )
    return idx, inside
