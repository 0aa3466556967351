"""Context-pair extraction from direction-map and label volumes.

A sample is centered on one s^3 patch: the two model inputs are the
3^3-1 = 26 and 5^3-1 = 124 surrounding patches (the center patch itself is
excluded from both), flattened to s^3*3 values each. Context patches are
ordered lexicographically by their (dx, dy, dz) patch offset. Patches whose
immediate (3^3) neighborhood would leave the volume are not used as centers;
the outer shell of the 5^3 context is zero-filled where it leaves the
volume.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

OFFSETS_SMALL = [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
OFFSETS_LARGE = [o for o in product((-2, -1, 0, 1, 2), repeat=3) if o != (0, 0, 0)]


@dataclass
class ContextBatch:
    """Arrays for a set of samples (float32 patches, int64 labels)."""

    x1: np.ndarray  # (n, 26, s^3*3)
    x2: np.ndarray  # (n, 124, s^3*3)
    x_center: np.ndarray  # (n, s^3*3)
    y_center: np.ndarray | None  # (n, s^3) tissue codes, None when unlabeled
    centers: np.ndarray  # (n, 3) voxel index of each center patch origin

    def __len__(self) -> int:
        return len(self.x_center)


def center_positions(shape: tuple[int, int, int], s: int, stride: int) -> np.ndarray:
    """Patch origins whose full 3^3 patch neighborhood fits in the volume."""
    lo = s
    out = []
    for ax in range(3):
        if shape[ax] < 5 * s:
            raise ValueError(f"volume too small along axis {ax}: {shape[ax]} < {5 * s}")
        hi = shape[ax] - 2 * s  # origin of the last center with a +1 neighbor
        out.append(np.arange(lo, hi + 1, stride))
    grid = np.meshgrid(*out, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _patch(volume: np.ndarray, origin: np.ndarray, s: int) -> np.ndarray:
    """One s^3 patch, zero-filled where it leaves the volume."""
    nx, ny, nz = volume.shape[:3]
    x, y, z = origin
    if 0 <= x and x + s <= nx and 0 <= y and y + s <= ny and 0 <= z and z + s <= nz:
        return volume[x : x + s, y : y + s, z : z + s]
    out = np.zeros((s, s, s) + volume.shape[3:], dtype=volume.dtype)
    xs = slice(max(0, x), min(nx, x + s))
    ys = slice(max(0, y), min(ny, y + s))
    zs = slice(max(0, z), min(nz, z + s))
    out[
        xs.start - x : xs.stop - x, ys.start - y : ys.stop - y, zs.start - z : zs.stop - z
    ] = volume[xs, ys, zs]
    return out


def extract_contexts(
    dirmap: np.ndarray,
    labels: np.ndarray | None,
    s: int = 5,
    stride: int | None = None,
) -> ContextBatch:
    """Build all context pairs from a (x, y, z, 3) direction map.

    labels, when given, must be an integer volume with codes in 0..4
    matching the five-tissue-type convention minus the pathological class.
    """
    dirmap = np.asarray(dirmap, dtype=np.float32)
    if dirmap.ndim != 4 or dirmap.shape[3] != 3:
        raise ValueError(f"direction map must be (x, y, z, 3), got {dirmap.shape}")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != dirmap.shape[:3]:
            raise ValueError("labels shape does not match the direction map")
        if labels.min() < 0 or labels.max() > 4:
            raise ValueError("labels must use codes 0..4")
    stride = s if stride is None else stride
    centers = center_positions(dirmap.shape[:3], s, stride)

    n = len(centers)
    vals = s**3 * 3
    x1 = np.empty((n, len(OFFSETS_SMALL), vals), dtype=np.float32)
    x2 = np.empty((n, len(OFFSETS_LARGE), vals), dtype=np.float32)
    xc = np.empty((n, vals), dtype=np.float32)
    yc = np.empty((n, s**3), dtype=np.int64) if labels is not None else None
    for i, c in enumerate(centers):
        xc[i] = _patch(dirmap, c, s).reshape(-1)
        if yc is not None:
            yc[i] = _patch(labels.astype(np.int64), c, s).reshape(-1)
        for j, off in enumerate(OFFSETS_SMALL):
            x1[i, j] = _patch(dirmap, c + s * np.asarray(off), s).reshape(-1)
        for j, off in enumerate(OFFSETS_LARGE):
            x2[i, j] = _patch(dirmap, c + s * np.asarray(off), s).reshape(-1)
    return ContextBatch(x1=x1, x2=x2, x_center=xc, y_center=yc, centers=centers)
