"""Diffusion tensor estimation and derived scalar maps.

Tensors are fit per voxel in the log-linear model ln S = ln S0 - b g'Dg by
ordinary least squares followed by one reweighted pass with weights equal to
the squared predicted signals. The 6 tensor components are kept in the order
(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) everywhere, matching the on-disk layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProtocolError
from .grid import VoxelGrid

TENSOR_COMPONENTS = ("Dxx", "Dxy", "Dxz", "Dyy", "Dyz", "Dzz")


@dataclass
class DiffusionProtocol:
    """b-values (s/mm^2) and unit gradient directions, one per dMRI channel."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).ravel()
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if self.bvecs.ndim != 2 or self.bvecs.shape[1] != 3:
            raise ProtocolError(f"bvecs must be (n, 3), got {self.bvecs.shape}")
        if len(self.bvals) != len(self.bvecs):
            raise ProtocolError(
                f"{len(self.bvals)} b-values vs {len(self.bvecs)} directions"
            )
        if self.n_b0 < 1:
            raise ProtocolError("protocol needs at least one b=0 measurement")
        dwi = ~self.b0_mask
        if dwi.sum() < 6:
            raise ProtocolError("protocol needs at least 6 diffusion-weighted directions")
        norms = np.linalg.norm(self.bvecs[dwi], axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ProtocolError("diffusion-weighted b-vectors must be unit norm")
        if np.linalg.matrix_rank(self.design_matrix()) < 7:
            raise ProtocolError("gradient directions are collinear; tensor is unidentifiable")

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvals < 1e-6

    @property
    def n_b0(self) -> int:
        return int(self.b0_mask.sum())

    def __len__(self) -> int:
        return len(self.bvals)

    def design_matrix(self) -> np.ndarray:
        """(n, 7) rows [-b gx^2, -2b gx gy, -2b gx gz, -b gy^2, -2b gy gz, -b gz^2, 1]."""
        b = self.bvals
        gx, gy, gz = self.bvecs.T
        return np.column_stack(
            [
                -b * gx * gx,
                -2 * b * gx * gy,
                -2 * b * gx * gz,
                -b * gy * gy,
                -2 * b * gy * gz,
                -b * gz * gz,
                np.ones_like(b),
            ]
        )


def load_protocol(bvals_path: str | Path, bvecs_path: str | Path) -> DiffusionProtocol:
    """Read a protocol from text files.

    Accepts one b-value per line or a single FSL-style row, and b-vectors as
    either n rows of 3 or 3 rows of n.
    """
    bvals = np.loadtxt(bvals_path, dtype=np.float64).ravel()
    bvecs = np.atleast_2d(np.loadtxt(bvecs_path, dtype=np.float64))
    if bvecs.shape[0] == 3 and bvecs.shape[1] != 3:
        bvecs = bvecs.T
    return DiffusionProtocol(bvals, bvecs)


def save_protocol(protocol: DiffusionProtocol, bvals_path: str | Path, bvecs_path: str | Path) -> None:
    np.savetxt(bvals_path, protocol.bvals[None, :], fmt="%.6g")
    np.savetxt(bvecs_path, protocol.bvecs.T, fmt="%.10g")


def make_protocol(n_dirs: int = 32, n_b0: int = 2, bval: float = 500.0) -> DiffusionProtocol:
    """Deterministic synthetic protocol: b=0s plus a Fibonacci-spread shell."""
    golden = (1 + np.sqrt(5.0)) / 2
    i = np.arange(n_dirs)
    z = (i + 0.5) / n_dirs  # upper hemisphere; antipodes are redundant for DTI
    phi = 2 * np.pi * i / golden
    r = np.sqrt(1 - z * z)
    dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, float(bval))])
    bvecs = np.vstack([np.zeros((n_b0, 3)), dirs])
    return DiffusionProtocol(bvals, bvecs)


@dataclass
class TensorField:
    """Per-voxel symmetric tensors with the fit mask and S0 map."""

    tensors: VoxelGrid  # (nx, ny, nz, 6)
    s0: VoxelGrid
    mask: VoxelGrid  # uint8, 1 where fitted
    stats: dict = field(default_factory=dict)

    @property
    def affine(self):
        return self.tensors.affine

    def tensor_at_index(self, i: int, j: int, k: int) -> np.ndarray:
        return six_to_matrix(self.tensors.data[i, j, k])


@dataclass
class ScalarMaps:
    """FA, MD, principal eigenvector, and the FA-weighted direction map."""

    fa: VoxelGrid
    md: VoxelGrid
    v1: VoxelGrid  # (nx, ny, nz, 3)
    dirmap: VoxelGrid  # v1 * FA
    clamp_count: int = 0


def six_to_matrix(six: np.ndarray) -> np.ndarray:
    """(..., 6) component vector -> (..., 3, 3) symmetric matrix."""
    six = np.asarray(six)
    m = np.empty(six.shape[:-1] + (3, 3), dtype=six.dtype)
    m[..., 0, 0] = six[..., 0]
    m[..., 0, 1] = m[..., 1, 0] = six[..., 1]
    m[..., 0, 2] = m[..., 2, 0] = six[..., 2]
    m[..., 1, 1] = six[..., 3]
    m[..., 1, 2] = m[..., 2, 1] = six[..., 4]
    m[..., 2, 2] = six[..., 5]
    return m


def matrix_to_six(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    return np.stack(
        [m[..., 0, 0], m[..., 0, 1], m[..., 0, 2], m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]],
        axis=-1,
    )


def fit_wlls(
    dmri: VoxelGrid, protocol: DiffusionProtocol, mask: VoxelGrid | None = None
) -> TensorField:
    """Weighted linear least squares tensor fit.

    Two passes per voxel: OLS on log-signals, then one reweighted solve with
    weights equal to the squared signals predicted by the OLS estimate.
    Voxels with non-positive mean b=0 signal or any non-finite signal are
    masked out; non-positive diffusion-weighted signals in otherwise valid
    voxels are floored to a small fraction of S0 before the log.
    """
    if dmri.n_channels != len(protocol):
        raise ProtocolError(
            f"dMRI has {dmri.n_channels} channels but protocol lists {len(protocol)}"
        )
    X = protocol.design_matrix()
    nx, ny, nz = dmri.shape3
    signals = dmri.data.reshape(-1, len(protocol)).astype(np.float64)
    nvox = signals.shape[0]

    finite = np.isfinite(signals).all(axis=1)
    s0_mean = np.where(
        finite, np.nanmean(np.where(protocol.b0_mask, signals, np.nan), axis=1), 0.0
    )
    fit_mask = finite & (s0_mean > 0)
    if mask is not None:
        fit_mask &= mask.data.reshape(-1).astype(bool)
    stats = {
        "masked_nonfinite": int((~finite).sum()),
        "masked_nonpositive_s0": int((finite & (s0_mean <= 0)).sum()),
        "fitted": int(fit_mask.sum()),
    }

    beta = np.zeros((nvox, 7))
    if fit_mask.any():
        s = signals[fit_mask]
        floor = np.maximum(s0_mean[fit_mask], 1e-30)[:, None] * 1e-10
        s = np.maximum(s, floor)
        y = np.log(s)

        pinv = np.linalg.pinv(X)
        beta_ols = y @ pinv.T

        w = np.exp(beta_ols @ X.T)  # predicted signals; weight matrix is diag(w^2)
        w2 = w * w
        a = np.einsum("vm,mj,mk->vjk", w2, X, X, optimize=True)
        rhs = np.einsum("vm,mj->vj", w2 * y, X, optimize=True)
        beta[fit_mask] = np.linalg.solve(a, rhs[..., None])[..., 0]

    tensors = beta[:, :6].reshape(nx, ny, nz, 6)
    s0 = np.exp(beta[:, 6]).reshape(nx, ny, nz)
    s0[~fit_mask.reshape(nx, ny, nz)] = 0.0
    return TensorField(
        tensors=VoxelGrid(tensors, dmri.affine),
        s0=VoxelGrid(s0, dmri.affine),
        mask=VoxelGrid(fit_mask.reshape(nx, ny, nz).astype(np.uint8), dmri.affine),
        stats=stats,
    )


def _fix_eigenvector_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip eigenvectors so the first non-negligible component is positive.

    vecs is (..., 3, 3) with eigenvectors in columns.
    """
    v = np.moveaxis(vecs, -1, -2)  # rows now eigenvectors
    absv = np.abs(v)
    lead = absv > 1e-9 * absv.max(axis=-1, keepdims=True).clip(min=1e-300)
    first = lead.argmax(axis=-1)
    sign = np.take_along_axis(v, first[..., None], axis=-1)[..., 0]
    flip = np.where(sign < 0, -1.0, 1.0)
    v = v * flip[..., None]
    return np.moveaxis(v, -1, -2)


def eigendecompose(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and column eigenvectors of a symmetric tensor.

    Works on a single (3, 3) matrix or a batch (..., 3, 3). Eigenvector signs
    follow a deterministic convention: first non-negligible component of each
    vector is positive.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) tensor, got {d.shape}")
    asym = np.abs(d - np.swapaxes(d, -1, -2)).max()
    scale = max(np.abs(d).max(), 1e-300)
    if asym > 1e-9 * scale:
        raise ValueError(f"tensor is not symmetric (asymmetry {asym:g})")
    vals, vecs = np.linalg.eigh(d)
    vals = vals[..., ::-1]
    vecs = vecs[..., ::-1]
    return vals, _fix_eigenvector_signs(vecs)


def derive_scalars(tf: TensorField) -> ScalarMaps:
    """FA, MD, v1, and dirmap = v1*FA from a fitted tensor field.

    Negative eigenvalues are clamped to zero for FA only; MD keeps the raw
    values. Unfitted voxels yield zeros everywhere.
    """
    nx, ny, nz = tf.tensors.shape3
    mask = tf.mask.data.reshape(-1).astype(bool)
    six = tf.tensors.data.reshape(-1, 6)

    fa = np.zeros(nx * ny * nz)
    md = np.zeros(nx * ny * nz)
    v1 = np.zeros((nx * ny * nz, 3))
    clamp_count = 0
    if mask.any():
        vals, vecs = eigendecompose(six_to_matrix(six[mask]))
        md[mask] = vals.mean(axis=-1)
        clamped = np.maximum(vals, 0.0)
        clamp_count = int((vals < 0).sum())
        sum_sq = (clamped**2).sum(axis=-1)
        mean_l = clamped.mean(axis=-1, keepdims=True)
        num = 1.5 * ((clamped - mean_l) ** 2).sum(axis=-1)
        fa_m = np.zeros(mask.sum())
        ok = sum_sq > 0
        fa_m[ok] = np.sqrt(num[ok] / sum_sq[ok])
        fa[mask] = np.clip(fa_m, 0.0, 1.0)
        v1[mask] = vecs[..., :, 0]

    aff = tf.affine
    fa3 = fa.reshape(nx, ny, nz)
    return ScalarMaps(
        fa=VoxelGrid(fa3, aff),
        md=VoxelGrid(md.reshape(nx, ny, nz), aff),
        v1=VoxelGrid(v1.reshape(nx, ny, nz, 3), aff),
        dirmap=VoxelGrid(v1.reshape(nx, ny, nz, 3) * fa3[..., None], aff),
        clamp_count=clamp_count,
    )
