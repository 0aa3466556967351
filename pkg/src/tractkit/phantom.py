"""Synthetic tensor fields, 5TT maps, truth masks, and dMRI signals.

Phantoms are a WM bundle (straight segment, quarter-torus arc, or a crossing
pair) inside a rectangular grid: cortical-GM caps one voxel thick seal both
bundle ends, the outermost voxel layer of the grid is CSF, and everything
else is background with an isotropic tensor. Only end-to-end tracks through
the bundle satisfy the anatomical rules, which makes judge behavior sharply
testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .act import BACKGROUND, CORTICAL_GM, CSF, WM, FiveTissueTypeMap, five_tt_from_grid
from .dti import DiffusionProtocol, TensorField, six_to_matrix
from .grid import VoxelGrid

KINDS = ("straight", "curved_torus", "crossing")


@dataclass
class PhantomSpec:
    kind: str = "curved_torus"
    dims: tuple[int, int, int] = (28, 28, 14)
    spacing: float = 0.2
    bundle_radius_mm: float = 0.8
    lambda_parallel: float = 1.5e-3
    lambda_perp: float = 0.3e-3
    torus_radius_mm: float = 2.3
    crossing_angle_deg: float = 90.0
    noise_sigma: float = 0.0
    seed: int = 0
    cap_mm: float | None = None  # GM cap thickness; default one voxel
    margin_vox: int = 3  # straight/crossing bundle end margin, voxels
    fill: str = "background"  # interstitial label: background, or csf to
    # emulate whole-brain mask coverage for baselines that stop at the mask

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if not (self.lambda_parallel > self.lambda_perp > 0):
            raise ValueError("need lambda_parallel > lambda_perp > 0")
        if self.bundle_radius_mm <= 0 or self.spacing <= 0:
            raise ValueError("bundle radius and spacing must be positive")
        if self.cap_mm is None:
            self.cap_mm = self.spacing
        if self.cap_mm < self.spacing:
            raise ValueError("cap_mm cannot be thinner than one voxel")
        if self.fill not in ("background", "csf"):
            raise ValueError("fill must be 'background' or 'csf'")

    @property
    def affine(self) -> np.ndarray:
        return np.diag([self.spacing, self.spacing, self.spacing, 1.0])

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in vars(self).items()]
        return "\n".join(lines) + "\n"


@dataclass
class Phantom:
    spec: PhantomSpec
    tensors: TensorField
    tt: FiveTissueTypeMap
    truth_mask: VoxelGrid
    bundle_length_mm: float = 0.0
    meta: dict = field(default_factory=dict)


def _voxel_centers(spec: PhantomSpec) -> tuple[np.ndarray, ...]:
    nx, ny, nz = spec.dims
    xs = np.arange(nx) * spec.spacing
    ys = np.arange(ny) * spec.spacing
    zs = np.arange(nz) * spec.spacing
    return np.meshgrid(xs, ys, zs, indexing="ij")


def _straight_bundle(spec, x, y, z, x_start, x_end, cy, cz, direction=None):
    """Masks and tangents for one straight tube with end caps.

    Returns (main, cap, tangents) where tangents is (..., 3) valid on main.
    """
    if direction is None:
        direction = np.array([1.0, 0.0, 0.0])
    d = direction / np.linalg.norm(direction)
    # coordinates along/perpendicular to the axis through (x_start..x_end)
    rel = np.stack([x - 0.0, y - cy, z - cz], axis=-1)
    t = rel @ d
    radial = rel - t[..., None] * d
    rho = np.linalg.norm(radial, axis=-1)
    cap_len = spec.cap_mm
    inside_tube = rho <= spec.bundle_radius_mm
    main = inside_tube & (t >= x_start) & (t <= x_end)
    cap = inside_tube & (
        ((t >= x_start - cap_len) & (t < x_start))
        | ((t > x_end) & (t <= x_end + cap_len))
    )
    tangents = np.broadcast_to(d, main.shape + (3,))
    return main, cap, tangents


def _torus_bundle(spec, x, y, z):
    """Quarter-arc tube in the z = center plane, from angle 0 to 90 deg."""
    r_tube = spec.bundle_radius_mm
    big_r = spec.torus_radius_mm
    cap_ang = spec.cap_mm / big_r
    sp = spec.spacing
    # place the arc's bounding box centered in the grid
    ext = np.array([(n - 1) * sp for n in spec.dims])
    pad = r_tube + spec.cap_mm + sp
    box = np.array([big_r + r_tube + pad, big_r + r_tube + pad, 0.0])
    cx = (ext[0] - box[0]) / 2 + pad
    cy = (ext[1] - box[1]) / 2 + pad
    cz = ext[2] / 2

    dx = x - cx
    dy = y - cy
    dz = z - cz
    rho = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    dist = np.sqrt((rho - big_r) ** 2 + dz**2)
    inside_tube = dist <= r_tube
    main = inside_tube & (phi >= 0.0) & (phi <= np.pi / 2)
    cap = inside_tube & (
        ((phi >= -cap_ang) & (phi < 0.0))
        | ((phi > np.pi / 2) & (phi <= np.pi / 2 + cap_ang))
    )
    tangents = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
    return main, cap, tangents, (cx, cy, cz)


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Build tensors, 5TT labels, and the ground-truth bundle mask."""
    nx, ny, nz = spec.dims
    sp = spec.spacing
    x, y, z = _voxel_centers(spec)
    cy = (ny - 1) / 2 * sp
    cz = (nz - 1) / 2 * sp

    meta: dict = {}
    if spec.kind == "straight":
        x_start, x_end = spec.margin_vox * sp, (nx - 1 - spec.margin_vox) * sp
        main, cap, tangents = _straight_bundle(spec, x, y, z, x_start, x_end, cy, cz)
        bundle_length = x_end - x_start
        meta["axis_start"] = (x_start, cy, cz)
        meta["axis_end"] = (x_end, cy, cz)
        pieces = [(main, cap, tangents)]
    elif spec.kind == "curved_torus":
        main, cap, tangents, center = _torus_bundle(spec, x, y, z)
        bundle_length = spec.torus_radius_mm * np.pi / 2
        meta["torus_center"] = center
        pieces = [(main, cap, tangents)]
    else:  # crossing
        cx = (nx - 1) / 2 * sp
        theta = np.radians(spec.crossing_angle_deg)
        d2 = np.array([np.cos(theta), np.sin(theta), 0.0])
        x_start, x_end = spec.margin_vox * sp, (nx - 1 - spec.margin_vox) * sp
        main1, cap1, tan1 = _straight_bundle(spec, x, y, z, x_start, x_end, cy, cz)
        # second bundle through the grid center, clipped to the same margins
        half = _crossing_half_length(spec, d2)
        rel_center = np.stack([x - cx, y - cy, z - cz], axis=-1)
        t2 = rel_center @ d2
        radial2 = rel_center - t2[..., None] * d2
        rho2 = np.linalg.norm(radial2, axis=-1)
        inside2 = rho2 <= spec.bundle_radius_mm
        main2 = inside2 & (np.abs(t2) <= half)
        cap2 = inside2 & (np.abs(t2) > half) & (np.abs(t2) <= half + spec.cap_mm)
        tan2 = np.broadcast_to(d2, main2.shape + (3,))
        bundle_length = x_end - x_start
        pieces = [(main1, cap1, tan1), (main2, cap2, tan2)]

    labels = np.zeros(spec.dims, dtype=np.int32)
    lam_iso = (spec.lambda_parallel + 2 * spec.lambda_perp) / 3
    tensors = np.zeros(spec.dims + (6,))
    tensors[..., 0] = lam_iso
    tensors[..., 3] = lam_iso
    tensors[..., 5] = lam_iso
    truth = np.zeros(spec.dims, dtype=bool)

    for main, cap, tangents in pieces:
        new_wm = main & (labels == 0)  # overlap keeps the first bundle's tensor
        t = tangents[new_wm]
        dl = spec.lambda_parallel - spec.lambda_perp
        tensors[new_wm, 0] = spec.lambda_perp + dl * t[:, 0] * t[:, 0]
        tensors[new_wm, 1] = dl * t[:, 0] * t[:, 1]
        tensors[new_wm, 2] = dl * t[:, 0] * t[:, 2]
        tensors[new_wm, 3] = spec.lambda_perp + dl * t[:, 1] * t[:, 1]
        tensors[new_wm, 4] = dl * t[:, 1] * t[:, 2]
        tensors[new_wm, 5] = spec.lambda_perp + dl * t[:, 2] * t[:, 2]
        labels[main] = WM
        labels[cap & (labels == 0)] = CORTICAL_GM
        truth |= main

    # the grid's outermost voxel layer is CSF
    rim = np.zeros(spec.dims, dtype=bool)
    for ax in range(3):
        sl = [slice(None)] * 3
        sl[ax] = 0
        rim[tuple(sl)] = True
        sl[ax] = -1
        rim[tuple(sl)] = True
    if (rim & (labels > 0)).any():
        raise ValueError("bundle or caps touch the grid boundary; enlarge the grid")
    labels[rim] = CSF
    if spec.fill == "csf":
        labels[labels == BACKGROUND] = CSF

    # require a 2-voxel margin between tissue and the grid boundary
    occupied = np.argwhere((labels == WM) | (labels == CORTICAL_GM))
    lo_ok = (occupied >= 2).all()
    hi_ok = (occupied <= np.array(spec.dims) - 3).all()
    if not (lo_ok and hi_ok):
        raise ValueError("bundle does not keep a 2-voxel margin inside the grid")

    aff = spec.affine
    tensor_field = TensorField(
        tensors=VoxelGrid(tensors, aff),
        s0=VoxelGrid(np.full(spec.dims, 100.0), aff),
        mask=VoxelGrid(np.ones(spec.dims, dtype=np.uint8), aff),
    )
    tt = five_tt_from_grid(VoxelGrid(labels, aff))
    return Phantom(
        spec=spec,
        tensors=tensor_field,
        tt=tt,
        truth_mask=VoxelGrid(truth.astype(np.uint8), aff),
        bundle_length_mm=float(bundle_length),
        meta=meta,
    )


def _crossing_half_length(spec: PhantomSpec, d2: np.ndarray) -> float:
    """Largest half-length keeping the second bundle + cap inside margins."""
    sp = spec.spacing
    lo = np.array([spec.margin_vox * sp] * 3)
    hi = np.array([(n - 1 - spec.margin_vox) * sp for n in spec.dims])
    center = np.array([(n - 1) / 2 * sp for n in spec.dims])
    half = np.inf
    for ax in range(3):
        if abs(d2[ax]) < 1e-12:
            continue
        room = min(hi[ax] - center[ax], center[ax] - lo[ax])
        half = min(half, room / abs(d2[ax]))
    # leave room for the cap itself
    return max(half - spec.cap_mm, sp)


def synth_signal(
    tensors: TensorField,
    protocol: DiffusionProtocol,
    s0: float = 100.0,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> VoxelGrid:
    """Mono-exponential dMRI forward model, optionally with Rician noise.

    S_i = s0 * exp(-b_i g_i' D g_i); for sigma > 0 the magnitude of the
    complex signal with additive Gaussian noise of that standard deviation
    (absolute units) is returned.
    """
    shape = tensors.tensors.shape3
    d = six_to_matrix(tensors.tensors.data.reshape(-1, 6))
    g = protocol.bvecs
    quad = np.einsum("vij,mi,mj->vm", d, g, g, optimize=True)
    signal = s0 * np.exp(-protocol.bvals[None, :] * quad)
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        re = signal + noise_sigma * rng.standard_normal(signal.shape)
        im = noise_sigma * rng.standard_normal(signal.shape)
        signal = np.hypot(re, im)
    return VoxelGrid(signal.reshape(shape + (len(protocol),)), tensors.affine.matrix)


def write_phantom(ph: Phantom, out_dir: str | Path) -> dict[str, Path]:
    """Write tensors/tt/truth plus a manifest; returns the paths."""
    from .grid import save_volume

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "tensors": out / "tensors.nii.gz",
        "tt": out / "tt.nii.gz",
        "truth_mask": out / "truth_mask.nii.gz",
        "manifest": out / "manifest.txt",
    }
    save_volume(ph.tensors.tensors, paths["tensors"])
    save_volume(ph.tt.labels, paths["tt"])
    save_volume(ph.truth_mask, paths["truth_mask"])
    manifest = ph.spec.to_text() + f"bundle_length_mm={ph.bundle_length_mm}\n"
    paths["manifest"].write_text(manifest)
    return paths
