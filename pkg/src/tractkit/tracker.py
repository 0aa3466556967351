"""Whole-brain streamline tracking.

Two propagators share the seeding and bookkeeping machinery:

* act_prob — probabilistic, anatomically constrained. Each step draws
  candidate circular arcs whose end tangent comes from the sharpened dODF
  PMF at a provisional midpoint (cone-limited to the angle threshold) and
  accepts a candidate by rejection sampling against the product of PMF
  values at the arc midpoint and endpoint. Whole tracks are then judged
  against the five-tissue-type rules.
* fact — deterministic following of the principal eigenvector of the
  trilinearly interpolated tensor, terminated by the turning-angle
  threshold and the whole-brain mask. No anatomical judging.

Tracking is reproducible by construction: every attempt derives its own
random stream as rng_seed XOR attempt_index, and accepted streamlines are
collected in attempt order regardless of scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import act
from .act import FiveTissueTypeMap, LengthBounds, gmwmi_extract, judge_streamline, length_bounds
from .dti import TensorField, six_to_matrix
from .errors import SeedingError, TrackingError
from .grid import VoxelGrid, sample_trilinear_many
from .odf import PropagationPMF, SphereGrid, build_sphere, regularize_tensor, sample_direction

ALGORITHMS = ("act_prob", "fact")
_FIRST_BATCH = 4  # candidate arcs tried before falling back to the full batch


@dataclass
class TrackerConfig:
    step_mm: float = 0.6
    angle_deg: float | None = None  # default 20 for act_prob, 30 for fact
    k: float = 4.0
    target_count: int = 1000
    rng_seed: int = 0
    algorithm: str = "act_prob"
    fact_fa_stop: float = 0.0
    max_trials: int = 50
    fact_nearest_tensor: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.angle_deg is None:
            self.angle_deg = 20.0 if self.algorithm == "act_prob" else 30.0
        if self.step_mm <= 0:
            raise ValueError("step_mm must be positive")
        if not (0 < self.angle_deg < 90):
            raise ValueError("angle_deg must lie in (0, 90)")
        if self.target_count < 1:
            raise ValueError("target_count must be at least 1")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class Streamline:
    points: np.ndarray  # (n, 3) world mm
    seed_voxel: tuple[int, int, int]
    stream_id: int  # rng_seed XOR attempt index


@dataclass
class Tractogram:
    streamlines: list[Streamline]
    config: TrackerConfig
    rejections: dict[str, int]
    attempts: int

    def __len__(self) -> int:
        return len(self.streamlines)

    def point_lists(self) -> list[np.ndarray]:
        return [s.points for s in self.streamlines]


class PmfField:
    """Sharpened-dODF PMFs from a trilinearly interpolated tensor field.

    The tensor field is eigenvalue-floored once up front; convex combinations
    of SPD tensors stay SPD, so interpolated tensors never need re-checking.
    Evaluation uses the adjugate inverse and folds the determinant into the
    normalization, leaving one GEMM against a fixed direction basis.
    """

    def __init__(self, tensors: TensorField, sphere: SphereGrid, k: float):
        six = tensors.tensors.data.reshape(-1, 6)
        reg = regularize_tensor(six_to_matrix(six))
        reg_six = np.stack(
            [reg[:, 0, 0], reg[:, 0, 1], reg[:, 0, 2], reg[:, 1, 1], reg[:, 1, 2], reg[:, 2, 2]],
            axis=-1,
        ).reshape(tensors.tensors.data.shape)
        self.grid = VoxelGrid(reg_six, tensors.affine)
        self.sphere = sphere
        self.k = float(k)
        # flat layout for the hot trilinear gather
        self._flat = np.ascontiguousarray(self.grid.data.reshape(-1, 6))
        nx, ny, nz = self.grid.shape3
        self._dims = np.array([nx, ny, nz])
        self._strides = np.array([ny * nz, nz, 1], dtype=np.int64)
        inv = self.grid.affine._inverse
        self._inv_rot = np.ascontiguousarray(inv[:3, :3].T)
        self._inv_off = inv[:3, 3].copy()
        u = sphere.directions
        # quadratic-form basis matching the six-component order
        self._basis = np.column_stack(
            [
                u[:, 0] * u[:, 0],
                2 * u[:, 0] * u[:, 1],
                2 * u[:, 0] * u[:, 2],
                u[:, 1] * u[:, 1],
                2 * u[:, 1] * u[:, 2],
                u[:, 2] * u[:, 2],
            ]
        ).T  # (6, n_dirs)

    def _six_at(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear six-component tensors at world points (lean hot path)."""
        if (self._dims < 2).any():  # degenerate axes: use the generic sampler
            vals, inside = sample_trilinear_many(self.grid, points)
            return vals[inside], inside
        vox = points @ self._inv_rot + self._inv_off
        nx, ny, nz = self._dims
        inside = (
            (vox[:, 0] >= 0) & (vox[:, 0] <= nx - 1)
            & (vox[:, 1] >= 0) & (vox[:, 1] <= ny - 1)
            & (vox[:, 2] >= 0) & (vox[:, 2] <= nz - 1)
        )
        v = vox[inside]
        i0 = np.floor(v).astype(np.int64)
        np.minimum(i0, self._dims - 2, out=i0)
        np.maximum(i0, 0, out=i0)
        f = v - i0
        base = i0 @ self._strides
        sx, sy, sz = self._strides
        fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
        flat = self._flat
        c00 = flat[base] * (1 - fx) + flat[base + sx] * fx
        c10 = flat[base + sy] * (1 - fx) + flat[base + sx + sy] * fx
        c01 = flat[base + sz] * (1 - fx) + flat[base + sx + sz] * fx
        c11 = flat[base + sy + sz] * (1 - fx) + flat[base + sx + sy + sz] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz, inside

    def pmf_batch(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """PMFs at world points: (probs (n, n_dirs), valid (n,)).

        Rows of probs are NaN where the point is outside the grid.
        """
        six, inside = self._six_at(np.asarray(points, dtype=np.float64))
        n = len(points)
        probs = np.empty((n, self._basis.shape[1]))
        if not inside.any():
            probs.fill(np.nan)
            return probs, inside
        a, b, c, d, e, f = six.T
        inv = np.empty((len(six), 6))
        inv[:, 0] = d * f - e * e
        inv[:, 1] = c * e - b * f
        inv[:, 2] = b * e - c * d
        inv[:, 3] = a * f - c * c
        inv[:, 4] = b * c - a * e
        inv[:, 5] = a * d - b * b
        det = a * inv[:, 0] + b * inv[:, 1] + c * inv[:, 2]
        quad = inv @ self._basis  # u' adj(D) u, positive for SPD tensors
        # det cancels in the normalization; only positivity matters
        good = (det > 0) & (quad > 0).all(axis=1)
        if not good.all():
            quad = quad[good]
        # scale by the row minimum so large sharpening exponents cannot
        # overflow: ratios are >= 1 and the negative power maps them to (0, 1]
        quad = quad / quad.min(axis=1, keepdims=True)
        p = _power(quad, -1.5 * self.k)
        p /= p.sum(axis=1, keepdims=True)
        out_inside = inside.copy()
        out_inside[inside] = good
        probs.fill(np.nan)
        probs[out_inside] = p
        return probs, out_inside

    def pmf_at(self, point: np.ndarray) -> PropagationPMF | None:
        probs, ok = self.pmf_batch(point[None, :])
        if not ok[0]:
            return None
        return PropagationPMF(probabilities=probs[0], k=self.k, sphere=self.sphere)


@dataclass
class TrackingFields:
    """Everything a propagator needs, prepared once per run."""

    pmf: PmfField
    tensors: TensorField
    tt: FiveTissueTypeMap
    bounds: LengthBounds
    sphere: SphereGrid


def prepare_fields(tensors: TensorField, tt: FiveTissueTypeMap, cfg: TrackerConfig) -> TrackingFields:
    sphere = build_sphere()
    return TrackingFields(
        pmf=PmfField(tensors, sphere, cfg.k),
        tensors=tensors,
        tt=tt,
        bounds=length_bounds(tt),
        sphere=sphere,
    )


def _power(x: np.ndarray, expo: float) -> np.ndarray:
    """x**expo with a multiply-only fast path for integer exponents."""
    n = int(round(expo))
    if expo != n or not (-64 <= n <= 64) or n == 0:
        return x**expo
    out = None
    base = x
    m = abs(n)
    while m:
        if m & 1:
            out = base.copy() if out is None else out * base
        m >>= 1
        if m:
            base = base * base
    return 1.0 / out if n < 0 else out


def _values_along(probs: np.ndarray, sphere: SphereGrid, tangents: np.ndarray) -> np.ndarray:
    """PMF value at the grid direction nearest each tangent (folded)."""
    idx = np.argmax(np.abs(tangents @ sphere.directions.T), axis=1)
    return probs[np.arange(len(tangents)), idx]


def _arc_geometry(pos, direction, tangents, step):
    """Chord-parameterized circular arcs from pos.

    Returns (endpoints, midpoints, chord_dirs): each arc starts tangent to
    `direction`, ends tangent to its candidate tangent, and spans a chord of
    exactly `step` mm, so recorded points stay uniformly spaced.
    """
    cos_t = np.clip(tangents @ direction, -1.0, 1.0)
    theta = np.arccos(cos_t)
    chord = direction[None, :] + tangents
    chord /= np.linalg.norm(chord, axis=1, keepdims=True)
    endpoints = pos[None, :] + step * chord

    mid_dir = direction[None, :] + chord
    mid_dir /= np.linalg.norm(mid_dir, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(theta > 1e-9, np.sin(theta / 4) / np.sin(theta / 2), 0.5)
    midpoints = pos[None, :] + step * frac[:, None] * mid_dir
    return endpoints, midpoints, chord


def _step_prob(pos, direction, fields: TrackingFields, cfg: TrackerConfig, rng):
    """One iFOD2-style step; returns (new_point, new_tangent) or None."""
    provisional = pos + 0.5 * cfg.step_mm * direction
    pmf = fields.pmf.pmf_at(provisional)
    if pmf is None:
        return None
    remaining = cfg.max_trials
    batch_size = min(_FIRST_BATCH, remaining)
    while remaining > 0:
        tangents = sample_direction(pmf, direction, cfg.angle_deg, rng, size=batch_size)
        if tangents is None:
            return None  # empty cone
        endpoints, midpoints, chords = _arc_geometry(pos, direction, tangents, cfg.step_mm)
        both, ok_both = fields.pmf.pmf_batch(np.vstack([midpoints, endpoints]))
        pm, pe = both[:batch_size], both[batch_size:]
        ok = ok_both[:batch_size] & ok_both[batch_size:]
        weight = np.zeros(batch_size)
        bound = np.ones(batch_size)
        if ok.any():
            pm_ok, pe_ok = pm[ok], pe[ok]
            wm = _values_along(pm_ok, fields.sphere, chords[ok])
            we = _values_along(pe_ok, fields.sphere, tangents[ok])
            weight[ok] = wm * we
            bound[ok] = pm_ok.max(axis=1) * pe_ok.max(axis=1)
        draws = rng.uniform(size=batch_size)
        accepted = np.flatnonzero(draws * bound <= weight)
        if len(accepted):
            i = int(accepted[0])
            return endpoints[i], tangents[i]
        remaining -= batch_size
        batch_size = remaining
    return None


def _half_track_prob(seed, init_dir, fields, cfg, rng, max_len):
    pts = [np.asarray(seed, dtype=np.float64)]
    direction = np.asarray(init_dir, dtype=np.float64)
    arc = 0.0
    while arc + cfg.step_mm <= max_len + 1e-9:
        nxt = _step_prob(pts[-1], direction, fields, cfg, rng)
        if nxt is None:
            break
        new_pt, new_dir = nxt
        label = act.classify_position(fields.tt, new_pt)
        if label in (act.CSF, act.BACKGROUND, act.PATHOLOGICAL):
            break  # truncate at the previous point
        pts.append(new_pt)
        arc += cfg.step_mm
        direction = new_dir
        if label == act.CORTICAL_GM:
            break  # gray matter entry terminates the half-track
    return pts


def propagate_prob(
    start: np.ndarray,
    init_dir: np.ndarray | None,
    fields: TrackingFields,
    cfg: TrackerConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Probabilistic propagation from a point.

    With init_dir None, an initial axis is drawn from the unrestricted PMF at
    the seed and the two half-tracks along +/- that axis are joined;
    otherwise a single half-track runs along init_dir.
    """
    start = np.asarray(start, dtype=np.float64)
    max_len = fields.bounds.max_mm
    if init_dir is not None:
        return np.vstack(_half_track_prob(start, init_dir, fields, cfg, rng, max_len))
    pmf = fields.pmf.pmf_at(start)
    if pmf is None:
        return start[None, :]
    axis = sample_direction(pmf, None, cfg.angle_deg, rng)
    forward = _half_track_prob(start, axis, fields, cfg, rng, max_len)
    backward = _half_track_prob(start, -axis, fields, cfg, rng, max_len)
    if len(backward) > 1:
        return np.vstack([np.array(backward[::-1][:-1]), np.array(forward)])
    return np.vstack(forward)


def _tensor_at(fields: TrackingFields, point: np.ndarray, nearest: bool) -> np.ndarray | None:
    if nearest:
        from .grid import nearest_voxel_index

        idx = nearest_voxel_index(fields.tensors.tensors, point)
        if idx is None:
            return None
        return fields.tensors.tensors.data[idx]
    vals, inside = sample_trilinear_many(fields.tensors.tensors, point[None, :])
    if not inside[0]:
        return None
    return vals[0]


def _principal_direction(six: np.ndarray) -> tuple[np.ndarray, float]:
    d = six_to_matrix(six)
    vals, vecs = np.linalg.eigh(d)
    lam = vals[::-1]
    v1 = vecs[:, 2]
    clamped = np.maximum(lam, 0.0)
    denom = (clamped**2).sum()
    fa = 0.0
    if denom > 0:
        fa = float(np.sqrt(1.5 * ((clamped - clamped.mean()) ** 2).sum() / denom))
    return v1, fa


def _half_track_fact(seed, init_dir, fields, cfg, max_steps):
    pts = [np.asarray(seed, dtype=np.float64)]
    prev = np.asarray(init_dir, dtype=np.float64)
    cos_limit = np.cos(np.radians(cfg.angle_deg))
    for _ in range(max_steps):
        six = _tensor_at(fields, pts[-1], cfg.fact_nearest_tensor)
        if six is None:
            break
        v1, fa = _principal_direction(six)
        if cfg.fact_fa_stop > 0 and fa < cfg.fact_fa_stop:
            break
        d = v1 if v1 @ prev >= 0 else -v1
        if d @ prev < cos_limit - 1e-12:
            break
        new_pt = pts[-1] + cfg.step_mm * d
        if act.classify_position(fields.tt, new_pt) == act.BACKGROUND:
            break  # left the whole-brain mask
        pts.append(new_pt)
        prev = d
    return pts


def propagate_fact(
    start: np.ndarray, fields: TrackingFields, cfg: TrackerConfig
) -> np.ndarray:
    """Deterministic bidirectional FACT from a point; empty outside the mask."""
    start = np.asarray(start, dtype=np.float64)
    if act.classify_position(fields.tt, start) == act.BACKGROUND:
        return np.empty((0, 3))
    six = _tensor_at(fields, start, cfg.fact_nearest_tensor)
    if six is None:
        return np.empty((0, 3))
    v1, _ = _principal_direction(six)
    max_steps = max(1000, int(4 * fields.bounds.max_mm / cfg.step_mm))
    forward = _half_track_fact(start, v1, fields, cfg, max_steps)
    backward = _half_track_fact(start, -v1, fields, cfg, max_steps)
    if len(backward) > 1:
        return np.vstack([np.array(backward[::-1][:-1]), np.array(forward)])
    return np.vstack(forward)


def _run_attempt(attempt, voxels, fields, cfg):
    """One seeding attempt; returns (points, seed_voxel, stream_id)."""
    stream_id = cfg.rng_seed ^ attempt
    rng = np.random.default_rng(stream_id)
    vi = voxels[rng.integers(len(voxels))]
    offset = rng.uniform(-0.5, 0.5, 3)
    seed_world = fields.tt.labels.affine.voxel_to_world(vi + offset)
    if cfg.algorithm == "act_prob":
        pts = propagate_prob(seed_world, None, fields, cfg, rng)
    else:
        pts = propagate_fact(seed_world, fields, cfg)
    return pts, tuple(int(v) for v in vi), stream_id


def track_whole_brain(
    tensors: TensorField, tt: FiveTissueTypeMap, cfg: TrackerConfig
) -> Tractogram:
    """Seed on the gray/white interface until target_count tracks are kept.

    act_prob tracks are judged against the anatomical rules; fact keeps every
    track with at least two points. Attempts are capped at 1000x the target.
    """
    iface = gmwmi_extract(tt)
    if len(iface) == 0:
        raise SeedingError("gray/white interface is empty; cannot seed")
    voxels = iface.voxel_indices
    fields = prepare_fields(tensors, tt, cfg)

    accepted: list[Streamline] = []
    rejections: dict[str, int] = {}
    cap = 1000 * cfg.target_count
    attempts_used = 0
    block = max(64, 16 * max(1, cfg.threads))
    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        start = 0
        while len(accepted) < cfg.target_count and start < cap:
            stop = min(start + block, cap)
            indices = range(start, stop)
            runner = (lambda a: _run_attempt(a, voxels, fields, cfg))
            results = list(executor.map(runner, indices)) if executor else [runner(a) for a in indices]
            for attempt, (pts, seed_voxel, stream_id) in zip(indices, results):
                if len(accepted) >= cfg.target_count:
                    break
                attempts_used = attempt + 1
                if len(pts) < 2:
                    rejections["degenerate_path"] = rejections.get("degenerate_path", 0) + 1
                    continue
                if cfg.algorithm == "act_prob":
                    ok, reason = judge_streamline(pts, tt, fields.bounds)
                else:
                    ok, reason = True, None
                if ok:
                    accepted.append(Streamline(points=pts, seed_voxel=seed_voxel, stream_id=stream_id))
                else:
                    rejections[reason] = rejections.get(reason, 0) + 1
            start = stop
    finally:
        if executor:
            executor.shutdown()

    if len(accepted) < cfg.target_count:
        raise TrackingError(
            f"only {len(accepted)}/{cfg.target_count} streamlines after "
            f"{attempts_used} attempts; rejections: {rejections}"
        )
    return Tractogram(
        streamlines=accepted, config=cfg, rejections=rejections, attempts=attempts_used
    )
