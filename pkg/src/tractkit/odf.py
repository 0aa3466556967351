"""Tensor-derived orientation distribution functions on a discrete sphere.

The propagation probability is p(u) proportional to dODF(u)^k over a fixed
724-direction grid. The grid is a spherical Fibonacci lattice built from 362
upper-hemisphere points plus their exact antipodes, so p(u) = p(-u) holds to
machine precision and antipodal folding is an index flip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTensorError

N_DIRECTIONS = 724
EIGENVALUE_FLOOR = 1e-6  # mm^2/s, regularization floor before inversion

_GOLDEN = (1 + np.sqrt(5.0)) / 2


@dataclass(frozen=True)
class SphereGrid:
    """724 unit directions with uniform quadrature weights.

    directions[i + 362] == -directions[i] for i < 362; antipode_index gives
    the pairing for arbitrary indices.
    """

    directions: np.ndarray  # (724, 3)
    weights: np.ndarray  # (724,), each 4*pi/724

    def antipode_index(self, i: int) -> int:
        half = len(self.directions) // 2
        return i + half if i < half else i - half

    def __len__(self) -> int:
        return len(self.directions)


def build_sphere() -> SphereGrid:
    """Deterministic 724-point antipodally symmetric Fibonacci sphere."""
    n_half = N_DIRECTIONS // 2
    i = np.arange(n_half)
    z = (i + 0.5) / n_half
    phi = 2 * np.pi * i / _GOLDEN
    r = np.sqrt(1.0 - z * z)
    upper = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    directions = np.vstack([upper, -upper])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    weights = np.full(N_DIRECTIONS, 4 * np.pi / N_DIRECTIONS)
    directions.setflags(write=False)
    weights.setflags(write=False)
    return SphereGrid(directions=directions, weights=weights)


@dataclass
class PropagationPMF:
    """Discrete streamline-propagation probabilities over a SphereGrid."""

    probabilities: np.ndarray  # (724,), non-negative, sums to 1
    k: float
    sphere: SphereGrid


def regularize_tensor(d: np.ndarray, floor: float = EIGENVALUE_FLOOR) -> np.ndarray:
    """Clamp eigenvalues from below; returns a symmetric matrix."""
    d = np.asarray(d, dtype=np.float64)
    sym = 0.5 * (d + np.swapaxes(d, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, floor)
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def dodf_eval(
    d: np.ndarray,
    sphere: SphereGrid,
    literal: bool = False,
) -> np.ndarray:
    """Evaluate the tensor dODF on every grid direction.

    Default is the inverse-tensor convention
        dODF(u) = 1 / (4 pi |D|^(1/2) (u' D^-1 u)^(3/2)),
    which integrates to one over the sphere; literal=True evaluates the
    variant with u' D u in place of the inverse form for comparison.
    Raises DegenerateTensorError when D is not SPD with eigenvalues at the
    regularization floor or above.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (3, 3):
        raise ValueError(f"expected a (3, 3) tensor, got {d.shape}")
    if np.abs(d - d.T).max() > 1e-9 * max(np.abs(d).max(), 1e-300):
        raise ValueError("tensor is not symmetric")
    vals = np.linalg.eigvalsh(d)
    if vals[0] < EIGENVALUE_FLOOR * (1 - 1e-9):
        raise DegenerateTensorError(
            f"tensor eigenvalues {vals} below the {EIGENVALUE_FLOOR} floor"
        )
    det = float(np.prod(vals))
    u = sphere.directions
    if literal:
        quad = np.einsum("di,ij,dj->d", u, d, u)
    else:
        quad = np.einsum("di,ij,dj->d", u, np.linalg.inv(d), u)
    return 1.0 / (4 * np.pi * np.sqrt(det) * quad**1.5)


def sharpen_normalize(dodf: np.ndarray, k: float, sphere: SphereGrid) -> PropagationPMF:
    """p proportional to dODF^k, renormalized to sum to one on the grid."""
    if k <= 0:
        raise ValueError(f"sharpening exponent must be positive, got {k}")
    dodf = np.asarray(dodf, dtype=np.float64)
    if dodf.shape != (len(sphere),):
        raise ValueError("dODF values do not match the sphere grid")
    if (dodf <= 0).any():
        raise ValueError("dODF values must be strictly positive")
    # scale out the peak before exponentiation so large k cannot overflow
    logp = k * np.log(dodf)
    logp -= logp.max()
    p = np.exp(logp)
    p /= p.sum()
    return PropagationPMF(probabilities=p, k=float(k), sphere=sphere)


def sample_direction(
    pmf: PropagationPMF,
    prev_dir: np.ndarray | None,
    max_angle_deg: float,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray | None:
    """Draw propagation direction(s) from the PMF.

    With prev_dir, the PMF is folded onto the hemisphere of prev_dir and
    restricted to the cone within max_angle_deg; returns None when the cone
    holds no probability mass (termination signal). Without prev_dir, draws
    from the full antipodally folded PMF. size=None returns one (3,) vector,
    otherwise (size, 3).
    """
    dirs = pmf.sphere.directions
    p = pmf.probabilities
    if prev_dir is None:
        idx = _draw(p, p.sum(), rng, size)
        return dirs[idx]

    prev = np.asarray(prev_dir, dtype=np.float64)
    prev = prev / np.linalg.norm(prev)
    dots = dirs @ prev
    in_cone = np.abs(dots) >= np.cos(np.radians(max_angle_deg))
    mass = p * in_cone
    total = mass.sum()
    if total <= 0.0:
        return None
    idx = _draw(mass, total, rng, size)
    # fold to the forward hemisphere
    sign = np.where(dots[idx] < 0, -1.0, 1.0)
    if size is None:
        return dirs[idx] * sign
    return dirs[idx] * sign[:, None]


def _draw(mass: np.ndarray, total: float, rng: np.random.Generator, size: int | None):
    """Inverse-CDF draw from an unnormalized discrete distribution."""
    cdf = np.cumsum(mass)
    u = rng.random(size=1 if size is None else size) * total
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, len(mass) - 1)
    return int(idx[0]) if size is None else idx
