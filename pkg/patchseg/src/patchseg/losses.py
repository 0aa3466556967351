"""Loss stack: supervised cross-entropy plus the two self-supervised terms.

The representation pair is normalized to zero mean per dimension across the
batch and unit norm per sample before both the cosine term and the
cross-correlation penalty; the two constraints are enforced jointly by
alternating projection, which converges in a handful of iterations.
"""

from __future__ import annotations

import torch


def normalize_representations(z: torch.Tensor, tol: float = 1e-8, max_iter: int = 100) -> torch.Tensor:
    """Zero batch-mean per dimension and unit norm per sample, jointly."""
    if z.dim() != 2 or z.shape[0] < 2:
        raise ValueError("representations must be (batch >= 2, dim)")
    norms = z.norm(dim=1)
    if (norms == 0).any():
        raise ValueError("zero-norm representation")
    out = z
    for _ in range(max_iter):
        centered = out - out.mean(dim=0, keepdim=True)
        norms = centered.norm(dim=1, keepdim=True)
        if (norms == 0).any():
            raise ValueError("zero-norm representation after centering")
        out = centered / norms
        if out.mean(dim=0).abs().max() < tol:
            break
    return out


def cross_correlation(z1n: torch.Tensor, z2n: torch.Tensor) -> torch.Tensor:
    """Per-dimension normalized cross-correlation along the batch axis."""
    num = z1n.T @ z2n
    d1 = z1n.pow(2).sum(dim=0).sqrt()
    d2 = z2n.pow(2).sum(dim=0).sqrt()
    denom = d1[:, None] * d2[None, :]
    c = torch.where(denom > 0, num / torch.where(denom > 0, denom, torch.ones_like(denom)),
                    torch.zeros_like(num))
    return c


def loss_supervised(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Voxel-wise cross-entropy summed over the center patch, batch mean.

    probs is (batch, voxels, classes) of probabilities (rows must sum to 1
    within 1e-5); target is (batch, voxels) of class indices.
    """
    if probs.dim() != 3:
        raise ValueError("probs must be (batch, voxels, classes)")
    sums = probs.sum(dim=-1)
    if (sums - 1.0).abs().max().item() > 1e-5:
        raise ValueError("class probabilities do not sum to 1")
    picked = torch.gather(probs, 2, target.unsqueeze(-1)).squeeze(-1)
    eps = torch.finfo(probs.dtype).tiny
    return (-(picked.clamp_min(eps)).log()).sum(dim=1).mean()


def loss_ss1(z1: torch.Tensor, z2: torch.Tensor, alpha: float) -> torch.Tensor:
    """Cosine dissimilarity plus the off-diagonal correlation penalty."""
    z1n = normalize_representations(z1)
    z2n = normalize_representations(z2)
    cos = (z1n * z2n).sum(dim=1)
    term_cos = (1.0 - cos).mean()
    c = cross_correlation(z1n, z2n)
    off_diag = c.pow(2).sum() - c.diagonal().pow(2).sum()
    return term_cos + alpha * off_diag


def loss_ss2(x_hat: torch.Tensor, x: torch.Tensor, norm: str = "l2") -> torch.Tensor:
    """Center-patch reconstruction error: per-voxel norm summed, batch mean.

    Inputs are (batch, voxels*3) or (batch, voxels, 3).
    """
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    diff = (x_hat - x).reshape(x.shape[0], -1, 3)
    if norm == "l2":
        voxel = diff.pow(2).sum(dim=2).clamp_min(torch.finfo(diff.dtype).tiny).sqrt()
        voxel = torch.where(diff.abs().sum(dim=2) > 0, voxel, torch.zeros_like(voxel))
    elif norm == "l1":
        voxel = diff.abs().sum(dim=2)
    else:
        raise ValueError("norm must be 'l2' or 'l1'")
    return voxel.sum(dim=1).mean()


def loss_total(
    l_s: torch.Tensor | float | None,
    l_ss1: torch.Tensor | float,
    l_ss2: torch.Tensor | float,
    lambda1: float,
    lambda2: float,
) -> torch.Tensor | float:
    """Weighted sum; pass l_s=None for unlabeled batches (term dropped)."""
    total = lambda1 * l_ss1 + lambda2 * l_ss2
    if l_s is not None:
        total = total + l_s
    return total
