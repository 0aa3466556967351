"""Model and training configuration."""

from __future__ import annotations

from dataclasses import dataclass, asdict


@dataclass
class SegModelConfig:
    patch_size: int = 5  # s: cubic patch side, voxels
    embed_dim: int = 128  # m
    encoder_depth: int = 5
    n_heads: int = 4
    ff_dim: int = 256
    decoder_hidden: int = 128
    n_classes: int = 5  # background + 4 tissue classes
    alpha: float = 0.05
    lambda1: float = 0.1
    lambda2: float = 0.1
    batch_size: int = 50  # K
    learning_rate: float = 1e-3
    plateau_factor: float = 0.90
    recon_norm: str = "l2"  # per-voxel norm in the reconstruction loss
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.embed_dim < 1 or self.encoder_depth < 1:
            raise ValueError("model dimensions must be positive")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.recon_norm not in ("l2", "l1"):
            raise ValueError("recon_norm must be 'l2' or 'l1'")
        if not (0 < self.plateau_factor <= 1):
            raise ValueError("plateau_factor must lie in (0, 1]")

    @property
    def patch_voxels(self) -> int:
        return self.patch_size**3

    @property
    def patch_values(self) -> int:
        return self.patch_voxels * 3

    def to_dict(self) -> dict:
        return asdict(self)
