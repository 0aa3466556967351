"""Dual-context transformer: one encoder, two input views, two decoders.

Both context sequences (26 and 124 patch tokens) go through the same patch
projection, sinusoidal positional encodings, and transformer encoder; the
mean-pooled representation of the small context (z1) feeds both decoders:
reconstruction of the center patch content and voxel-wise tissue
classification. The large-context representation (z2) participates only in
the self-supervised losses.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import SegModelConfig


def sinusoidal_encoding(n_positions: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pe = torch.zeros(n_positions, dim, dtype=dtype)
    pos = torch.arange(n_positions, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        attn, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn
        x = x + self.ff(self.norm2(x))
        return x


class MlpDecoder(nn.Module):
    """3-layer fully-connected stack with ReLU activations."""

    def __init__(self, dim: int, hidden: int, out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out),
        )

    def forward(self, z):
        return self.net(z)


class DualContextNet(nn.Module):
    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        m = config.embed_dim
        self.project = nn.Linear(config.patch_values, m)
        self.register_buffer("pos_encoding", sinusoidal_encoding(124, m))
        self.encoder = nn.ModuleList(
            EncoderBlock(m, config.n_heads, config.ff_dim) for _ in range(config.encoder_depth)
        )
        self.decoder_recon = MlpDecoder(m, config.decoder_hidden, config.patch_values)
        self.decoder_class = MlpDecoder(
            m, config.decoder_hidden, config.patch_voxels * config.n_classes
        )

    def encode(self, patches: torch.Tensor) -> torch.Tensor:
        """(batch, tokens, patch_values) -> (batch, embed_dim)."""
        tokens = self.project(patches)
        tokens = tokens + self.pos_encoding[: tokens.shape[1]].to(tokens.dtype)
        for block in self.encoder:
            tokens = block(tokens)
        return tokens.mean(dim=1)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor):
        """Returns (z1, z2, x_hat, class_probs).

        class_probs is (batch, patch_voxels, n_classes), softmax per voxel,
        computed from z1 only.
        """
        z1 = self.encode(x1)
        z2 = self.encode(x2)
        x_hat = self.decoder_recon(z1)
        logits = self.decoder_class(z1).reshape(
            -1, self.config.patch_voxels, self.config.n_classes
        )
        probs = torch.softmax(logits, dim=-1)
        return z1, z2, x_hat, probs
