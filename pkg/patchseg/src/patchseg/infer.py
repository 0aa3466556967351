"""Sliding-window inference producing a five-tissue-type label volume."""

from __future__ import annotations

import numpy as np
import torch

from .data import extract_contexts
from .model import DualContextNet


def infer_5tt(dirmap: np.ndarray, model: DualContextNet, batch: int = 64) -> np.ndarray:
    """Classify every voxel; borders take the nearest classified voxel.

    Returns an int32 volume with codes 0..4 (background, cortical GM,
    sub-cortical GM, WM, CSF), loadable as a 5TT map by the tracking engine.
    """
    s = model.config.patch_size
    ctx = extract_contexts(dirmap, labels=None, s=s, stride=s)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype

    labels = np.full(dirmap.shape[:3], -1, dtype=np.int32)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(ctx), batch):
            sl = slice(start, min(start + batch, len(ctx)))
            x1 = torch.as_tensor(ctx.x1[sl], dtype=dtype, device=device)
            x2 = torch.as_tensor(ctx.x2[sl], dtype=dtype, device=device)
            _z1, _z2, _x_hat, probs = model(x1, x2)
            pred = probs.argmax(dim=-1).cpu().numpy()  # (b, s^3)
            for row, origin in zip(pred, ctx.centers[sl]):
                block = row.reshape(s, s, s)
                x, y, z = origin
                labels[x : x + s, y : y + s, z : z + s] = block

    # nearest fill for voxels the sliding window never classified
    classified = np.argwhere(labels >= 0)
    lo = classified.min(axis=0)
    hi = classified.max(axis=0)
    xi = np.clip(np.arange(labels.shape[0]), lo[0], hi[0])
    yi = np.clip(np.arange(labels.shape[1]), lo[1], hi[1])
    zi = np.clip(np.arange(labels.shape[2]), lo[2], hi[2])
    filled = labels[np.ix_(xi, yi, zi)]
    assert (filled >= 0).all()
    return filled.astype(np.int32)
