"""Alternating supervised/self-supervised training.

Odd iterations (1st, 3rd, ...) consume a batch of unlabeled data with the
supervised term dropped; even iterations consume labeled data with the full
loss. After every epoch the validation loss decides whether the learning
rate is scaled by the plateau factor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import SegModelConfig
from .data import ContextBatch
from .losses import loss_ss1, loss_ss2, loss_supervised, loss_total
from .model import DualContextNet


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainResult:
    model: DualContextNet
    history: list[dict] = field(default_factory=list)
    batch_log: list[str] = field(default_factory=list)  # 'U'/'L' per iteration


def _batches(n: int, k: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, k):
        yield order[start : start + k]


def _to_tensors(batch: ContextBatch, idx: np.ndarray, device, dtype):
    x1 = torch.as_tensor(batch.x1[idx], dtype=dtype, device=device)
    x2 = torch.as_tensor(batch.x2[idx], dtype=dtype, device=device)
    xc = torch.as_tensor(batch.x_center[idx], dtype=dtype, device=device)
    yc = None
    if batch.y_center is not None:
        yc = torch.as_tensor(batch.y_center[idx], dtype=torch.long, device=device)
    return x1, x2, xc, yc


def compute_loss(model, cfg, x1, x2, xc, yc):
    """Total loss for one batch; yc None drops the supervised term."""
    z1, z2, x_hat, probs = model(x1, x2)
    l_ss1 = loss_ss1(z1, z2, cfg.alpha)
    l_ss2 = loss_ss2(x_hat, xc, cfg.recon_norm)
    l_s = loss_supervised(probs, yc) if yc is not None else None
    return loss_total(l_s, l_ss1, l_ss2, cfg.lambda1, cfg.lambda2)


def train_alternating(
    labeled: ContextBatch,
    unlabeled: ContextBatch,
    cfg: SegModelConfig,
    epochs: int = 20,
    device: str = "cpu",
    dtype=torch.float32,
) -> TrainResult:
    if labeled.y_center is None:
        raise ValueError("labeled set has no labels")
    if len(labeled) < 4:
        raise ValueError("labeled set too small to split for validation")
    torch.manual_seed(cfg.seed)
    model = DualContextNet(cfg).to(device=device, dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    rng = np.random.default_rng(cfg.seed)
    n_val = max(1, int(round(cfg.val_fraction * len(labeled))))
    perm = rng.permutation(len(labeled))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    result = TrainResult(model=model)
    best_val = np.inf
    lr = cfg.learning_rate
    for epoch in range(1, epochs + 1):
        model.train()
        labeled_batches = list(_batches(len(train_idx), cfg.batch_size, rng))
        train_losses = []
        iteration = 0
        for lab in labeled_batches:
            for kind in ("U", "L"):  # odd iteration unlabeled, even labeled
                iteration += 1
                result.batch_log.append(kind)
                if kind == "U":
                    pick = rng.integers(0, len(unlabeled), size=min(cfg.batch_size, len(unlabeled)))
                    x1, x2, xc, _ = _to_tensors(unlabeled, pick, device, dtype)
                    loss = compute_loss(model, cfg, x1, x2, xc, None)
                else:
                    idx = train_idx[lab]
                    x1, x2, xc, yc = _to_tensors(labeled, idx, device, dtype)
                    loss = compute_loss(model, cfg, x1, x2, xc, yc)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}", result.history
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                train_losses.append(float(loss.detach()))

        model.eval()
        with torch.no_grad():
            x1, x2, xc, yc = _to_tensors(labeled, val_idx, device, dtype)
            val_loss = float(compute_loss(model, cfg, x1, x2, xc, yc))
        if val_loss >= best_val:
            lr *= cfg.plateau_factor
            for group in opt.param_groups:
                group["lr"] = lr
        best_val = min(best_val, val_loss)
        result.history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(train_losses)),
                "val_loss": val_loss,
                "lr": lr,
            }
        )
    return result


def save_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
        writer.writeheader()
        writer.writerows(history)


CHECKPOINT_VERSION = 1


def save_checkpoint(result: TrainResult, path: str | Path) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": result.model.config.to_dict(),
            "state_dict": result.model.state_dict(),
            "history": result.history,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[DualContextNet, list[dict]]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    cfg = SegModelConfig(**blob["config"])
    model = DualContextNet(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob["history"]
