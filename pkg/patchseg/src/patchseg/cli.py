"""Train and inference entry points.

Inputs are NIfTI volumes produced by the tractography engine's CLI (the
fit subcommand's dirmap output and phantom tissue labels); the trained
model exports a 5TT label volume the engine can load directly.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import niftiio
from .config import SegModelConfig
from .data import extract_contexts
from .infer import infer_5tt
from .train import TrainingDiverged, load_checkpoint, save_checkpoint, save_history_csv, train_alternating


def _load_dirmap(path: str) -> tuple[np.ndarray, np.ndarray]:
    data, affine = niftiio.read_nifti(path)
    if data.ndim != 4 or data.shape[3] != 3:
        raise ValueError(f"{path}: expected a 3-channel direction map")
    return np.asarray(data, dtype=np.float32), affine


def cmd_train(args) -> int:
    dirmap, _ = _load_dirmap(args.dirmap)
    labels, _ = niftiio.read_nifti(args.labels)
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError("labels must be a 3-D integer volume")
    cfg = SegModelConfig(
        embed_dim=args.embed_dim,
        encoder_depth=args.depth,
        n_heads=args.heads,
        ff_dim=args.ff_dim,
        decoder_hidden=args.decoder_hidden,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
    )
    labeled = extract_contexts(dirmap, labels, s=cfg.patch_size, stride=args.stride)
    if args.unlabeled_dirmap:
        unl_dirmap, _ = _load_dirmap(args.unlabeled_dirmap)
        unlabeled = extract_contexts(unl_dirmap, None, s=cfg.patch_size, stride=args.stride)
    else:
        unlabeled = extract_contexts(dirmap, None, s=cfg.patch_size, stride=args.stride)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = train_alternating(labeled, unlabeled, cfg, epochs=args.epochs)
    except TrainingDiverged as exc:
        save_history_csv(exc.history, out_dir / "history.csv")
        raise
    save_checkpoint(result, out_dir / "checkpoint.pt")
    save_history_csv(result.history, out_dir / "history.csv")
    print(f"checkpoint={out_dir / 'checkpoint.pt'}")
    print(f"history={out_dir / 'history.csv'}")
    print(f"final_train_loss={result.history[-1]['train_loss']:.6g}")
    print(f"final_val_loss={result.history[-1]['val_loss']:.6g}")
    return 0


def cmd_infer(args) -> int:
    dirmap, affine = _load_dirmap(args.dirmap)
    model, _history = load_checkpoint(args.checkpoint)
    labels = infer_5tt(dirmap, model)
    niftiio.write_nifti(args.out, labels.astype(np.int32), affine)
    print(f"tt={args.out}")
    values, counts = np.unique(labels, return_counts=True)
    for v, c in zip(values, counts):
        print(f"label_{v}={c}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a direction map + label volume")
    p.add_argument("--dirmap", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--unlabeled-dirmap", help="separate unlabeled volume (defaults to dirmap)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ff-dim", type=int, default=256)
    p.add_argument("--decoder-hidden", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("infer", help="classify a direction map into 5TT labels")
    p.add_argument("--dirmap", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_infer)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, OSError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
