import numpy as np
import pytest
import torch

from patchseg.config import SegModelConfig
from patchseg.data import extract_contexts
from patchseg.train import (
    load_checkpoint,
    save_checkpoint,
    save_history_csv,
    train_alternating,
)


def toy_config(**kw):
    base = dict(
        embed_dim=16, ff_dim=32, decoder_hidden=16, n_heads=2,
        batch_size=8, seed=0,
    )
    base.update(kw)
    return SegModelConfig(**base)


def synthetic_batches(n_vol=1, size=25, seed=0):
    """Structured toy volumes: a bright slab labeled 1 against background."""
    rng = np.random.default_rng(seed)
    dirmap = rng.normal(0, 0.02, (size, size, size, 3)).astype(np.float32)
    labels = np.zeros((size, size, size), dtype=np.int64)
    dirmap[8:17, :, :, 0] += 0.8
    labels[8:17] = 3
    labeled = extract_contexts(dirmap, labels, stride=2)
    unlabeled = extract_contexts(dirmap, None, stride=2)
    return labeled, unlabeled


class TestTrainAlternating:
    def test_batch_log_alternates(self):
        labeled, unlabeled = synthetic_batches()
        cfg = toy_config()
        result = train_alternating(labeled, unlabeled, cfg, epochs=1)
        log = result.batch_log
        assert log[0] == "U"
        assert all(k == ("U" if i % 2 == 0 else "L") for i, k in enumerate(log))

    def test_lr_decays_exactly_when_val_plateaus(self):
        labeled, unlabeled = synthetic_batches()
        cfg = toy_config()
        result = train_alternating(labeled, unlabeled, cfg, epochs=8)
        # reconstruct the rule: lr shrinks by exactly 0.9 after an epoch
        # whose validation loss failed to improve on the best so far
        best = np.inf
        lr = cfg.learning_rate
        for h in result.history:
            if h["val_loss"] >= best:
                lr *= cfg.plateau_factor
            best = min(best, h["val_loss"])
            assert h["lr"] == pytest.approx(lr, rel=1e-12)
        assert result.history[0]["lr"] == pytest.approx(1e-3)

    def test_lr_exact_decay_value(self):
        labeled, unlabeled = synthetic_batches()
        cfg = toy_config(learning_rate=1e-3)
        result = train_alternating(labeled, unlabeled, cfg, epochs=4)
        lrs = {round(h["lr"], 12) for h in result.history}
        allowed = {round(1e-3 * 0.9**i, 12) for i in range(5)}
        assert lrs <= allowed

    def test_loss_decreases(self):
        labeled, unlabeled = synthetic_batches()
        cfg = toy_config()
        result = train_alternating(labeled, unlabeled, cfg, epochs=6)
        first = result.history[0]["train_loss"]
        last = result.history[-1]["train_loss"]
        assert last < first

    def test_history_and_checkpoint_roundtrip(self, tmp_path):
        labeled, unlabeled = synthetic_batches()
        cfg = toy_config()
        result = train_alternating(labeled, unlabeled, cfg, epochs=2)
        save_history_csv(result.history, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert len(lines) == 3

        save_checkpoint(result, tmp_path / "c.pt")
        model, history = load_checkpoint(tmp_path / "c.pt")
        assert len(history) == 2
        x1 = torch.randn(2, 26, cfg.patch_values)
        x2 = torch.randn(2, 124, cfg.patch_values)
        z1a, _, _, _ = result.model(x1, x2)
        z1b, _, _, _ = model(x1, x2)
        assert torch.allclose(z1a, z1b, atol=1e-6)

    def test_requires_labels(self):
        labeled, unlabeled = synthetic_batches()
        cfg = toy_config()
        with pytest.raises(ValueError):
            train_alternating(unlabeled, unlabeled, cfg, epochs=1)
