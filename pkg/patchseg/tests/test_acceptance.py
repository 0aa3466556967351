"""Acceptance gate for the segmentation component.

Each test prints one PASS/FAIL line. The end-to-end test builds its data by
invoking the tracking engine's command line and exchanges volumes with it
purely through NIfTI files.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from patchseg.config import SegModelConfig
from patchseg.data import extract_contexts
from patchseg.infer import infer_5tt
from patchseg.losses import loss_ss1, loss_ss2, loss_supervised, loss_total
from patchseg.model import DualContextNet
from patchseg.train import compute_loss, train_alternating
from patchseg import niftiio


def report(criterion: str, passed: bool, detail: str = ""):
    tag = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {criterion}: {tag} {detail}".rstrip())
    assert passed, f"{criterion}: {detail}"


class TestCriterion9GradientCheck:
    def test_total_loss_gradients(self):
        cfg = SegModelConfig(
            embed_dim=16, n_heads=2, ff_dim=32, decoder_hidden=16,
            batch_size=8, seed=0,
        )
        torch.manual_seed(0)
        model = DualContextNet(cfg).double()
        k = 8
        x1 = torch.randn(k, 26, cfg.patch_values, dtype=torch.float64)
        x2 = torch.randn(k, 124, cfg.patch_values, dtype=torch.float64)
        xc = torch.randn(k, cfg.patch_values, dtype=torch.float64)
        yc = torch.randint(0, cfg.n_classes, (k, cfg.patch_voxels))

        def loss_fn():
            return compute_loss(model, cfg, x1, x2, xc, yc)

        loss = loss_fn()
        loss.backward()
        grads = {n: p.grad.clone() for n, p in model.named_parameters()}

        eps = 1e-5
        rng = np.random.default_rng(1)
        worst = 0.0
        n_checked = 0
        with torch.no_grad():
            for name, p in model.named_parameters():
                flat = p.view(-1)
                gflat = grads[name].view(-1)
                n_pick = min(12, flat.numel())
                picks = rng.choice(flat.numel(), size=n_pick, replace=False)
                for i in picks:
                    orig = float(flat[i])
                    flat[i] = orig + eps
                    up = float(loss_fn())
                    flat[i] = orig - eps
                    down = float(loss_fn())
                    flat[i] = orig
                    fd = (up - down) / (2 * eps)
                    g = float(gflat[i])
                    denom = max(abs(fd), abs(g), 1e-8)
                    worst = max(worst, abs(fd - g) / denom)
                    n_checked += 1
        report(
            "9 gradient check",
            worst < 1e-4,
            f"({n_checked} parameters across every tensor, worst rel err {worst:.2e})",
        )


class TestCriterion10LossHandValues:
    def test_hand_computed_examples(self):
        checks = []

        # cross-entropy of a uniform 5-class prediction over a 5^3 patch
        probs = torch.full((1, 125, 5), 0.2, dtype=torch.float64)
        y = torch.zeros(1, 125, dtype=torch.long)
        ce = float(loss_supervised(probs, y))
        checks.append(("uniform CE", abs(ce - 125 * math.log(5)) < 1e-9))

        # first self-supervised loss on the two-sample hand example: 0.1
        z = torch.tensor([[1.2, 1.6], [-1.2, -1.6]], dtype=torch.float64)
        v = float(loss_ss1(z, z.clone(), alpha=0.05))
        checks.append(("L_SS1 = 0.1", abs(v - 0.1) < 1e-12))

        # antiparallel representations contribute 2 per sample
        z4 = torch.tensor(
            [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], dtype=torch.float64
        )
        v = float(loss_ss1(z4, -z4, alpha=0.0))
        checks.append(("antiparallel cosine", abs(v - 2.0) < 1e-12))

        # reconstruction: perfect is 0, unit perturbation is 1
        x = torch.randn(1, 375, dtype=torch.float64)
        checks.append(("perfect recon", float(loss_ss2(x, x.clone())) == 0.0))
        xh = x.clone()
        xh[0, 10] += 1.0
        checks.append(("unit recon", abs(float(loss_ss2(xh, x)) - 1.0) < 1e-12))

        # total loss: 1 + 0.1*2 + 0.1*3 = 1.5; unlabeled drops the first term
        checks.append(("total 1.5", abs(loss_total(1.0, 2.0, 3.0, 0.1, 0.1) - 1.5) < 1e-15))
        checks.append(("unlabeled 0.5", abs(loss_total(None, 2.0, 3.0, 0.1, 0.1) - 0.5) < 1e-15))
        checks.append(("all zero", loss_total(0.0, 0.0, 0.0, 0.1, 0.1) == 0.0))

        failed = [name for name, ok in checks if not ok]
        report(
            "10 loss-stack hand values",
            not failed,
            f"({len(checks)} identities)" if not failed else f"(failed: {failed})",
        )


class TestCriterion11EndToEndTraining:
    def test_toy_training_and_export(self, tmp_path):
        t_start = time.time()
        out = tmp_path / "ph"
        subprocess.run(
            [
                sys.executable, "-m", "tractkit.cli", "phantom",
                "--kind", "straight", "--dims", "45,45,45", "--spacing", "1.0",
                "--bundle-radius", "5.0", "--margin", "11", "--cap", "3.0",
                "--with-dmri", "--ndirs", "16", "--nb0", "2",
                "--noise-sigma", "1.5", "--seed", "3", "--out-dir", str(out),
            ],
            check=True, capture_output=True,
        )
        subprocess.run(
            [
                sys.executable, "-m", "tractkit.cli", "fit",
                "--dmri", str(out / "dmri.nii.gz"),
                "--bvals", str(out / "dmri.bval"),
                "--bvecs", str(out / "dmri.bvec"),
                "--out-prefix", str(out / "sub"),
            ],
            check=True, capture_output=True,
        )

        dirmap, _ = niftiio.read_nifti(out / "sub_dirmap.nii.gz")
        labels, affine = niftiio.read_nifti(out / "tt.nii.gz")
        dirmap = np.asarray(dirmap, dtype=np.float32)
        labels = np.asarray(labels).astype(np.int64)

        cfg = SegModelConfig(
            embed_dim=48, n_heads=4, ff_dim=96, decoder_hidden=64,
            batch_size=50, seed=1,
        )
        batch = extract_contexts(dirmap, labels, s=cfg.patch_size, stride=4)
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(batch))
        n_held = max(1, len(batch) * 15 // 100)
        held, train_idx = perm[:n_held], perm[n_held:]

        # gray matter caps are a sub-percent class visible only through
        # context; replicate cap-bearing samples so batches see them
        has_gm = (batch.y_center == 1).any(axis=1)
        gm_train = [i for i in train_idx if has_gm[i]]
        train_aug = np.concatenate([train_idx, np.repeat(gm_train, 3)])

        from patchseg.data import ContextBatch

        def subset(idx):
            return ContextBatch(
                x1=batch.x1[idx], x2=batch.x2[idx], x_center=batch.x_center[idx],
                y_center=batch.y_center[idx], centers=batch.centers[idx],
            )

        labeled = subset(train_aug)
        unlabeled = ContextBatch(
            x1=labeled.x1, x2=labeled.x2, x_center=labeled.x_center,
            y_center=None, centers=labeled.centers,
        )
        result = train_alternating(labeled, unlabeled, cfg, epochs=25)
        # training-run oracle: clear downward trend on the phantom patches
        assert result.history[-1]["train_loss"] < 0.5 * result.history[0]["train_loss"]

        model = result.model
        model.eval()
        ht = subset(held)
        with torch.no_grad():
            _z1, _z2, _xh, probs = model(
                torch.as_tensor(ht.x1), torch.as_tensor(ht.x2)
            )
        pred = probs.argmax(dim=-1).numpy()
        acc = float((pred == ht.y_center).mean())

        # export a 5TT volume and push it through the tracking engine
        tt_pred = infer_5tt(dirmap, model)
        assert set(np.unique(tt_pred)) <= set(range(5))
        pred_path = tmp_path / "tt_pred.nii.gz"
        niftiio.write_nifti(pred_path, tt_pred.astype(np.int32), affine)

        from tractkit.act import gmwmi_extract, load_5tt

        tt_loaded = load_5tt(pred_path)
        iface = gmwmi_extract(tt_loaded)
        elapsed = time.time() - t_start

        report(
            "11 end-to-end toy training",
            acc >= 0.90 and len(iface) > 0 and elapsed < 900.0,
            f"(held-out voxel accuracy {acc:.3f}, interface voxels {len(iface)}, {elapsed:.0f}s)",
        )
