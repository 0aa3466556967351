import hashlib
import json

import numpy as np
import pytest

from tractkit import tck
from tractkit.cli import main
from tractkit.grid import load_volume


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(stdout):
    pairs = {}
    for line in stdout.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            pairs[k] = v
    return pairs


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ph")
    code = main([
        "phantom", "--kind", "curved_torus", "--out-dir", str(out),
        "--dims", "36,36,16", "--spacing", "0.25", "--torus-radius", "3.2",
        "--bundle-radius", "1.2", "--cap", "0.75", "--with-dmri",
        "--ndirs", "16", "--nb0", "2", "--seed", "3",
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def fitted_prefix(phantom_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "sub"
    code = main([
        "fit", "--dmri", str(phantom_dir / "dmri.nii.gz"),
        "--bvals", str(phantom_dir / "dmri.bval"),
        "--bvecs", str(phantom_dir / "dmri.bvec"),
        "--out-prefix", str(out),
    ])
    assert code == 0
    return out


class TestPhantomCmd:
    def test_outputs_exist(self, phantom_dir):
        for name in ("tensors.nii.gz", "tt.nii.gz", "truth_mask.nii.gz",
                     "manifest.txt", "dmri.nii.gz", "dmri.bval", "dmri.bvec",
                     "run.cfg"):
            assert (phantom_dir / name).exists()

    def test_deterministic(self, tmp_path, capsys):
        hashes = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            code, _, _ = run_cli(
                capsys, "phantom", "--out-dir", str(out), "--kind", "straight",
                "--dims", "32,16,16", "--spacing", "0.5", "--with-dmri",
                "--noise-sigma", "1.0", "--seed", "9",
            )
            assert code == 0
            h = hashlib.sha256()
            for name in sorted(p.name for p in out.iterdir()):
                h.update((out / name).read_bytes())
            hashes.append(h.hexdigest())
        assert hashes[0] == hashes[1]

    def test_bad_spec_fails(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys, "phantom", "--out-dir", str(tmp_path / "x"),
            "--dims", "8,8,8", "--bundle-radius", "5.0",
        )
        assert code == 1
        assert "error:" in err


class TestFitCmd:
    def test_outputs(self, fitted_prefix, phantom_dir):
        for suffix in ("tensors", "s0", "mask", "fa", "md", "v1", "dirmap"):
            assert (fitted_prefix.parent / f"{fitted_prefix.name}_{suffix}.nii.gz").exists()
        # noiseless synth: fitted tensors match the phantom's
        fitted = load_volume(f"{fitted_prefix}_tensors.nii.gz")
        truth = load_volume(str(phantom_dir / "tensors.nii.gz"))
        scale = np.abs(truth.data).max()
        assert np.abs(fitted.data - truth.data).max() / scale < 1e-5

    def test_missing_file_errors(self, tmp_path, capsys):
        code, _, err = run_cli(
            capsys, "fit", "--dmri", str(tmp_path / "none.nii"),
            "--bvals", str(tmp_path / "b"), "--bvecs", str(tmp_path / "v"),
            "--out-prefix", str(tmp_path / "o"),
        )
        assert code == 1


class TestOdfCmd:
    def test_pmf_dump(self, phantom_dir, tmp_path, capsys):
        mask = str(phantom_dir / "truth_mask.nii.gz")
        out = tmp_path / "pmf.nii.gz"
        code, stdout, _ = run_cli(
            capsys, "odf", "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--out", str(out), "--k", "4", "--mask", mask,
        )
        assert code == 0
        pmf = load_volume(out)
        assert pmf.n_channels == 724
        truth = load_volume(mask).data.astype(bool)
        sums = pmf.data[truth].sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-5
        assert np.abs(pmf.data[~truth]).max() == 0.0

    def test_literal_flag(self, phantom_dir, tmp_path, capsys):
        out = tmp_path / "pmf_lit.nii.gz"
        code, _, _ = run_cli(
            capsys, "odf", "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--out", str(out), "--k", "1", "--dodf-literal",
            "--mask", str(phantom_dir / "truth_mask.nii.gz"),
        )
        assert code == 0
        assert out.exists()


class TestTrackCmd:
    def test_track_prob_and_judge(self, phantom_dir, tmp_path, capsys):
        out = tmp_path / "tracks.tck"
        code, stdout, _ = run_cli(
            capsys, "track", "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--tt", str(phantom_dir / "tt.nii.gz"), "--out", str(out),
            "--count", "20", "--seed", "5",
        )
        assert code == 0
        pairs = kv(stdout)
        assert pairs["accepted"] == "20"
        streamlines, fields = tck.read_tck(out)
        assert len(streamlines) == 20
        assert fields["algorithm"] == "act_prob"
        assert (tmp_path / "tracks.tck.cfg").exists()

        code, stdout, _ = run_cli(
            capsys, "judge", "--tck", str(out), "--tt", str(phantom_dir / "tt.nii.gz"),
            "--report", str(tmp_path / "verdicts.jsonl"),
        )
        assert code == 0
        pairs = kv(stdout)
        assert pairs["accept"] == "20"
        lines = (tmp_path / "verdicts.jsonl").read_text().splitlines()
        assert len(lines) == 20
        assert all(json.loads(l)["verdict"] == "accept" for l in lines)

    def test_track_fact(self, phantom_dir, tmp_path, capsys):
        out = tmp_path / "fact.tck"
        code, stdout, _ = run_cli(
            capsys, "track", "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--tt", str(phantom_dir / "tt.nii.gz"), "--out", str(out),
            "--algorithm", "fact", "--count", "15", "--angle", "30", "--step", "0.6",
        )
        assert code == 0
        streamlines, _ = tck.read_tck(out)
        assert len(streamlines) == 15

    def test_byte_identical_reruns(self, phantom_dir, tmp_path, capsys):
        outs = []
        for name in ("r1.tck", "r2.tck"):
            out = tmp_path / name
            code, _, _ = run_cli(
                capsys, "track", "--tensors", str(phantom_dir / "tensors.nii.gz"),
                "--tt", str(phantom_dir / "tt.nii.gz"), "--out", str(out),
                "--count", "10", "--seed", "11",
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_config_file(self, phantom_dir, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("count=7\nseed=2\n")
        out = tmp_path / "cfg.tck"
        code, stdout, _ = run_cli(
            capsys, "track", "--config", str(cfg),
            "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--tt", str(phantom_dir / "tt.nii.gz"), "--out", str(out),
        )
        assert code == 0
        assert kv(stdout)["accepted"] == "7"

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["track", "--nonsense"])
        assert exc.value.code == 2


class TestDensityChain:
    def test_density_binarize_metrics(self, phantom_dir, tmp_path, capsys):
        tck_path = tmp_path / "t.tck"
        code, _, _ = run_cli(
            capsys, "track", "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--tt", str(phantom_dir / "tt.nii.gz"), "--out", str(tck_path),
            "--count", "30", "--seed", "1",
        )
        assert code == 0

        dens = tmp_path / "d.nii.gz"
        code, stdout, _ = run_cli(
            capsys, "density", "--tck", str(tck_path),
            "--ref", str(phantom_dir / "tt.nii.gz"), "--out", str(dens),
        )
        assert code == 0
        assert int(kv(stdout)["nonzero_voxels"]) > 50

        mask = tmp_path / "m.nii.gz"
        code, stdout, _ = run_cli(
            capsys, "binarize", "--density", str(dens), "--out", str(mask), "--pct", "1",
        )
        assert code == 0

        code, stdout, _ = run_cli(capsys, "metrics", str(mask), str(mask))
        assert code == 0
        pairs = kv(stdout)
        assert pairs["dsc"] == "1"
        assert pairs["hd95_mm"] == "0"

        report = tmp_path / "r.jsonl"
        code, _, _ = run_cli(
            capsys, "metrics", str(mask), str(phantom_dir / "truth_mask.nii.gz"),
            "--report", str(report),
        )
        assert code == 0
        rec = json.loads(report.read_text().splitlines()[0])
        assert 0.0 <= rec["dsc"] <= 1.0

    def test_filter(self, phantom_dir, tmp_path, capsys):
        tck_path = tmp_path / "t.tck"
        run_cli(
            capsys, "track", "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--tt", str(phantom_dir / "tt.nii.gz"), "--out", str(tck_path),
            "--count", "10", "--seed", "2",
        )
        out = tmp_path / "f.tck"
        code, stdout, _ = run_cli(
            capsys, "filter", "--tck", str(tck_path), "--out", str(out),
            "--include", str(phantom_dir / "truth_mask.nii.gz"),
        )
        assert code == 0
        assert int(kv(stdout)["kept"]) == 10

        code, stdout, _ = run_cli(
            capsys, "filter", "--tck", str(tck_path), "--out", str(out),
            "--exclude", str(phantom_dir / "truth_mask.nii.gz"),
        )
        assert code == 0
        assert int(kv(stdout)["kept"]) == 0


class TestRobustnessCmd:
    def test_report_and_pairs(self, phantom_dir, tmp_path, capsys):
        out_dir = tmp_path / "rob"
        code, stdout, _ = run_cli(
            capsys, "robustness", "--tensors", str(phantom_dir / "tensors.nii.gz"),
            "--tt", str(phantom_dir / "tt.nii.gz"), "--out-dir", str(out_dir),
            "--angles", "15,25", "--count", "15", "--seed", "4",
        )
        assert code == 0
        pairs = kv(stdout)
        assert "pair_15_25_dsc" in pairs
        assert "mean_dsc" in pairs
        report = (out_dir / "robustness.jsonl").read_text().splitlines()
        assert len(report) == 2  # one pair + summary
        assert (out_dir / "act_prob_angle15.tck").exists()
        assert (out_dir / "act_prob_angle25_mask.nii.gz").exists()
