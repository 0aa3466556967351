"""Command-line interface: the pipeline as composable subcommands.

Every run writes its resolved configuration as key=value text next to its
primary output, so results can be reproduced from the artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import act, dti, metrics, odf, phantom, tck, tracker
from .errors import TractkitError
from .grid import VoxelGrid, load_volume, save_volume


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated ints, got {text!r}")
    return tuple(parts)


def _parse_angles(text: str) -> list[float]:
    return [float(p) for p in text.split(",")]


def _write_config(path: Path, items: dict) -> None:
    lines = [f"{k}={items[k]}" for k in sorted(items)]
    path.write_text("\n".join(lines) + "\n")


def _emit(key: str, value) -> None:
    print(f"{key}={value}")


def cmd_phantom(args) -> int:
    spec = phantom.PhantomSpec(
        kind=args.kind,
        dims=args.dims,
        spacing=args.spacing,
        bundle_radius_mm=args.bundle_radius,
        lambda_parallel=args.lambda_par,
        lambda_perp=args.lambda_perp,
        torus_radius_mm=args.torus_radius,
        crossing_angle_deg=args.crossing_angle,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        cap_mm=args.cap,
        margin_vox=args.margin,
    )
    ph = phantom.make_phantom(spec)
    out = Path(args.out_dir)
    paths = phantom.write_phantom(ph, out)
    if args.with_dmri:
        protocol = dti.make_protocol(args.ndirs, args.nb0, args.bval)
        rng = np.random.default_rng(spec.seed)
        dmri = phantom.synth_signal(ph.tensors, protocol, s0=args.s0,
                                    noise_sigma=spec.noise_sigma, rng=rng)
        save_volume(dmri, out / "dmri.nii.gz")
        dti.save_protocol(protocol, out / "dmri.bval", out / "dmri.bvec")
        paths["dmri"] = out / "dmri.nii.gz"
    _write_config(out / "run.cfg", {**vars(spec), "with_dmri": args.with_dmri})
    for key, p in paths.items():
        _emit(key, p)
    return 0


def cmd_fit(args) -> int:
    dmri = load_volume(args.dmri)
    protocol = dti.load_protocol(args.bvals, args.bvecs)
    mask = load_volume(args.mask) if args.mask else None
    tf = dti.fit_wlls(dmri, protocol, mask)
    sm = dti.derive_scalars(tf)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs = {
        "tensors": (tf.tensors, f"{prefix}_tensors.nii.gz"),
        "s0": (tf.s0, f"{prefix}_s0.nii.gz"),
        "mask": (tf.mask, f"{prefix}_mask.nii.gz"),
        "fa": (sm.fa, f"{prefix}_fa.nii.gz"),
        "md": (sm.md, f"{prefix}_md.nii.gz"),
        "v1": (sm.v1, f"{prefix}_v1.nii.gz"),
        "dirmap": (sm.dirmap, f"{prefix}_dirmap.nii.gz"),
    }
    for key, (grid, path) in outputs.items():
        save_volume(grid, path)
        _emit(key, path)
    for key, value in tf.stats.items():
        _emit(key, value)
    _emit("fa_clamped_eigenvalues", sm.clamp_count)
    _write_config(Path(f"{prefix}.cfg"), {
        "dmri": args.dmri, "bvals": args.bvals, "bvecs": args.bvecs,
        "mask": args.mask or "", "out_prefix": args.out_prefix,
    })
    return 0


def cmd_odf(args) -> int:
    tensors_grid = load_volume(args.tensors)
    if tensors_grid.n_channels != 6:
        raise TractkitError("tensor volume must have 6 channels")
    tf = dti.TensorField(
        tensors=tensors_grid,
        s0=tensors_grid.with_data(np.ones(tensors_grid.shape3)),
        mask=tensors_grid.with_data(np.ones(tensors_grid.shape3, dtype=np.uint8)),
    )
    sphere = odf.build_sphere()
    mask = load_volume(args.mask).data.astype(bool) if args.mask else None
    nx, ny, nz = tensors_grid.shape3
    out = np.zeros((nx, ny, nz, len(sphere)), dtype=np.float32)
    if args.literal:
        six = tensors_grid.data
        for idx in np.ndindex(nx, ny, nz):
            if mask is not None and not mask[idx]:
                continue
            d = dti.six_to_matrix(six[idx])
            vals = odf.dodf_eval(odf.regularize_tensor(d), sphere, literal=True)
            pmf = odf.sharpen_normalize(vals, args.k, sphere)
            out[idx] = pmf.probabilities
    else:
        field = tracker.PmfField(tf, sphere, args.k)
        centers = np.array(list(np.ndindex(nx, ny, nz)), dtype=np.float64)
        world = tensors_grid.affine.voxel_to_world(centers)
        keep = np.ones(len(centers), dtype=bool)
        if mask is not None:
            keep = mask.reshape(-1)
        for start in range(0, len(world), 4096):
            sl = slice(start, min(start + 4096, len(world)))
            rows = keep[sl]
            if not rows.any():
                continue
            probs, ok = field.pmf_batch(world[sl][rows])
            block = np.zeros((sl.stop - sl.start, len(sphere)), dtype=np.float32)
            block[rows] = np.where(np.isfinite(probs), probs, 0.0).astype(np.float32)
            out.reshape(-1, len(sphere))[sl] = block
    save_volume(VoxelGrid(out.astype(np.float64), tensors_grid.affine), args.out)
    _emit("pmf", args.out)
    _write_config(Path(str(args.out) + ".cfg"), {
        "tensors": args.tensors, "k": args.k, "literal": args.literal,
        "mask": args.mask or "",
    })
    return 0


def _tracker_config(args) -> tracker.TrackerConfig:
    return tracker.TrackerConfig(
        step_mm=args.step,
        angle_deg=args.angle,
        k=args.k,
        target_count=args.count,
        rng_seed=args.seed,
        algorithm=args.algorithm,
        fact_fa_stop=args.fact_fa_stop,
        fact_nearest_tensor=args.fact_nearest,
        threads=args.threads,
    )


def _load_tensor_field(path: str) -> dti.TensorField:
    grid = load_volume(path)
    if grid.n_channels != 6:
        raise TractkitError("tensor volume must have 6 channels")
    return dti.TensorField(
        tensors=grid,
        s0=grid.with_data(np.ones(grid.shape3)),
        mask=grid.with_data(np.ones(grid.shape3, dtype=np.uint8)),
    )


def _run_track(tensors_path, tt_path, cfg, out_path) -> tracker.Tractogram:
    tf = _load_tensor_field(tensors_path)
    tt = act.load_5tt(tt_path)
    tg = tracker.track_whole_brain(tf, tt, cfg)
    fields = {
        "step_size": cfg.step_mm,
        "angle_threshold_deg": cfg.angle_deg,
        "sharpening_k": cfg.k,
        "algorithm": cfg.algorithm,
        "rng_seed": cfg.rng_seed,
    }
    tck.write_tck(out_path, tg.point_lists(), extra_fields=fields)
    return tg


def cmd_track(args) -> int:
    cfg = _tracker_config(args)
    tg = _run_track(args.tensors, args.tt, cfg, args.out)
    _emit("tck", args.out)
    _emit("accepted", len(tg))
    _emit("attempts", tg.attempts)
    for reason, n in sorted(tg.rejections.items()):
        _emit(f"rejected_{reason}", n)
    _write_config(Path(str(args.out) + ".cfg"), {
        **cfg.to_dict(), "tensors": args.tensors, "tt": args.tt, "out": str(args.out),
    })
    return 0


def cmd_judge(args) -> int:
    streamlines, _fields = tck.read_tck(args.tck)
    tt = act.load_5tt(args.tt)
    bounds = act.length_bounds(tt)
    counts: dict[str, int] = {"accept": 0}
    records = []
    for i, pts in enumerate(streamlines):
        if len(pts) < 2:
            verdict = "degenerate_path"
        else:
            ok, reason = act.judge_streamline(pts, tt, bounds)
            verdict = "accept" if ok else reason
        counts[verdict] = counts.get(verdict, 0) + 1
        records.append({"index": i, "verdict": verdict})
    _emit("streamlines", len(streamlines))
    _emit("length_min_mm", f"{bounds.min_mm:.6g}")
    _emit("length_max_mm", f"{bounds.max_mm:.6g}")
    for verdict in sorted(counts):
        _emit(verdict, counts[verdict])
    if args.report:
        with open(args.report, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return 0


def cmd_density(args) -> int:
    streamlines, _ = tck.read_tck(args.tck)
    ref = load_volume(args.ref)
    dm = metrics.density_map(streamlines, ref)
    save_volume(dm, args.out)
    _emit("density", args.out)
    _emit("nonzero_voxels", int((dm.data > 0).sum()))
    _write_config(Path(str(args.out) + ".cfg"), {
        "tck": args.tck, "ref": args.ref, "out": str(args.out),
    })
    return 0


def cmd_binarize(args) -> int:
    dm = load_volume(args.density)
    mask = metrics.binarize_percentile(dm, pct=args.pct)
    save_volume(mask, args.out)
    _emit("mask", args.out)
    _emit("voxels", int(mask.data.sum()))
    _write_config(Path(str(args.out) + ".cfg"), {
        "density": args.density, "pct": args.pct, "out": str(args.out),
    })
    return 0


def cmd_metrics(args) -> int:
    a = load_volume(args.mask_a)
    b = load_volume(args.mask_b)
    res = metrics.all_mask_metrics(a, b)
    for key, value in res.items():
        _emit(key, f"{value:.6g}")
    if args.report:
        with open(args.report, "a") as fh:
            fh.write(json.dumps({"a": str(args.mask_a), "b": str(args.mask_b), **res},
                                sort_keys=True) + "\n")
    return 0


def cmd_filter(args) -> int:
    streamlines, fields = tck.read_tck(args.tck)
    include = [load_volume(p) for p in args.include or []]
    exclude = [load_volume(p) for p in args.exclude or []]
    cfg = tracker.TrackerConfig(target_count=max(1, len(streamlines)))
    sls = [
        tracker.Streamline(points=p, seed_voxel=(0, 0, 0), stream_id=i)
        for i, p in enumerate(streamlines)
    ]
    tg = tracker.Tractogram(streamlines=sls, config=cfg, rejections={}, attempts=len(sls))
    kept = metrics.filter_by_rois(tg, include=include, exclude=exclude)
    tck.write_tck(args.out, kept.point_lists())
    _emit("tck", args.out)
    _emit("kept", len(kept))
    _emit("dropped", len(streamlines) - len(kept))
    return 0


def cmd_robustness(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ref = load_volume(args.tt)
    masks = {}
    for angle in args.angles:
        cfg = tracker.TrackerConfig(
            step_mm=args.step,
            angle_deg=angle,
            k=args.k,
            target_count=args.count,
            rng_seed=args.seed,
            algorithm=args.algorithm,
            threads=args.threads,
        )
        tag = f"{args.algorithm}_angle{angle:g}"
        tck_path = out_dir / f"{tag}.tck"
        tg = _run_track(args.tensors, args.tt, cfg, tck_path)
        dm = metrics.density_map(tg, ref)
        mask = metrics.binarize_percentile(dm, pct=args.pct)
        save_volume(dm, out_dir / f"{tag}_density.nii.gz")
        save_volume(mask, out_dir / f"{tag}_mask.nii.gz")
        masks[angle] = mask
        _emit(f"tracked_angle_{angle:g}", tck_path)

    pair_results = []
    angles = list(args.angles)
    for i in range(len(angles)):
        for j in range(i + 1, len(angles)):
            res = metrics.all_mask_metrics(masks[angles[i]], masks[angles[j]])
            pair_results.append({"angle_a": angles[i], "angle_b": angles[j], **res})
            for key, value in res.items():
                _emit(f"pair_{angles[i]:g}_{angles[j]:g}_{key}", f"{value:.6g}")
    summary = {}
    for key in ("dsc", "hd95_mm", "assd_mm", "voldiff"):
        summary[key] = float(np.mean([r[key] for r in pair_results]))
        _emit(f"mean_{key}", f"{summary[key]:.6g}")

    report_path = Path(args.report) if args.report else out_dir / "robustness.jsonl"
    with open(report_path, "w") as fh:
        for rec in pair_results:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
    _write_config(out_dir / "run.cfg", {
        "algorithm": args.algorithm, "angles": ",".join(f"{a:g}" for a in args.angles),
        "count": args.count, "step": args.step, "k": args.k, "seed": args.seed,
        "pct": args.pct, "tensors": args.tensors, "tt": args.tt,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tractkit",
        description="Anatomically constrained tractography on tensor fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom")
    p.add_argument("--kind", choices=phantom.KINDS, default="curved_torus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dims", type=_parse_triple, default=(28, 28, 14))
    p.add_argument("--spacing", type=float, default=0.2)
    p.add_argument("--bundle-radius", type=float, default=0.8)
    p.add_argument("--lambda-par", type=float, default=1.5e-3)
    p.add_argument("--lambda-perp", type=float, default=0.3e-3)
    p.add_argument("--torus-radius", type=float, default=2.3)
    p.add_argument("--crossing-angle", type=float, default=90.0)
    p.add_argument("--cap", type=float, default=None)
    p.add_argument("--margin", type=int, default=3)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-dmri", action="store_true")
    p.add_argument("--ndirs", type=int, default=32)
    p.add_argument("--nb0", type=int, default=2)
    p.add_argument("--bval", type=float, default=500.0)
    p.add_argument("--s0", type=float, default=100.0)
    p.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("fit", help="fit tensors and scalar maps from dMRI")
    p.add_argument("--dmri", required=True)
    p.add_argument("--bvals", required=True)
    p.add_argument("--bvecs", required=True)
    p.add_argument("--mask")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("odf", help="dump sharpened propagation PMFs per voxel")
    p.add_argument("--tensors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=float, default=4.0)
    p.add_argument("--dodf-literal", dest="literal", action="store_true",
                   help="evaluate the printed u'Du form instead of the inverse")
    p.add_argument("--mask")
    p.set_defaults(handler=cmd_odf)

    p = sub.add_parser("track", help="whole-brain tractography")
    p.add_argument("--tensors", required=True)
    p.add_argument("--tt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--algorithm", choices=tracker.ALGORITHMS, default="act_prob")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--step", type=float, default=0.6)
    p.add_argument("--angle", type=float, default=None)
    p.add_argument("--k", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--fact-fa-stop", type=float, default=0.0)
    p.add_argument("--fact-nearest", action="store_true")
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser("judge", help="re-judge a TCK against a 5TT map")
    p.add_argument("--tck", required=True)
    p.add_argument("--tt", required=True)
    p.add_argument("--report")
    p.set_defaults(handler=cmd_judge)

    p = sub.add_parser("density", help="tract density map from a TCK")
    p.add_argument("--tck", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_density)

    p = sub.add_parser("binarize", help="percentile-threshold a density map")
    p.add_argument("--density", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pct", type=float, default=1.0)
    p.set_defaults(handler=cmd_binarize)

    p = sub.add_parser("metrics", help="DSC/HD95/ASSD/VolDiff between two masks")
    p.add_argument("mask_a")
    p.add_argument("mask_b")
    p.add_argument("--report", help="append results to this JSON-lines file")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("filter", help="keep streamlines by include/exclude ROIs")
    p.add_argument("--tck", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include", action="append")
    p.add_argument("--exclude", action="append")
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("robustness", help="angle-threshold sensitivity experiment")
    p.add_argument("--tensors", required=True)
    p.add_argument("--tt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--algorithm", choices=tracker.ALGORITHMS, default="act_prob")
    p.add_argument("--angles", type=_parse_angles, default=[15.0, 20.0, 25.0])
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--step", type=float, default=0.6)
    p.add_argument("--k", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pct", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report")
    p.set_defaults(handler=cmd_robustness)

    return parser


def _inject_config(argv: list[str]) -> list[str]:
    """Expand `--config file` into flags placed right after the subcommand.

    Explicit flags later on the command line win, since argparse keeps the
    last occurrence of a store option. Boolean keys use key=true.
    """
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise TractkitError("--config needs a file argument")
    path = argv[i + 1]
    argv = argv[:i] + argv[i + 2 :]
    if not argv:
        raise TractkitError("--config requires a subcommand")
    inject: list[str] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, value = line.split("=", 1)
        flag = "--" + key.strip().replace("_", "-")
        value = value.strip()
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                inject.append(flag)
        else:
            inject.extend([flag, value])
    return [argv[0], *inject, *argv[1:]]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _inject_config(argv)
        args = parser.parse_args(argv)
        return args.handler(args)
    except (TractkitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
