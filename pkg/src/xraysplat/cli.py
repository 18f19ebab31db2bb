"""Command-line entry point: ``xraysplat <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import _accel
from .errors import InputError, InvalidSpec, RuntimeFailure, TrainingDiverged
from .geometry import (
    Intrinsics,
    TrajectorySpec,
    decompose_projection,
    load_correspondences,
    ransac_calibrate,
    save_poses,
)
from .optimizer import LossWeights, TrainConfig, config_to_dict, load_config
from .phantom import PhantomSpec, generate_phantom, load_volume, render_drr, save_volume
from .pipeline import (
    Dataset,
    SweepReport,
    build_phantom_dataset,
    crop_principal,
    invert_intensity,
    load_dataset,
    log_transform,
    normalize_scene_bounds,
    read_pfm,
    reconstruct,
    run_sweep,
    save_dataset,
    split_views,
    standardize_intensity,
)
from .scene import load_scene, save_scene
from .volume_post import Grid, evaluate, threshold_and_crop, voxelize, write_slices

log = logging.getLogger("xraysplat")


def _floats(text, n=None):
    try:
        vals = [float(x) for x in str(text).split(",")]
    except ValueError as e:
        raise InvalidSpec(f"expected comma-separated numbers, got {text!r}") from e
    if n is not None and len(vals) == 1:
        vals = vals * n
    if n is not None and len(vals) != n:
        raise InvalidSpec(f"expected {n} values, got {text!r}")
    return vals


def _ints(text, n=None):
    return [int(round(v)) for v in _floats(text, n)]


def _config(args):
    if args.config:
        cfg, w = load_config(args.config)
    else:
        cfg, w = TrainConfig(), LossWeights()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "iterations", None):
        cfg.iterations = args.iterations
    if getattr(args, "kernels", None):
        cfg.init_kernels = args.kernels
    return cfg, w


def _seed(args, default=0):
    return default if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_phantom(args, out: Path):
    spec = PhantomSpec(
        kind=args.kind,
        dims=tuple(_ints(args.dims, 3)),
        spacing=tuple(_floats(args.spacing, 3)),
        peak=args.peak,
        seed=_seed(args),
        jitter=args.jitter,
    )
    vol = generate_phantom(spec)
    save_volume(out / "volume", vol)
    log.info("wrote %s", out / "volume.raw")


def _trajectory(args):
    w, h = _ints(args.size, 2)
    K = Intrinsics(args.focal, args.focal, w / 2, h / 2, w, h)
    return TrajectorySpec(args.mode, args.views, args.radius, intrinsics=K, seed=_seed(args))


def cmd_drr(args, out: Path):
    traj = _trajectory(args)
    if args.volume:
        from .geometry import generate_trajectory
        from .scene import WorldTransform

        vol = load_volume(args.volume)
        views = []
        for K, pose in generate_trajectory(traj):
            img = render_drr(vol, (K, pose), args.threshold)
            views.append((img, K, pose))
        lo, hi = vol.lower, vol.upper
        tr = WorldTransform(float((hi - lo).max()) / 2.0, tuple(0.5 * (lo + hi)))
        meta = {"source": str(args.volume), "trajectory": args.mode, "pose_units": "mm",
                "world_transform": tr.as_dict(), "drr_threshold": args.threshold, "preprocessing": []}
        ds = Dataset(views, meta)
    else:
        ds = build_phantom_dataset(PhantomSpec(peak=args.peak, seed=_seed(args)), traj, args.threshold)
    save_dataset(out, ds)
    log.info("wrote %d views to %s", len(ds), out)


def cmd_calibrate(args, out: Path):
    w, h = _ints(args.size, 2)
    cams, summary = [], []
    for path in args.correspondences:
        corrs = load_correspondences(path)
        P, mask, rmse = ransac_calibrate(corrs, args.iterations, args.threshold, seed=_seed(args))
        K, pose = decompose_projection(P, w, h)
        cams.append((K, pose))
        summary.append({"file": str(path), "inliers": int(mask.sum()), "n": len(mask), "rmse_px": rmse,
                        "P": P.tolist()})
    save_poses(out / "poses.json", cams)
    (out / "calibration.json").write_text(json.dumps(summary, indent=1))
    for s in summary:
        log.info("%s: %d/%d inliers, rmse %.4f px", s["file"], s["inliers"], s["n"], s["rmse_px"])


def cmd_preprocess(args, out: Path):
    ds = load_dataset(args.dataset)
    steps = list(ds.meta.get("preprocessing", []))
    views = ds.views
    if args.invert:
        views = [(invert_intensity(img), K, p) for img, K, p in views]
        steps.append("invert")
    if args.log:
        views = [(log_transform(img), K, p) for img, K, p in views]
        steps.append("log")
    if args.standardize == "histmatch":
        if not args.reference:
            raise InvalidSpec("--standardize histmatch needs --reference <image.pfm>")
        ref = read_pfm(args.reference)
        views = [(standardize_intensity(img, ref), K, p) for img, K, p in views]
        steps.append(f"histmatch:{args.reference}")
    if args.crop:
        cropped = []
        for img, K, p in views:
            img2, K2 = crop_principal(img, K, args.crop)
            cropped.append((img2, K2, p))
        views = cropped
        steps.append(f"crop:{args.crop}")
    ds = Dataset(views, dict(ds.meta, preprocessing=steps))
    if args.normalize_bbox:
        b = _floats(args.normalize_bbox, 6)
        ds, _ = normalize_scene_bounds(ds, [b[:3], b[3:]])
        steps.append("normalize")
        ds.meta["preprocessing"] = steps
    save_dataset(out, ds)


def _split(args, ds):
    return split_views(len(ds), args.test_views, _seed(args))


def cmd_reconstruct(args, out: Path):
    ds = load_dataset(args.dataset)
    cfg, w = _config(args)
    tr_idx, te_idx = _split(args, ds)
    try:
        scene, hist, report = reconstruct(ds, tr_idx, te_idx, cfg, w, checkpoint_dir=out, log=log.info)
    except TrainingDiverged as e:
        if e.checkpoint is not None:
            save_scene(out / "scene_diverged.json", e.checkpoint)
        raise
    hist.write_csv(out / "history.csv")
    (out / "split.json").write_text(json.dumps({"train": tr_idx, "test": te_idx}))
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg, w), indent=1))
    if report:
        report.save(out / "report")
        log.info("held-out PSNR %.2f dB, SSIM %.4f", report.psnr_mean, report.ssim_mean)


def cmd_voxelize(args, out: Path):
    scene = load_scene(args.scene)
    tr = scene.world_transform
    dims = _ints(args.dims, 3)
    if args.origin is not None:
        grid = Grid(dims, _floats(args.spacing, 3), _floats(args.origin, 3))
    else:
        grid = Grid.covering(tr.to_world(scene.bbox[0]), tr.to_world(scene.bbox[1]), dims)
    vol = voxelize(scene, grid)
    if args.percentile is not None or args.crop:
        crop = None
        if args.crop:
            c = _ints(args.crop, 6)
            crop = [(c[0], c[1]), (c[2], c[3]), (c[4], c[5])]
        vol = threshold_and_crop(vol, args.percentile, crop)
    save_volume(out / "volume", vol)


def cmd_eval(args, out: Path):
    scene = load_scene(args.scene)
    ds = load_dataset(args.dataset)
    if args.split:
        te_idx = json.loads(Path(args.split).read_text())["test"]
    else:
        _, te_idx = _split(args, ds)
    report = evaluate(scene, ds.pairs(te_idx), config={"scene": str(args.scene), "test": te_idx})
    report.save(out / "report")
    log.info("PSNR %.2f +- %.2f dB, SSIM %.4f +- %.4f", report.psnr_mean, report.psnr_std,
             report.ssim_mean, report.ssim_std)


def cmd_slices(args, out: Path):
    vol = load_volume(args.volume)
    window = tuple(_floats(args.window, 2)) if args.window else None
    paths = write_slices(vol, out, args.axes.split(","), window)
    log.info("wrote %d slices", len(paths))


def cmd_sweep(args, out: Path):
    ds = load_dataset(args.dataset)
    cfg, w = _config(args)
    tr_idx, te_idx = _split(args, ds)
    rep: SweepReport = run_sweep(ds, tr_idx, te_idx, _ints(args.counts), cfg, w, log=log.info)
    rep.save(out / "sweep.json")
    for c, p, s in zip(rep.counts, rep.psnr, rep.ssim):
        log.info("%3d views: PSNR %.2f dB, SSIM %.4f", c, p, s)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="xraysplat", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global random seed")
    p.add_argument("--config", type=Path, default=None, help="TOML file with [train] and [loss] tables")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the compiled kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic volume")
    s.add_argument("--kind", default="spine", choices=["spine", "ellipsoids"])
    s.add_argument("--dims", default="64")
    s.add_argument("--spacing", default="2.0", help="mm, one value or three")
    s.add_argument("--peak", type=float, default=0.02, help="peak attenuation per mm")
    s.add_argument("--jitter", type=float, default=0.0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("drr", help="render a DRR dataset along a trajectory")
    s.add_argument("--volume", type=Path, default=None, help="volume (.json sidecar); default: spine phantom")
    s.add_argument("--mode", default="circular", choices=["circular", "arbitrary"])
    s.add_argument("--views", type=int, default=60)
    s.add_argument("--radius", type=float, default=500.0)
    s.add_argument("--focal", type=float, default=300.0)
    s.add_argument("--size", default="128")
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--peak", type=float, default=0.02)
    s.set_defaults(func=cmd_drr)

    s = sub.add_parser("calibrate", help="estimate poses from fiducial correspondences")
    s.add_argument("correspondences", nargs="+", type=Path)
    s.add_argument("--size", default="128", help="image width,height")
    s.add_argument("--iterations", type=int, default=2000)
    s.add_argument("--threshold", type=float, default=2.0, help="inlier threshold (px)")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("preprocess", help="crop / standardize / normalize a dataset")
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--crop", type=int, default=None, help="square window size around the principal point")
    s.add_argument("--standardize", default="none", choices=["none", "histmatch"])
    s.add_argument("--reference", type=Path, default=None, help="reference image (.pfm) for histmatch")
    s.add_argument("--invert", action="store_true")
    s.add_argument("--log", action="store_true", help="apply -log(I / max I)")
    s.add_argument("--normalize-bbox", default=None, help="x0,y0,z0,x1,y1,z1 in mm")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("reconstruct", help="optimize a kernel scene")
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--test-views", type=int, default=10)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--kernels", type=int, default=None, help="initial kernel count")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("voxelize", help="convert a scene to a voxel volume")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--dims", default="64")
    s.add_argument("--spacing", default="2.0", help="mm; used together with --origin")
    s.add_argument("--origin", default=None, help="center of voxel 0 (mm); default: grid over the scene box")
    s.add_argument("--percentile", type=float, default=None, help="zero voxels at or below this percentile")
    s.add_argument("--crop", default=None, help="x0,x1,y0,y1,z0,z1 voxel ranges (half-open)")
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("eval", help="score a scene on held-out views")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--split", type=Path, default=None, help="split.json written by reconstruct")
    s.add_argument("--test-views", type=int, default=10)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("slices", help="export 16-bit PNG slices")
    s.add_argument("--volume", type=Path, required=True)
    s.add_argument("--axes", default="axial,coronal,sagittal")
    s.add_argument("--window", default=None, help="lo,hi")
    s.set_defaults(func=cmd_slices)

    s = sub.add_parser("sweep", help="view-count sweep on nested training subsets")
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--counts", default="5,10,20,50")
    s.add_argument("--test-views", type=int, default=10)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--kernels", type=int, default=None)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with status 2
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if args.threads:
        _accel.set_num_threads(args.threads)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args, args.out)
    except InputError as e:
        log.error("error: %s", e)
        return 1
    except (RuntimeFailure, FloatingPointError) as e:
        log.error("failed: %s", e)
        return 2
    except (OSError, KeyError, json.JSONDecodeError) as e:
        log.error("error: %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
