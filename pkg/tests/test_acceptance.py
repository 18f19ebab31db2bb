"""Acceptance criteria 1-10.

Each test records a PASS/FAIL line (see ``conftest.py``) before asserting.
Criteria 6, 7, 8 and 10 train full 5k-iteration reconstructions and are
marked ``slow``; deselect them with ``-m "not slow"``.
"""
import math
import time

import numpy as np
import pytest

from _util import camera, fd_errors, random_scene, record, sample_params, synthetic_corrs
from xraysplat import USE_NUMBA
from xraysplat.geometry import FiducialCorrespondences, Intrinsics, Pose, TrajectorySpec, ransac_calibrate, reprojection_errors
from xraysplat.metrics import PSNR_INF, psnr, ssim
from xraysplat.optimizer import LossWeights, TrainConfig, compute_gradients, tv3d, tv3d_grad
from xraysplat.phantom import PhantomSpec
from xraysplat.pipeline import build_phantom_dataset, initial_scene, reconstruct, run_sweep, split_views
from xraysplat.projector import SQRT_2PI, project_kernel, render, render_oracle
from xraysplat.scene import GaussianKernel, WorldTransform, scene_density
from xraysplat.volume_post import Grid, evaluate, voxelize, voxelize_backward_scene, voxelize_scene_units

N_VIEWS, N_TEST, N_TRAIN = 60, 10, 50
SPLIT_SEED = 0


# ---------------------------------------------------------------------------
# fast criteria
# ---------------------------------------------------------------------------


def test_c1_projection_oracle_equivalence():
    t0 = time.perf_counter()
    means, maxes, rel_means, rel_maxes = [], [], [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s = random_scene(rng, int(rng.integers(1, 101)), scale=(0.01, 0.05), extent=0.6)
        cam = camera(size=64, theta=rng.uniform(0, 2 * math.pi), phi=rng.uniform(-0.4, 0.4))
        a = render(s, cam).pixels
        b = render_oracle(s, cam, step=0.0025).pixels
        err = np.abs(a - b) / b.max()
        means.append(err.mean())
        maxes.append(err.max())
        sig = b > 0.01 * b.max()  # informational: error relative to each pixel's own value
        rel = np.abs(a - b)[sig] / b[sig]
        rel_means.append(rel.mean())
        rel_maxes.append(rel.max())
    dt = time.perf_counter() - t0
    # the time budget targets the compiled kernels; the numpy fallback is reported only
    ok = max(means) <= 0.02 and max(maxes) <= 0.05 and (dt <= 120 or not USE_NUMBA)
    detail = (
        f"peak-normalised error mean {max(means):.2e} (<= 2e-2), max {max(maxes):.2e} (<= 5e-2) over 20 scenes, "
        f"{dt:.0f} s ({'numba' if USE_NUMBA else 'numpy fallback'}); pixelwise relative on pixels > 1% of peak: mean {np.mean(rel_means):.2%}, "
        f"max {max(rel_maxes):.1%} (informational)"
    )
    assert record(1, ok, "projection oracle equivalence", detail)


def test_c2_rectification_factor():
    K = Intrinsics(500.0, 500.0, 32.5, 32.5, 65, 65)
    pose = Pose(np.eye(3), np.zeros(3))
    errs = []
    for sigma in (0.05, 0.1, 0.2):
        k = GaussianKernel(np.array([0.0, 0.0, 2.0]), np.full(3, math.log(sigma)), np.array([1.0, 0, 0, 0]), 0.0)
        mu = project_kernel(k, (K, pose)).mu
        errs.append(abs(mu - sigma * SQRT_2PI) / (sigma * SQRT_2PI))
    ok = max(errs) <= 1e-6
    assert record(2, ok, "rectification factor", f"max relative error {max(errs):.1e} (<= 1e-6)")


def test_c3_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    s = random_scene(rng, 100, scale=(0.03, 0.08), extent=0.5)
    cam = camera(size=48)
    tgt = render(s, cam).pixels * rng.uniform(0.5, 1.5, (48, 48))
    w = LossWeights(0.25, 0.0)
    image_loss = lambda sc: compute_gradients(sc, (cam, tgt), w, None, cutoff=9.0)[0].total
    g_img = compute_gradients(s, (cam, tgt), w, None, cutoff=9.0)[1]
    e_img = fd_errors(s, image_loss, g_img, sample_params(s, 120, rng))

    grid = ((16, 16, 16), 0.05, np.full(3, -0.4))
    tv_loss = lambda sc: tv3d(voxelize_scene_units(sc, *grid, cutoff=6.0)[0])
    vol, ctx = voxelize_scene_units(s, *grid, cutoff=6.0)
    g_tv = voxelize_backward_scene(s, ctx, tv3d_grad(vol))
    e_tv = fd_errors(s, tv_loss, g_tv, sample_params(s, 120, rng))
    dt = time.perf_counter() - t0
    ok = e_img.max() <= 1e-3 and e_tv.max() <= 1e-3 and dt <= 300
    detail = f"120 params per loss, max rel error image {e_img.max():.1e}, TV {e_tv.max():.1e} (<= 1e-3), {dt:.0f} s"
    assert record(3, ok, "gradient correctness", detail)


def test_c4_calibration():
    clean, worst_rmse, all_rejected = [], 0.0, True
    for trial in range(20):
        rng = np.random.default_rng(1000 + trial)
        _, c = synthetic_corrs(rng, 20)
        P, mask, _ = ransac_calibrate(c, seed=trial)
        clean.append(float(np.sqrt(np.mean(reprojection_errors(P, c.points3d, c.points2d) ** 2))))

        _, c = synthetic_corrs(rng, 20, noise=0.5)
        out = rng.choice(20, 6, replace=False)
        ang = rng.uniform(0, 2 * np.pi, 6)
        uv = c.points2d.copy()
        uv[out] += 50.0 * np.column_stack([np.cos(ang), np.sin(ang)])
        P, mask, rmse = ransac_calibrate(FiducialCorrespondences(c.points3d, uv), seed=trial)
        all_rejected &= not mask[out].any()
        worst_rmse = max(worst_rmse, rmse)
    ok = max(clean) < 1e-6 and all_rejected and worst_rmse <= 1.0
    detail = (
        f"noise-free RMSE max {max(clean):.1e} px (< 1e-6); 30% outliers: all rejected={all_rejected}, "
        f"worst inlier RMSE {worst_rmse:.3f} px (<= 1.0) over 20 trials"
    )
    assert record(4, ok, "calibration", detail)


def test_c5_voxelizer_equivalence():
    rng = np.random.default_rng(5)
    s = random_scene(rng, 1000, scale=(0.02, 0.1), extent=0.9, world=WorldTransform())
    grid = Grid.covering([-1, -1, -1], [1, 1, 1], (32, 32, 32))
    v = voxelize(s, grid).values
    idx = np.stack(np.meshgrid(*[np.arange(32)] * 3, indexing="ij"), -1).reshape(-1, 3)
    ref = scene_density(s, np.asarray(grid.origin) + idx * np.asarray(grid.spacing)).reshape(v.shape)
    err = np.abs(v - ref).max() / ref.max()
    ok = err <= 1e-3
    assert record(5, ok, "voxelizer equivalence", f"max |voxelize - density| / max density = {err:.2e} (<= 1e-3)")


def test_c9_metric_unit_cases():
    z = np.zeros((32, 32))
    checks = {
        "psnr 20 dB": psnr(z, z + 0.1, 1.0) == pytest.approx(20.0, abs=1e-9),
        "psnr 48.13 dB": round(psnr(z, z + 1.0, 255.0), 2) == 48.13,
        "ssim constant 0.009901": round(ssim(z, z + 0.1, 1.0), 6) == 0.009901,
        "psnr identical = inf": psnr(z, z, 1.0) == PSNR_INF,
        "ssim identical = 1": ssim(z + 0.3, z + 0.3, 1.0) == pytest.approx(1.0, abs=1e-12),
    }
    failed = [k for k, v in checks.items() if not v]
    detail = "all 5 cases exact" if not failed else f"failed: {failed}"
    assert record(9, not failed, "metric unit cases", detail)


# ---------------------------------------------------------------------------
# end-to-end phantom benchmark
# ---------------------------------------------------------------------------


def _dataset(mode):
    return build_phantom_dataset(PhantomSpec(peak=0.02), TrajectorySpec(mode=mode, n_views=N_VIEWS, seed=1))


@pytest.fixture(scope="module")
def split():
    return split_views(N_VIEWS, N_TEST, SPLIT_SEED)


@pytest.fixture(scope="module")
def circular():
    return _dataset("circular")


def _run(ds, train_idx, test_idx, out):
    t0 = time.perf_counter()
    cfg = TrainConfig(checkpoint_interval=1000)
    scene, hist, rep = reconstruct(ds, train_idx, test_idx, cfg, LossWeights(), checkpoint_dir=out)
    hist.write_csv(out / "history.csv")
    return {"scene": scene, "hist": hist, "report": rep, "seconds": time.perf_counter() - t0, "dir": out, "cfg": cfg}


@pytest.fixture(scope="module")
def run_circular(circular, split, tmp_path_factory):
    tr, te = split
    return _run(circular, tr, te, tmp_path_factory.mktemp("circular_a"))


@pytest.mark.slow
def test_c6_circular_benchmark(run_circular):
    rep = run_circular["report"]
    minutes = run_circular["seconds"] / 60
    ok = rep.psnr_mean >= 28.0 and rep.ssim_mean >= 0.85 and minutes <= 45
    detail = (
        f"PSNR {rep.psnr_mean:.2f} +- {rep.psnr_std:.2f} dB (>= 28), SSIM {rep.ssim_mean:.4f} (>= 0.85), "
        f"{len(run_circular['scene'])} kernels, {minutes:.1f} min (<= 45)"
    )
    assert record(6, ok, "circular 50-view benchmark", detail)


@pytest.mark.slow
def test_benchmark_training_improves(run_circular, circular, split):
    """Held-out PSNR gains >= 10 dB over the initial scene; late losses are lower than early ones."""
    _, te = split
    cfg = run_circular["cfg"]
    rep0 = evaluate(initial_scene(cfg, circular.world_transform), circular.pairs(te))
    assert run_circular["report"].psnr_mean - rep0.psnr_mean >= 10.0
    loss = run_circular["hist"].column("loss_total")
    assert np.median(loss[:500]) > np.median(loss[-500:])


@pytest.mark.slow
def test_c7_view_count_trend(run_circular, circular, split):
    tr, te = split
    counts = [5, 10, 20, 50]
    sweep = run_sweep(circular, tr, te, counts, TrainConfig(), LossWeights(), results={50: run_circular["report"]})
    p = sweep.psnr
    monotone = all(b >= a - 0.5 for a, b in zip(p, p[1:]))
    gain_early, gain_late = p[2] - p[0], p[3] - p[2]
    ok = monotone and gain_early > gain_late
    curve = ", ".join(f"{c}: {v:.2f}" for c, v in zip(counts, p))
    detail = f"PSNR by views [{curve}] dB; 5->20 gain {gain_early:.2f} dB vs 20->50 gain {gain_late:.2f} dB"
    assert record(7, ok, "view-count trend", detail)


@pytest.mark.slow
def test_c8_arbitrary_poses(run_circular, split, tmp_path_factory):
    tr, te = split
    run = _run(_dataset("arbitrary"), tr, te, tmp_path_factory.mktemp("arbitrary"))
    rep = run["report"]
    gap = run_circular["report"].psnr_mean - rep.psnr_mean
    ok = rep.psnr_mean >= 24.0
    detail = f"PSNR {rep.psnr_mean:.2f} dB (>= 24), SSIM {rep.ssim_mean:.4f}; circular - arbitrary gap {gap:+.2f} dB"
    assert record(8, ok, "arbitrary-pose feasibility", detail)


@pytest.mark.slow
def test_c10_determinism(run_circular, circular, split, tmp_path_factory):
    tr, te = split
    again = _run(circular, tr, te, tmp_path_factory.mktemp("circular_b"))
    a, b = run_circular["dir"], again["dir"]
    names = sorted(p.name for p in a.iterdir())
    same_names = names == sorted(p.name for p in b.iterdir())
    diff = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()] if same_names else names
    ok = same_names and not diff and "history.csv" in names
    detail = f"{len(names)} files compared (history.csv + checkpoints), differing: {diff or 'none'}"
    assert record(10, ok, "determinism", detail)
