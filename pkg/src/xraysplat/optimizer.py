"""Loss, analytic gradients, Adam, adaptive density control and the training loop."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, InvalidSpec, PreconditionError, ShapeMismatch, TrainingDiverged
from .metrics import psnr, ssim, ssim_and_grad
from .projector import DEFAULT_CUTOFF, KernelGradients, render, render_backward, render_with_context
from .scene import SplatScene, save_scene, softplus_inv
from .volume_post import voxelize_backward_scene, voxelize_scene_units

__all__ = [
    "LossWeights",
    "TrainConfig",
    "LossBreakdown",
    "History",
    "tv3d",
    "tv3d_grad",
    "compute_loss",
    "compute_gradients",
    "Adam",
    "DensifyStats",
    "densify_and_prune",
    "train",
    "load_config",
    "config_to_dict",
]

GROUPS = ("positions", "log_scales", "rotations", "raw_density")


@dataclass
class LossWeights:
    lambda_dssim: float = 0.25
    lambda_tv: float = 0.05

    def __post_init__(self):
        for name in ("lambda_dssim", "lambda_tv"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise InvalidSpec(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr_position: float = 2e-4
    lr_position_final: float = 2e-5
    lr_scales: float = 5e-3
    lr_rotation: float = 1e-3
    lr_density: float = 1e-2
    densify_grad_threshold: float = 5e-6  # mean |dL/d mean2d|, L1 normalised per pixel
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int | None = None  # None: half of the run
    split_scale_threshold: float = 0.03
    prune_density_threshold: float = 1e-3
    max_kernels: int = 20_000
    tv_sample_grid: tuple = (32, 32, 32)
    tv_spacing: float = 2.0 / 64
    tv_cutoff: float = 3.0
    cutoff: float = DEFAULT_CUTOFF
    view_order: str = "random"
    eval_interval: int = 500
    checkpoint_interval: int = 0
    seed: int = 0
    # initial scene, used when the caller does not supply one
    init_kernels: int = 5_000
    init_scale: float = 0.02
    init_density: tuple = (0.005, 0.015)

    def __post_init__(self):
        self.tv_sample_grid = tuple(int(d) for d in self.tv_sample_grid)
        self.init_density = tuple(float(d) for d in self.init_density)
        if self.iterations < 1:
            raise InvalidSpec("iterations must be >= 1")
        for name in ("lr_position", "lr_position_final", "lr_scales", "lr_rotation", "lr_density"):
            if not getattr(self, name) > 0:
                raise InvalidSpec(f"{name} must be > 0")
        for name in ("densify_grad_threshold", "split_scale_threshold", "prune_density_threshold"):
            if not getattr(self, name) >= 0:
                raise InvalidSpec(f"{name} must be >= 0")
        if self.densify_interval < 1 or self.max_kernels < 1:
            raise InvalidSpec("densify_interval and max_kernels must be >= 1")
        if len(self.tv_sample_grid) != 3 or min(self.tv_sample_grid) < 2:
            raise InvalidSpec("tv_sample_grid needs three sizes >= 2")
        if self.view_order not in ("random", "round_robin"):
            raise InvalidSpec("view_order must be 'random' or 'round_robin'")

    @property
    def densify_until(self):
        return self.iterations // 2 if self.densify_stop is None else self.densify_stop


def config_to_dict(cfg: TrainConfig, w: LossWeights) -> dict:
    d = {"train": dataclasses.asdict(cfg), "loss": dataclasses.asdict(w)}
    d["train"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["train"].items() if v is not None}
    return d


def load_config(path) -> tuple[TrainConfig, LossWeights]:
    """Read ``[train]`` and ``[loss]`` tables from a TOML file; unknown keys are errors."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise InvalidSpec(f"cannot read config {path}: {e}") from e
    return config_from_dict(data)


def config_from_dict(data: dict) -> tuple[TrainConfig, LossWeights]:
    unknown = set(data) - {"train", "loss"}
    if unknown:
        raise InvalidSpec(f"unknown config tables: {sorted(unknown)}")
    out = []
    for cls, key in ((TrainConfig, "train"), (LossWeights, "loss")):
        table = dict(data.get(key, {}))
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(table) - names
        if bad:
            raise InvalidSpec(f"unknown keys in [{key}]: {sorted(bad)}")
        try:
            out.append(cls(**table))
        except TypeError as e:
            raise InvalidSpec(str(e)) from e
    return out[0], out[1]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: float
    l1: float
    dssim: float
    tv: float


def _pixels(img):
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def tv3d(vol) -> float:
    """Anisotropic total variation: summed absolute forward differences over the voxel count."""
    v = np.asarray(getattr(vol, "values", vol), dtype=np.float64)
    return float(sum(np.abs(np.diff(v, axis=a)).sum() for a in range(3)) / v.size)


def tv3d_grad(v) -> np.ndarray:
    g = np.zeros_like(v)
    for a in range(3):
        s = np.sign(np.diff(v, axis=a))
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a], hi[a] = slice(0, -1), slice(1, None)
        g[tuple(lo)] -= s
        g[tuple(hi)] += s
    return g / v.size


def _ssim_range(target):
    m = float(target.max())
    return m if m > 0 else 1.0


def compute_loss(rendered, target, tv_volume_sample, w: LossWeights) -> LossBreakdown:
    r, t = _pixels(rendered), _pixels(target)
    if r.shape != t.shape:
        raise ShapeMismatch(f"rendered {r.shape} vs target {t.shape}")
    l1 = float(np.mean(np.abs(r - t)))
    dssim = (1.0 - ssim(r, t, _ssim_range(t))) / 2.0 if w.lambda_dssim > 0 else 0.0
    tv = tv3d(tv_volume_sample) if tv_volume_sample is not None else 0.0
    total = (1 - w.lambda_dssim) * l1 + w.lambda_dssim * dssim + w.lambda_tv * tv
    return LossBreakdown(total, l1, dssim, tv)


def tv_sample_origin(scene: SplatScene, dims, spacing, rng) -> np.ndarray:
    """Origin (first voxel center) of a grid placed uniformly at random inside the scene box."""
    lo, hi = scene.bbox
    extent = (np.asarray(dims) - 1) * spacing
    room = np.maximum(hi - lo - extent, 0.0)
    return lo + rng.random(3) * room


def compute_gradients(scene: SplatScene, batch, w: LossWeights, tv_grid=None, cutoff=DEFAULT_CUTOFF, tv_cutoff=3.0):
    """Loss breakdown and analytic gradients for one ``(camera, target)`` pair.

    ``tv_grid = (dims, spacing, origin)`` in scene units; ``None`` skips the TV term.
    """
    if len(scene) == 0:
        raise PreconditionError("scene has no kernels")
    camera, target = batch
    t = _pixels(target)
    img, ctx = render_with_context(scene, camera, cutoff)
    if img.shape != t.shape:
        raise ShapeMismatch(f"rendered {img.shape} vs target {t.shape}")
    n = img.size
    diff = img - t
    l1 = float(np.abs(diff).mean())
    g_img = (1 - w.lambda_dssim) * np.sign(diff) / n
    dssim = 0.0
    if w.lambda_dssim > 0:
        s, gs = ssim_and_grad(img, t, _ssim_range(t))
        dssim = (1.0 - s) / 2.0
        g_img -= 0.5 * w.lambda_dssim * gs
    grads = render_backward(scene, ctx, g_img)
    tv = 0.0
    if tv_grid is not None and w.lambda_tv > 0:
        dims, spacing, origin = tv_grid
        vol, vctx = voxelize_scene_units(scene, dims, spacing, origin, tv_cutoff)
        tv = tv3d(vol)
        mean2d_norm = grads.mean2d_norm
        grads += voxelize_backward_scene(scene, vctx, w.lambda_tv * tv3d_grad(vol))
        grads.mean2d_norm = mean2d_norm
    total = (1 - w.lambda_dssim) * l1 + w.lambda_dssim * dssim + w.lambda_tv * tv
    return LossBreakdown(total, l1, dssim, tv), grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Per-group Adam with first/second moments stored per kernel."""

    def __init__(self, scene: SplatScene, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = {g: np.zeros(len(scene), dtype=np.int64) for g in GROUPS}
        self.m = {g: np.zeros_like(getattr(scene, g)) for g in GROUPS}
        self.v = {g: np.zeros_like(getattr(scene, g)) for g in GROUPS}

    def step(self, scene: SplatScene, grads: KernelGradients, lrs: dict):
        for g in GROUPS:
            gr = getattr(grads, g)
            m, v = self.m[g], self.v[g]
            m *= self.b1
            m += (1 - self.b1) * gr
            v *= self.b2
            v += (1 - self.b2) * gr * gr
            k = self.step_count[g]
            k += 1
            shape = (-1,) + (1,) * (gr.ndim - 1)
            c1 = (1 - self.b1 ** k).reshape(shape)
            c2 = (1 - self.b2 ** k).reshape(shape)
            param = getattr(scene, g)
            param -= lrs[g] * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap(self, keep_idx, n_new):
        """Keep the state of kernels ``keep_idx`` (in order) and append ``n_new`` fresh entries."""
        for g in GROUPS:
            for store in (self.m, self.v):
                a = store[g][keep_idx]
                store[g] = np.concatenate([a, np.zeros((n_new,) + a.shape[1:])])
            k = self.step_count[g][keep_idx]
            self.step_count[g] = np.concatenate([k, np.zeros(n_new, dtype=np.int64)])


# ---------------------------------------------------------------------------
# adaptive density control
# ---------------------------------------------------------------------------


@dataclass
class DensifyStats:
    grad_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, m):
        return cls(np.zeros(m), np.zeros(m, dtype=np.int64))

    def add(self, grads: KernelGradients):
        seen = grads.mean2d_norm > 0
        self.grad_sum[seen] += grads.mean2d_norm[seen]
        self.count[seen] += 1

    @property
    def mean(self):
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)


def densify_and_prune(s: SplatScene, stats: DensifyStats, cfg: TrainConfig, rng=None, adam: Adam | None = None):
    """Clone small / split large high-gradient kernels, then drop low-density ones.

    New kernels receive half the parent density.  Split children are drawn
    from the parent footprint (Mahalanobis radius at most 1) and clipped to
    the scene box.  Returns ``(scene, fresh DensifyStats)``; ``adam`` is
    remapped in place.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    m = len(s)
    rho = s.density
    hot = stats.mean >= cfg.densify_grad_threshold
    hot &= stats.count > 0
    room = max(cfg.max_kernels - m, 0)
    hot_idx = np.flatnonzero(hot)
    if len(hot_idx) > room:
        order = np.argsort(-stats.mean[hot_idx], kind="stable")
        hot_idx = np.sort(hot_idx[order[:room]])
    big = s.scales[hot_idx].max(axis=1) >= cfg.split_scale_threshold
    clone_idx, split_idx = hot_idx[~big], hot_idx[big]

    half = softplus_inv(0.5 * rho)
    new_raw = s.raw_density.copy()
    new_raw[hot_idx] = half[hot_idx]
    new_logs = s.log_scales.copy()
    new_logs[split_idx] -= math.log(1.6)
    new_pos = s.positions.copy()

    # split: move parent and child to two footprint samples
    R = s.rotation_matrices()[split_idx]
    sc = s.scales[split_idx]

    def footprint_sample():
        z = rng.standard_normal((len(split_idx), 3))
        nz = np.linalg.norm(z, axis=1, keepdims=True)
        z = z / np.maximum(nz, 1.0)
        p = s.positions[split_idx] + np.einsum("mij,mj->mi", R, sc * z)
        return np.clip(p, s.bbox[0], s.bbox[1])

    new_pos[split_idx] = footprint_sample()
    child_pos = np.concatenate([s.positions[clone_idx], footprint_sample()])
    parents = np.concatenate([clone_idx, split_idx])

    grown = SplatScene(new_pos, new_logs, s.rotations, new_raw, s.bbox, s.world_transform)
    children = SplatScene(
        child_pos, new_logs[parents], s.rotations[parents], new_raw[parents], s.bbox, s.world_transform
    )
    grown = grown.concat(children)
    if adam is not None:
        adam.remap(np.arange(m), len(parents))

    keep = np.flatnonzero(grown.density >= cfg.prune_density_threshold)
    if len(keep) == 0:  # never return an empty scene
        keep = np.array([int(np.argmax(grown.density))])
    out = grown.subset(keep)
    if adam is not None:
        adam.remap(keep, 0)
    return out, DensifyStats.zeros(len(out))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ("iter", "loss_total", "loss_l1", "loss_dssim", "loss_tv", "n_kernels", "psnr_holdout", "ssim_holdout")


@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in HISTORY_COLUMNS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _holdout_metrics(scene, testset, data_range, cutoff):
    ps, ss = [], []
    for cam, tgt in testset:
        t = _pixels(tgt)
        img = render(scene, cam, cutoff=cutoff).pixels
        ps.append(psnr(img, t, data_range))
        ss.append(ssim(img, t, data_range))
    return float(np.mean(ps)), float(np.mean(ss))


def _lr_position(cfg: TrainConfig, it: int) -> float:
    frac = it / max(cfg.iterations - 1, 1)
    return cfg.lr_position * (cfg.lr_position_final / cfg.lr_position) ** frac


def train(
    s: SplatScene,
    dataset,
    cfg: TrainConfig,
    w: LossWeights,
    testset=None,
    checkpoint_dir=None,
    log=None,
):
    """Optimise ``s`` (copied) against ``dataset = [(camera, target), ...]``.

    Returns ``(scene, History)``.  Held-out PSNR/SSIM are logged every
    ``cfg.eval_interval`` iterations and after the last one, using the max
    over held-out targets as the data range.
    """
    if not dataset:
        raise PreconditionError("training needs at least one view")
    if len(s) == 0:
        raise PreconditionError("scene has no kernels")
    targets = [_pixels(t) for _, t in dataset]
    for (cam, _), t in zip(dataset, targets):
        if t.shape != (cam[0].height, cam[0].width):
            raise ShapeMismatch(f"target {t.shape} does not match camera {(cam[0].height, cam[0].width)}")
    data = [(cam, t) for (cam, _), t in zip(dataset, targets)]
    test_range = None
    if testset:
        test_range = max(float(_pixels(t).max()) for _, t in testset) or 1.0

    rng = np.random.default_rng(cfg.seed)
    scene = s.copy()
    scene.normalize_rotations()
    adam = Adam(scene)
    stats = DensifyStats.zeros(len(scene))
    hist = History()
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
    dims = cfg.tv_sample_grid
    order = []
    for it in range(cfg.iterations):
        if cfg.view_order == "random":
            if not order:
                order = list(rng.permutation(len(data)))
            vi = order.pop()
        else:
            vi = it % len(data)
        tv_grid = None
        if w.lambda_tv > 0:
            tv_grid = (dims, cfg.tv_spacing, tv_sample_origin(scene, dims, cfg.tv_spacing, rng))
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = compute_gradients(scene, data[vi], w, tv_grid, cfg.cutoff, cfg.tv_cutoff)
        except InputError:
            raise
        except (np.linalg.LinAlgError, ValueError, OverflowError) as e:
            raise TrainingDiverged(f"numerical failure at iteration {it}: {e}", checkpoint=scene.copy(), iteration=it) from e
        if not math.isfinite(loss.total) or not np.all(np.isfinite(grads.flat())):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", checkpoint=scene.copy(), iteration=it)
        stats.add(grads)
        lrs = {
            "positions": _lr_position(cfg, it),
            "log_scales": cfg.lr_scales,
            "rotations": cfg.lr_rotation,
            "raw_density": cfg.lr_density,
        }
        snapshot = scene.copy()
        adam.step(scene, grads, lrs)
        np.clip(scene.positions, scene.bbox[0], scene.bbox[1], out=scene.positions)
        scene.normalize_rotations()
        with np.errstate(over="ignore"):
            finite = all(np.all(np.isfinite(getattr(scene, g))) for g in GROUPS) and np.all(np.isfinite(scene.scales))
        if not finite:
            raise TrainingDiverged(f"non-finite parameters after step {it}", checkpoint=snapshot, iteration=it)

        done = it + 1
        if cfg.densify_start <= done <= cfg.densify_until and done % cfg.densify_interval == 0:
            scene, stats = densify_and_prune(scene, stats, cfg, rng, adam)

        ph = sh = None
        if testset and (done % cfg.eval_interval == 0 or done == cfg.iterations):
            ph, sh = _holdout_metrics(scene, testset, test_range, cfg.cutoff)
        hist.append(
            iter=done,
            loss_total=loss.total,
            loss_l1=loss.l1,
            loss_dssim=loss.dssim,
            loss_tv=loss.tv,
            n_kernels=len(scene),
            psnr_holdout=ph,
            ssim_holdout=sh,
        )
        if log and (ph is not None):
            log(f"iter {done}: loss {loss.total:.5g} kernels {len(scene)} psnr {ph:.2f} ssim {sh:.4f}")
        if ckpt and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            save_scene(ckpt / f"scene_{done:06d}.json", scene)
    if ckpt:
        save_scene(ckpt / "scene_final.json", scene)
    return scene, hist
