"""Dataset preprocessing and I/O, benchmark dataset construction, reconstruction and the view-count sweep."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CropOutOfBounds, InvalidReference, InvalidSpec, ShapeMismatch
from .geometry import Intrinsics, Pose, TrajectorySpec, generate_trajectory, pose_record, pose_from_record
from .optimizer import LossWeights, TrainConfig, config_to_dict, train
from .phantom import PhantomSpec, ProjectionImage, generate_phantom, render_drr
from .scene import SplatScene, WorldTransform, init_random
from .volume_post import evaluate

__all__ = [
    "Dataset",
    "crop_principal",
    "standardize_intensity",
    "invert_intensity",
    "log_transform",
    "normalize_scene_bounds",
    "read_pfm",
    "write_pfm",
    "save_dataset",
    "load_dataset",
    "split_views",
    "build_phantom_dataset",
    "initial_scene",
    "reconstruct",
    "SweepReport",
    "run_sweep",
]


@dataclass
class Dataset:
    """Views ``(image, K, pose)`` plus a free-form provenance record.

    ``meta["pose_units"]`` is ``"mm"`` (default) or ``"scene"`` after
    :func:`normalize_scene_bounds`; ``meta["world_transform"]`` maps scene
    units to mm.
    """

    views: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for img, K, pose in self.views:
            px = np.asarray(getattr(img, "pixels", img))
            if px.shape != (K.height, K.width):
                raise ShapeMismatch(f"image {px.shape} does not match intrinsics {(K.height, K.width)}")
            if not np.all(np.isfinite(pose.X_o)):
                raise InvalidSpec("pose origin is not finite")

    def __len__(self):
        return len(self.views)

    @property
    def world_transform(self) -> WorldTransform:
        d = self.meta.get("world_transform")
        return WorldTransform.from_dict(d) if d else WorldTransform()

    def world_cameras(self):
        """``(K, pose)`` per view with the source position in mm."""
        if self.meta.get("pose_units", "mm") == "mm":
            return [(K, p) for _, K, p in self.views]
        tr = self.world_transform
        return [(K, Pose(p.R, tr.to_world(p.X_o))) for _, K, p in self.views]

    def pairs(self, idx=None):
        """``[(camera, pixels)]`` with world cameras, for training and evaluation."""
        cams = self.world_cameras()
        idx = range(len(self)) if idx is None else idx
        return [(cams[i], np.asarray(getattr(self.views[i][0], "pixels", self.views[i][0]))) for i in idx]


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def crop_principal(image, K: Intrinsics, size: int):
    """Copy the ``size x size`` window centered on the rounded principal point.

    The sub-pixel residual of the rounding stays in the new principal point.
    """
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    size = int(size)
    if size < 1:
        raise CropOutOfBounds("crop size must be >= 1")
    x0 = math.floor(K.cx + 0.5) - size // 2
    y0 = math.floor(K.cy + 0.5) - size // 2
    h, w = px.shape
    if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise CropOutOfBounds(f"window x[{x0},{x0 + size}) y[{y0},{y0 + size}) exceeds {w}x{h} image")
    K2 = Intrinsics(K.fx, K.fy, K.cx - x0, K.cy - y0, size, size)
    pose = getattr(image, "pose", None)
    return ProjectionImage(px[y0 : y0 + size, x0 : x0 + size].copy(), K2, pose), K2


def midrank_cdf(values):
    """Empirical CDF at each sample, ties counted half: ``(#below + #equal / 2) / n``."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    s = np.sort(flat)
    lo = np.searchsorted(s, flat, side="left")
    hi = np.searchsorted(s, flat, side="right")
    return ((lo + hi) / (2.0 * flat.size)).reshape(np.shape(values))


def standardize_intensity(image, reference):
    """Monotone histogram matching of ``image`` onto the value distribution of ``reference``.

    Every pixel goes to the reference quantile at its mid-rank CDF value,
    interpolated linearly between reference order statistics.  Matching an
    image onto itself (or onto a shifted copy) returns it unchanged, and a
    second application is a no-op, ties included.
    """
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    ref = np.sort(np.asarray(getattr(reference, "pixels", reference), dtype=np.float64).ravel())
    if ref.size < 2 or ref[0] == ref[-1]:
        raise InvalidReference("reference needs at least two distinct values")
    pos = (np.arange(ref.size) + 0.5) / ref.size
    out = np.interp(midrank_cdf(px), pos, ref)
    if isinstance(image, ProjectionImage):
        return ProjectionImage(out, image.K, image.pose)
    return out


def invert_intensity(image):
    """``max - I``: bright-bone display images to attenuation-like images."""
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    out = px.max() - px
    return ProjectionImage(out, image.K, image.pose) if isinstance(image, ProjectionImage) else out


def log_transform(image, i0: float | None = None, floor: float = 1e-6):
    """Beer-Lambert line integral ``-log(I / I0)``; ``I0`` defaults to the image maximum."""
    px = np.asarray(getattr(image, "pixels", image), dtype=np.float64)
    i0 = float(px.max()) if i0 is None else float(i0)
    if not i0 > 0:
        raise InvalidSpec("I0 must be positive")
    out = -np.log(np.maximum(px, floor * i0) / i0)
    return ProjectionImage(out, image.K, image.pose) if isinstance(image, ProjectionImage) else out


def normalize_scene_bounds(dataset: Dataset, bbox):
    """Map the world box onto ``[-1, 1]^3`` (uniform scale, centered) and re-express source positions.

    Returns ``(dataset in scene units, WorldTransform scene -> mm)``.
    """
    bbox = np.asarray(bbox, dtype=float).reshape(2, 3)
    extent = bbox[1] - bbox[0]
    if not np.all(np.isfinite(bbox)) or extent.max() <= 0 or np.any(extent < 0):
        raise InvalidSpec(f"bounding box needs positive extent, got {bbox.tolist()}")
    tr = WorldTransform(float(extent.max()) / 2.0, tuple(0.5 * (bbox[0] + bbox[1])))
    cams = dataset.world_cameras()
    views = [(img, K, Pose(p.R, tr.to_scene(p.X_o))) for (img, _, _), (K, p) in zip(dataset.views, cams)]
    meta = dict(dataset.meta, pose_units="scene", world_transform=tr.as_dict())
    return Dataset(views, meta), tr


# ---------------------------------------------------------------------------
# dataset directory: meta.json, poses.json, images/NNN.pfm
# ---------------------------------------------------------------------------


def write_pfm(path, pixels):
    """Single-channel little-endian PFM; rows are stored bottom to top."""
    a = np.asarray(pixels, dtype="<f4")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"Pf":
        raise InvalidSpec(f"{path}: not a single-channel PFM file")
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    a = np.frombuffer(parts[3], dtype=dtype, count=w * h)
    return a.reshape(h, w)[::-1].astype(np.float64)


def save_dataset(path, ds: Dataset):
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    recs = []
    for i, (img, K, pose) in enumerate(ds.views):
        write_pfm(path / "images" / f"{i:03d}.pfm", getattr(img, "pixels", img))
        recs.append(pose_record(K, pose))
    (path / "poses.json").write_text(json.dumps(recs, indent=1))
    (path / "meta.json").write_text(json.dumps(ds.meta, indent=1, default=str))


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        recs = json.loads((path / "poses.json").read_text())
        meta = json.loads((path / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidSpec(f"cannot read dataset {path}: {e}") from e
    views = []
    for i, rec in enumerate(recs):
        K, pose = pose_from_record(rec)
        views.append((ProjectionImage(read_pfm(path / "images" / f"{i:03d}.pfm"), K, pose), K, pose))
    return Dataset(views, meta)


# ---------------------------------------------------------------------------
# benchmark construction
# ---------------------------------------------------------------------------


def split_views(n: int, n_test: int, seed: int = 0):
    """Seeded sample without replacement: ``(train indices, test indices)``."""
    if not 0 <= n_test < n:
        raise InvalidSpec(f"cannot hold out {n_test} of {n} views")
    perm = np.random.default_rng(seed).permutation(n)
    return [int(i) for i in perm[n_test:]], [int(i) for i in perm[:n_test]]


def build_phantom_dataset(phantom: PhantomSpec, trajectory: TrajectorySpec, threshold: float = 0.0) -> Dataset:
    """DRRs of a generated phantom along a trajectory; the scene box is the phantom's grid box."""
    vol = generate_phantom(phantom)
    cams = generate_trajectory(trajectory)
    views = []
    for K, pose in cams:
        img = render_drr(vol, (K, pose), threshold)
        views.append((img, K, pose))
    lo, hi = vol.lower, vol.upper
    tr = WorldTransform(float((hi - lo).max()) / 2.0, tuple(0.5 * (lo + hi)))
    meta = {
        "source": "phantom",
        "phantom": _jsonable(phantom.__dict__),
        "trajectory": _jsonable({k: v for k, v in trajectory.__dict__.items() if k != "intrinsics"}),
        "intrinsics": trajectory.intrinsics.matrix.tolist(),
        "drr_threshold": threshold,
        "pose_units": "mm",
        "world_transform": tr.as_dict(),
        "preprocessing": [],
    }
    return Dataset(views, meta)


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


# ---------------------------------------------------------------------------
# reconstruction and sweep
# ---------------------------------------------------------------------------


def initial_scene(cfg: TrainConfig, world_transform: WorldTransform) -> SplatScene:
    return init_random(
        n=cfg.init_kernels,
        density_range=cfg.init_density,
        scale_init=cfg.init_scale,
        seed=cfg.seed,
        world_transform=world_transform,
    )


def reconstruct(ds: Dataset, train_idx, test_idx, cfg: TrainConfig, w: LossWeights, checkpoint_dir=None, log=None):
    """Train from a seeded random scene; returns ``(scene, history, EvaluationReport or None)``."""
    scene0 = initial_scene(cfg, ds.world_transform)
    trainset = ds.pairs(train_idx)
    testset = ds.pairs(test_idx) if test_idx else None
    scene, hist = train(scene0, trainset, cfg, w, testset=testset, checkpoint_dir=checkpoint_dir, log=log)
    report = evaluate(scene, testset, config=config_to_dict(cfg, w)) if testset else None
    return scene, hist, report


@dataclass
class SweepReport:
    counts: list
    reports: list  # EvaluationReport per count

    @property
    def psnr(self):
        return [r.psnr_mean for r in self.reports]

    @property
    def ssim(self):
        return [r.ssim_mean for r in self.reports]

    def as_dict(self):
        return {
            "counts": self.counts,
            "psnr_mean": self.psnr,
            "ssim_mean": self.ssim,
            "per_count": [r.as_dict() for r in self.reports],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.as_dict(), indent=1, default=str))


def run_sweep(ds: Dataset, train_idx, test_idx, counts, cfg: TrainConfig, w: LossWeights, log=None, results=None):
    """Train one scene per view count on nested prefixes of ``train_idx``; same held-out views for all.

    ``results`` may map a count to an already computed ``EvaluationReport``
    (for example the full-set run of a benchmark) to skip retraining it.
    """
    counts = [int(c) for c in counts]
    for c in counts:
        if not 1 <= c <= len(train_idx):
            raise InvalidSpec(f"view count {c} outside 1..{len(train_idx)}")
    if not test_idx:
        raise InvalidSpec("sweep needs held-out views")
    reports = []
    for c in counts:
        if results and c in results:
            reports.append(results[c])
            continue
        _, _, rep = reconstruct(ds, list(train_idx[:c]), test_idx, cfg, w, log=log)
        rep.config["n_train_views"] = c
        reports.append(rep)
    return SweepReport(counts, reports)
