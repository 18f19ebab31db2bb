"""Shared builders for the test-suite."""
import numpy as np

from xraysplat.geometry import FiducialCorrespondences, Intrinsics, Pose, compose_projection, look_at, project_points
from xraysplat.scene import SplatScene, WorldTransform, softplus_inv

WORLD = WorldTransform(64.0)

# criterion number -> (passed, title, detail); printed by conftest after the run
ACCEPTANCE = {}


def record(n, ok, title, detail):
    """Store an acceptance verdict, echo it, and return ``ok`` for the caller's assert."""
    ACCEPTANCE[n] = (bool(ok), title, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    return bool(ok)


def camera(size=64, focal=300.0, radius=500.0, theta=0.3, phi=0.2):
    """World-mm camera on a sphere around the origin."""
    K = Intrinsics(focal, focal, size / 2, size / 2, size, size)
    src = radius * np.array([np.sin(theta) * np.cos(phi), -np.cos(theta) * np.cos(phi), np.sin(phi)])
    return K, look_at(src, [0.0, 0.0, 0.0])


def random_scene(rng, n, scale=(0.02, 0.05), extent=0.6, density=(0.2, 1.0), world=WORLD):
    q = rng.normal(size=(n, 4))
    return SplatScene(
        rng.uniform(-extent, extent, (n, 3)),
        np.log(rng.uniform(*scale, (n, 3))),
        q / np.linalg.norm(q, axis=1, keepdims=True),
        softplus_inv(rng.uniform(*density, n)),
        world_transform=world,
    )


GROUPS = ("positions", "log_scales", "rotations", "raw_density")


def sample_params(scene, n, rng):
    """``n`` random ``(group, index)`` pairs, cycling through the four groups."""
    out = []
    for i in range(n):
        g = GROUPS[i % 4]
        shape = getattr(scene, g).shape
        out.append((g, tuple(int(rng.integers(s)) for s in shape)))
    return out


def fd_errors(scene, f, grads, params, h=1e-5):
    """Relative errors ``|fd - analytic| / max(|fd|, |analytic|)`` for each sampled parameter.

    Pairs where both values are below ``1e-9`` of the largest analytic entry
    are reported as 0 (the gradient is zero to round-off).
    """
    gmax = max(np.abs(getattr(grads, g)).max() for g in GROUPS)
    errs = []
    for g, idx in params:
        sp, sm = scene.copy(), scene.copy()
        getattr(sp, g)[idx] += h
        getattr(sm, g)[idx] -= h
        fd = (f(sp) - f(sm)) / (2 * h)
        an = getattr(grads, g)[idx]
        den = max(abs(fd), abs(an))
        errs.append(0.0 if den <= 1e-9 * gmax else abs(fd - an) / den)
    return np.array(errs)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_camera(rng):
    K = Intrinsics(
        rng.uniform(300, 900), rng.uniform(300, 900), rng.uniform(200, 300), rng.uniform(200, 300), 512, 512
    )
    return K, Pose(random_rotation(rng), rng.uniform(-500, 500, 3))


def points_in_front(rng, K, pose, n, depth=(300, 700)):
    cam = np.column_stack([rng.uniform(-100, 100, n), rng.uniform(-100, 100, n), rng.uniform(*depth, n)])
    return cam @ pose.R + pose.X_o


def synthetic_corrs(rng, n, noise=0.0):
    K, pose = random_camera(rng)
    P = compose_projection(K, pose)
    X = points_in_front(rng, K, pose, n)
    uv, _ = project_points(P, X)
    return P, FiducialCorrespondences(X, uv + rng.normal(0, noise, uv.shape) if noise else uv)
