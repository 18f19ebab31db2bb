import math

import numpy as np
import pytest

from _util import WORLD, camera, random_scene
from xraysplat.geometry import Intrinsics, Pose
from xraysplat.projector import (
    CULLED,
    SQRT_2PI,
    project_kernel,
    render,
    render_backward,
    render_oracle,
    render_with_context,
)
from xraysplat.scene import GaussianKernel, SplatScene, WorldTransform, softplus_inv

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def iso_kernel(sigma, pos=(0.0, 0.0, 2.0), rho=1.0):
    return GaussianKernel(np.array(pos), np.full(3, math.log(sigma)), IDENTITY_Q, float(softplus_inv(rho)))


def axis_camera(f=500.0, size=65):
    return Intrinsics(f, f, size / 2, size / 2, size, size), Pose(np.eye(3), np.zeros(3))


@pytest.mark.parametrize("sigma", [0.05, 0.1, 0.2])
def test_rectification_isotropic_on_axis(sigma):
    sp = project_kernel(iso_kernel(sigma), axis_camera())
    assert sp.mu == pytest.approx(sigma * SQRT_2PI, rel=1e-9)
    # mu from its definition via the ray-space covariance
    mu_def = math.sqrt(2 * math.pi * np.linalg.det(sp.cov_ray) / np.linalg.det(sp.cov2d))
    assert sp.mu == pytest.approx(mu_def, rel=1e-9)


def test_ray_space_covariance_closed_form():
    sp = project_kernel(iso_kernel(0.1), axis_camera())
    np.testing.assert_allclose(sp.cov_ray, np.diag([625.0, 625.0, 0.01]), rtol=1e-12, atol=1e-12)
    assert sp.mu == pytest.approx(0.250663, abs=1e-6)
    assert project_kernel(iso_kernel(0.2), axis_camera()).mu == pytest.approx(0.501326, abs=1e-6)


def test_culling():
    assert project_kernel(iso_kernel(0.1, pos=(0, 0, -2)), axis_camera()) is CULLED
    assert project_kernel(iso_kernel(0.01, pos=(50, 0, 2)), axis_camera()) is CULLED


def test_peak_at_principal_point():
    K, pose = axis_camera(size=65)
    k = iso_kernel(0.01)
    img = render(SplatScene.from_kernels([k]), (K, pose)).pixels
    sp = project_kernel(k, (K, pose))
    r, c = np.unravel_index(np.argmax(img), img.shape)
    assert (c + 0.5, r + 0.5) == (K.cx, K.cy)
    assert img[r, c] == pytest.approx(sp.density2d, rel=1e-4)


def test_image_integral_matches_closed_form():
    K, pose = axis_camera(f=500.0, size=129)
    sigma, z, rho = 0.02, 2.0, 0.8
    img = render(SplatScene.from_kernels([iso_kernel(sigma, (0, 0, z), rho)]), (K, pose), cutoff=6.0).pixels
    expected = rho * (2 * math.pi) ** 1.5 * sigma**3 * (K.fx / z) ** 2
    assert img.sum() == pytest.approx(expected, rel=1e-3)


def test_empty_scene():
    cam = camera()
    assert not render(SplatScene.empty(world_transform=WORLD), cam).pixels.any()
    assert not render_oracle(SplatScene.empty(world_transform=WORLD), cam).pixels.any()


def test_size_must_match():
    with pytest.raises(ValueError):
        render(SplatScene.empty(), camera(), image_size=(10, 10))


def test_matches_oracle_small_kernels():
    rng = np.random.default_rng(0)
    s = random_scene(rng, 100, scale=(0.02, 0.05), extent=0.5)
    cam = camera(size=64)
    a = render(s, cam).pixels
    b = render_oracle(s, cam, step=0.0025).pixels
    err = np.abs(a - b) / b.max()
    assert err.max() <= 0.02


def test_oracle_step_convergence():
    s = random_scene(np.random.default_rng(1), 1, scale=(0.04, 0.04), extent=0.1)
    cam = camera(size=32)
    sigma = 0.04
    a = render_oracle(s, cam, step=sigma / 4).pixels
    b = render_oracle(s, cam, step=sigma / 8).pixels
    m = b > 1e-3 * b.max()
    assert np.max(np.abs(a - b)[m] / b[m]) < 1e-3


def test_additive_linear_and_order_invariant():
    rng = np.random.default_rng(2)
    s = random_scene(rng, 60)
    cam = camera()
    full = render(s, cam).pixels
    a, b = s.subset(np.arange(25)), s.subset(np.arange(25, 60))
    np.testing.assert_allclose(full, render(a, cam).pixels + render(b, cam).pixels, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(render(s.scaled_densities(2.5), cam).pixels, 2.5 * full, rtol=1e-9, atol=1e-14)
    perm = rng.permutation(60)
    np.testing.assert_allclose(render(s.subset(perm), cam).pixels, full, rtol=1e-12, atol=1e-14)
    assert np.array_equal(render(s, cam).pixels, full)


def test_world_transform_equivalence():
    """Normalised poses with an identity transform render the same image."""
    rng = np.random.default_rng(3)
    s = random_scene(rng, 30)
    K, pose = camera()
    s_id = s.copy()
    s_id.world_transform = WorldTransform()
    pose_n = Pose(pose.R, WORLD.to_scene(pose.X_o))
    np.testing.assert_allclose(render(s_id, (K, pose_n)).pixels, render(s, (K, pose)).pixels, rtol=1e-9, atol=1e-12)


def _params(s):
    return [s.positions, s.log_scales, s.rotations, s.raw_density]


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    s = random_scene(rng, 8, scale=(0.05, 0.15), extent=0.4)
    s.world_transform = WorldTransform(50.0, (3.0, -2.0, 1.0))
    cam = camera(size=48)
    W = rng.normal(size=(48, 48))
    f = lambda sc: float(np.sum(W * render(sc, cam, cutoff=9.0).pixels))
    img, ctx = render_with_context(s, cam, cutoff=9.0)
    g = render_backward(s, ctx, W)
    grads = [g.positions, g.log_scales, g.rotations, g.raw_density]
    h = 1e-5
    for gi, (ga, pa) in enumerate(zip(grads, _params(s))):
        for idx in np.ndindex(pa.shape):
            sp, sm = s.copy(), s.copy()
            _params(sp)[gi][idx] += h
            _params(sm)[gi][idx] -= h
            fd = (f(sp) - f(sm)) / (2 * h)
            assert abs(fd - ga[idx]) <= 1e-3 * max(abs(fd), 1e-3 * np.abs(ga).max()), (gi, idx, fd, ga[idx])


def test_culled_kernels_have_zero_gradient():
    K, pose = axis_camera()
    s = SplatScene.from_kernels([iso_kernel(0.1), iso_kernel(0.1, pos=(0, 0, -3))])
    _, ctx = render_with_context(s, (K, pose))
    g = render_backward(s, ctx, np.ones((K.height, K.width)))
    assert not g.positions[1].any() and not g.raw_density[1] and not g.log_scales[1].any()
    assert g.raw_density[0] > 0
