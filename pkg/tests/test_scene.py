import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xraysplat.errors import InvalidSpec
from xraysplat.scene import (
    GaussianKernel,
    SplatScene,
    WorldTransform,
    covariances,
    init_random,
    kernel_covariance,
    load_scene,
    quat_to_rotmat,
    save_scene,
    scene_density,
    scene_from_dict,
    scene_to_dict,
    softplus,
    softplus_inv,
)


def random_scene(rng, n, scale=(0.02, 0.1)):
    return SplatScene(
        rng.uniform(-0.8, 0.8, (n, 3)),
        np.log(rng.uniform(*scale, (n, 3))),
        rng.normal(size=(n, 4)),
        rng.normal(size=n),
    )


def test_covariance_identity_rotation():
    k = GaussianKernel(np.zeros(3), np.full(3, math.log(0.1)), np.array([1.0, 0, 0, 0]), 0.0)
    np.testing.assert_allclose(kernel_covariance(k), 0.01 * np.eye(3), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_covariance_determinant_and_sign_flip(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    ls = rng.uniform(-4, 0, 3)
    k = GaussianKernel(np.zeros(3), ls, q, 0.0)
    S = kernel_covariance(k)
    assert np.linalg.det(S) == pytest.approx(np.exp(2 * ls.sum()), rel=1e-9)
    np.testing.assert_allclose(S, S.T, atol=1e-15)
    np.testing.assert_allclose(kernel_covariance(GaussianKernel(np.zeros(3), ls, -q, 0.0)), S, atol=1e-15)


def test_random_covariances_positive_definite():
    s = random_scene(np.random.default_rng(0), 100)
    assert np.linalg.eigvalsh(covariances(s)).min() > 0


def test_rotation_matrices_orthonormal():
    R = quat_to_rotmat(np.random.default_rng(1).normal(size=(50, 4)))
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_init_random_bounds_and_determinism():
    s = init_random(n=10_000, seed=3)
    assert np.all(np.abs(s.positions) <= 1)
    s2 = init_random(n=200, density_range=(0.1, 0.2), seed=4)
    rho = s2.density
    assert rho.min() >= 0.1 - 1e-12 and rho.max() <= 0.2 + 1e-12
    np.testing.assert_allclose(s2.scales, 0.02)
    np.testing.assert_array_equal(s2.rotations, np.tile([1.0, 0, 0, 0], (200, 1)))
    a, b = init_random(n=50, seed=9), init_random(n=50, seed=9)
    for name in ("positions", "log_scales", "rotations", "raw_density"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    with pytest.raises(InvalidSpec):
        init_random(n=0)


def test_softplus_round_trip():
    y = np.array([1e-6, 0.01, 1.0, 50.0])
    np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-12)
    assert np.all(softplus(np.array([-800.0, 0.0, 800.0])) >= 0)


def test_density_at_center_and_additivity():
    k = GaussianKernel(np.array([0.1, 0.2, 0.3]), np.log([0.1, 0.2, 0.05]), np.array([0.3, 0.1, 0.5, 0.2]), 0.7)
    s = SplatScene.from_kernels([k])
    assert scene_density(s, k.position) == pytest.approx(k.density, rel=1e-14)
    assert scene_density(SplatScene.from_kernels([k, k]), k.position) == pytest.approx(2 * k.density, rel=1e-14)


def test_density_decay_at_mahalanobis_six():
    k = GaussianKernel(np.zeros(3), np.log([0.1, 0.1, 0.1]), np.array([1.0, 0, 0, 0]), 1.0)
    s = SplatScene.from_kernels([k])
    assert scene_density(s, [0.6, 0, 0]) <= k.density * math.exp(-18) * (1 + 1e-12)


def test_density_additive_over_subsets():
    rng = np.random.default_rng(2)
    s = random_scene(rng, 40)
    x = rng.uniform(-1, 1, (100, 3))
    a, b = s.subset(np.arange(15)), s.subset(np.arange(15, 40))
    np.testing.assert_allclose(scene_density(s, x), scene_density(a, x) + scene_density(b, x), rtol=1e-12)
    assert np.all(scene_density(s, x) >= 0)


def test_scene_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    s = random_scene(rng, 12)
    s.world_transform = WorldTransform(64.0, (1.0, 2.0, 3.0))
    save_scene(tmp_path / "s.json", s)
    t = load_scene(tmp_path / "s.json")
    for name in ("positions", "log_scales", "rotations", "raw_density", "bbox"):
        np.testing.assert_array_equal(getattr(s, name), getattr(t, name))
    assert t.world_transform == s.world_transform
    d = scene_to_dict(s)
    assert "version" in d and "kernels" in d and "world_transform" in d
    d.pop("version")
    with pytest.raises(InvalidSpec):
        scene_from_dict(d)


def test_world_transform_round_trip():
    tr = WorldTransform(37.5, (4.0, -2.0, 9.0))
    x = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_allclose(tr.to_scene(tr.to_world(x)), x, atol=1e-12)
    with pytest.raises(InvalidSpec):
        WorldTransform(0.0)
