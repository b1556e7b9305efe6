from __future__ import annotations

import numpy as np
import pytest

from sgsplat.dataset import random_scene
from sgsplat.errors import NumericError
from sgsplat.grad import backward, fd_gradient
from sgsplat.raster import Camera, RenderConfig, composite_bruteforce, render
from sgsplat.scene import Scene

CFG = RenderConfig(thresholds=(4, 10))


def check_scene(scene, cam, cfg, rng, per_field=12, h=1e-3):
    """Compare backward against central differences; returns (failures, checked, skipped)."""
    up = rng.normal(size=(cam.height, cam.width, 3))
    grads = backward(scene, cam, cfg, up)
    failures, checked, skipped = [], 0, 0
    for name, arr in scene.params().items():
        for i in rng.choice(arr.size, min(arr.size, per_field), replace=False):
            fd, smooth = fd_gradient(scene, cam, cfg, up, (name, int(i)), h, return_smooth=True)
            if not smooth:
                skipped += 1
                continue
            checked += 1
            an = grads[name].flat[i]
            if abs(an - fd) > max(2e-3 * max(abs(an), abs(fd)), 1e-6):
                failures.append((name, int(i), an, fd))
    return failures, checked, skipped


def test_zero_upstream_gives_zero_gradients(small_cam):
    scene = random_scene("sg3", 30, seed=1)
    grads = backward(scene, small_cam, CFG, np.zeros((small_cam.height, small_cam.width, 3)))
    assert all(not np.any(v) for _, v in grads.items())
    assert set(grads) == set(scene.params())


def test_non_finite_upstream_is_rejected(small_cam):
    scene = random_scene("sh", 3)
    up = np.zeros((small_cam.height, small_cam.width, 3))
    up[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        backward(scene, small_cam, CFG, up)
    with pytest.raises(Exception):
        backward(scene, small_cam, CFG, np.zeros((2, 2, 3)))


def test_single_gaussian_diffuse_gradient_is_blend_weight(small_cam):
    scene = random_scene("sg3", 1, seed=2)
    scene = scene.with_params(means=np.zeros((1, 3)), diffuse=np.full((1, 3), 0.5), sg_alpha=np.zeros((1, 3, 3)))
    _, _, weight = composite_bruteforce(scene, small_cam, CFG)
    y, x = small_cam.height // 2, small_cam.width // 2
    up = np.zeros((small_cam.height, small_cam.width, 3))
    up[y, x, 1] = 1.0
    g = backward(scene, small_cam, CFG, up)
    assert weight[y, x] > 0.05
    assert g["diffuse"][0, 1] == pytest.approx(weight[y, x], abs=1e-12)
    assert g["diffuse"][0, 0] == 0.0


def test_culled_gaussian_has_zero_gradient(small_cam):
    scene = random_scene("sh", 5, seed=3)
    means = scene.means.copy()
    means[2] = small_cam.center - 5.0 * small_cam.rotation[2]  # behind the camera
    scene = scene.with_params(means=means)
    up = np.random.default_rng(0).normal(size=(small_cam.height, small_cam.width, 3))
    g = backward(scene, small_cam, CFG, up)
    assert not render(scene, small_cam, CFG).proj.valid[2]
    for name, arr in g.items():
        assert not np.any(arr[2]), name
    assert fd_gradient(scene, small_cam, CFG, up, ("means", 6)) == 0.0


@pytest.mark.parametrize("kind", ["sh", "sg1", "sg3", "mixed"])
def test_backward_matches_finite_differences(small_cam, kind):
    rng = np.random.default_rng({"sh": 10, "sg1": 11, "sg3": 12, "mixed": 13}[kind])
    failures, checked, skipped = check_scene(random_scene(kind, 20, seed=int(rng.integers(1 << 20))), small_cam, CFG, rng)
    assert checked > 3 * skipped
    assert failures == []


def test_mixed_with_zero_lobes_matches_sh(small_cam):
    mixed = random_scene("mixed", 25, seed=4)
    mixed = mixed.with_params(sg_alpha=np.zeros_like(mixed.sg_alpha))
    sh = Scene("sh", mixed.means, mixed.quats, mixed.log_scales, mixed.opacity_logits, sh=mixed.sh,
               background=mixed.background)
    cfg = RenderConfig(thresholds=(0, 0))
    up = np.random.default_rng(1).normal(size=(small_cam.height, small_cam.width, 3))
    gm = backward(mixed, small_cam, cfg, up)
    gs = backward(sh, small_cam, cfg, up)
    for name in sh.param_fields:
        np.testing.assert_allclose(gm[name], gs[name], atol=1e-9, rtol=0)


def test_central_difference_converges_quadratically(small_cam):
    scene = random_scene("sg3", 10, seed=6)
    up = np.random.default_rng(2).normal(size=(small_cam.height, small_cam.width, 3))
    exact = backward(scene, small_cam, CFG, up)["diffuse"].flat[4]
    # linear parameter: differences are exact up to rounding
    assert fd_gradient(scene, small_cam, CFG, up, ("diffuse", 4), 1e-2) == pytest.approx(exact, rel=1e-8, abs=1e-10)
    name, idx = "opacity_logits", int(np.argmax(np.abs(backward(scene, small_cam, CFG, up)["opacity_logits"])))
    g = backward(scene, small_cam, CFG, up)[name][idx]
    e1 = abs(fd_gradient(scene, small_cam, CFG, up, (name, idx), 0.04) - g)
    e2 = abs(fd_gradient(scene, small_cam, CFG, up, (name, idx), 0.02) - g)
    assert e2 < e1 / 2.5
    with pytest.raises(ValueError):
        fd_gradient(scene, small_cam, CFG, up, (name, idx), 0.0)
