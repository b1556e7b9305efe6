"""Reverse-mode gradients of rendered images w.r.t. stored scene parameters.

:func:`backward` differentiates ``sum(upstream * render(scene).image)`` through
blending, EWA projection, activations and the color model. Degree selection,
culling, the 3-sigma splat support, early termination and the color clamp are
treated as piecewise constant.

:func:`fd_gradient` is the central-difference oracle used to check it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from . import color_model as cm
from .color_model import ModelKind
from .errors import NumericError
from .raster import Camera, RenderConfig, RenderResult, _background, _set_threads, render, tile_grid
from .scene import Scene


@dataclass
class SceneGradients:
    """Gradient arrays keyed and shaped like :meth:`Scene.params`."""

    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])


def _quat_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain (N, 3, 3) rotation-matrix gradients to raw (unnormalized) quaternions."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = d_rot
    dw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    radial = np.sum(dqn * qn, axis=1, keepdims=True)
    return (dqn - radial * qn) / norm


def _empty_grads(scene: Scene) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in scene.params().items()}


def backward(
    scene: Scene,
    cam: Camera,
    cfg: Optional[RenderConfig] = None,
    upstream: Optional[np.ndarray] = None,
    result: Optional[RenderResult] = None,
) -> SceneGradients:
    """Gradient of ``sum(upstream * image)`` w.r.t. every stored (pre-activation) parameter.

    Pass the forward ``result`` of the same scene to skip re-rendering.
    """
    cfg = cfg or RenderConfig()
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream has shape {upstream.shape}, expected {(cam.height, cam.width, 3)}")
    if not np.all(np.isfinite(upstream)):
        raise NumericError("upstream gradient contains non-finite values")
    if result is None:
        result = render(scene, cam, cfg)
    _set_threads(cfg)
    proj = result.proj
    grads = _empty_grads(scene)
    n_entries = len(result.entries)
    if n_entries == 0:
        return SceneGradients(grads)

    d_color_e = np.zeros((n_entries, 3))
    d_op_e = np.zeros(n_entries)
    d_mean_e = np.zeros((n_entries, 2))
    d_conic_e = np.zeros((n_entries, 3))
    tiles_x, _ = tile_grid(cam, cfg.tile_size)
    _kernels.composite_backward(
        result.offsets, result.entries, proj.bounds,
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        np.ascontiguousarray(proj.opacity), np.ascontiguousarray(proj.colors),
        _background(scene, cfg), cam.width, cam.height, cfg.tile_size, tiles_x, cfg.t_min,
        upstream, d_color_e, d_op_e, d_mean_e, d_conic_e,
    )
    # fixed-order reduction from tile entries to splats
    n = len(scene)
    d_color = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    np.add.at(d_color, result.entries, d_color_e)
    np.add.at(d_op, result.entries, d_op_e)
    np.add.at(d_mean2d, result.entries, d_mean_e)
    np.add.at(d_conic, result.entries, d_conic_e)

    idx = np.flatnonzero(proj.valid)
    if len(idx) == 0:
        return SceneGradients(grads)

    # opacity logit
    op = proj.opacity[idx]
    grads["opacity_logits"][idx] = d_op[idx] * op * (1.0 - op)

    # conic -> 2D covariance: d(V^-1) = -V^-1 dV V^-1
    ca, cb, cc = proj.conic[idx].T
    inv = np.stack([np.stack([ca, cb], -1), np.stack([cb, cc], -1)], -2)
    gA, gB, gC = d_conic[idx].T
    g_inv = np.stack([np.stack([gA, 0.5 * gB], -1), np.stack([0.5 * gB, gC], -1)], -2)
    d_cov2d = -inv @ g_inv @ inv

    # 2D covariance = T Sigma T^T with T = J W
    rot_w = cam.rotation
    jac = proj.jac[idx]
    tmat = jac @ rot_w
    cov3d = proj.cov3d[idx]
    d_cov3d = np.swapaxes(tmat, -1, -2) @ d_cov2d @ tmat
    d_tmat = 2.0 * d_cov2d @ tmat @ cov3d
    d_jac = d_tmat @ rot_w.T

    # perspective Jacobian and 2D mean -> camera-space position
    px, py, pz = proj.p_cam[idx].T
    fx, fy = cam.fx, cam.fy
    d_p = np.zeros((len(idx), 3))
    d_p[:, 0] = -fx / pz**2 * d_jac[:, 0, 2] + fx / pz * d_mean2d[idx, 0]
    d_p[:, 1] = -fy / pz**2 * d_jac[:, 1, 2] + fy / pz * d_mean2d[idx, 1]
    d_p[:, 2] = (
        -fx / pz**2 * d_jac[:, 0, 0]
        + 2.0 * fx * px / pz**3 * d_jac[:, 0, 2]
        - fy / pz**2 * d_jac[:, 1, 1]
        + 2.0 * fy * py / pz**3 * d_jac[:, 1, 2]
        - fx * px / pz**2 * d_mean2d[idx, 0]
        - fy * py / pz**2 * d_mean2d[idx, 1]
    )
    d_means = d_p @ rot_w

    # color model
    params = {k: v[idx] for k, v in scene.color_params().items()}
    axes = scene.lobe_axes()
    if axes is not None and axes.ndim == 3:
        axes = axes[idx]
    dirs = proj.dirs[idx]
    degrees = None if proj.degrees is None else proj.degrees[idx]
    ev = cm.evaluate(scene.kind, params, dirs, axes=axes, degrees=degrees)
    cgrads, d_dirs = cm.gradients(scene.kind, params, dirs, d_color[idx], ev)
    dist = proj.dist[idx]
    radial = np.sum(d_dirs * dirs, axis=1, keepdims=True)
    d_means += (d_dirs - radial * dirs) / dist[:, None]
    grads["means"][idx] = d_means

    # 3D covariance = M M^T with M = R diag(exp(s))
    rot = proj.rotmats[idx]
    scale = np.exp(scene.log_scales[idx])
    mmat = rot * scale[:, None, :]
    d_m = 2.0 * d_cov3d @ mmat
    d_rot = d_m * scale[:, None, :]
    grads["log_scales"][idx] = np.sum(d_m * rot, axis=1) * scale
    grads["quats"][idx] = _quat_backward(scene.quats[idx], d_rot)

    if "sh" in cgrads:
        grads["sh"][idx] = cgrads["sh"]
    if "diffuse" in cgrads:
        grads["diffuse"][idx] = cgrads["diffuse"]
    if scene.kind is not ModelKind.SH:
        grads["sg_alpha"][idx] = cgrads["sg_alpha"]
        grads["sg_log_lambda"][idx] = cgrads["sg_lambda"] * params["sg_lambda"]
    if scene.kind is ModelKind.SG1:
        grads["sg_mu"][idx] = cgrads["sg_mu"]
    return SceneGradients(grads)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def objective(scene: Scene, cam: Camera, cfg: RenderConfig, upstream: np.ndarray) -> float:
    return float(np.sum(upstream * render(scene, cam, cfg).image))


def signature(result: RenderResult, scene: Scene) -> tuple:
    """Everything that is piecewise constant in the parameters; equal signatures mean no jump."""
    proj = result.proj
    clamp = proj.color_eval.raw < 0.0 if proj.color_eval is not None else None
    return (
        result.order.tobytes(),
        result.n_contrib.tobytes(),
        result.support_sum.tobytes(),
        None if proj.degrees is None else proj.degrees.tobytes(),
        None if clamp is None else clamp[proj.valid].tobytes(),
    )


def _perturbed(scene: Scene, field: str, flat_index: int, delta: float) -> Scene:
    arr = getattr(scene, field).copy()
    arr.flat[flat_index] += delta
    return scene.with_params(**{field: arr})


def fd_gradient(
    scene: Scene,
    cam: Camera,
    cfg: Optional[RenderConfig],
    upstream: np.ndarray,
    param_index: tuple[str, int],
    h: float = 1e-3,
    *,
    return_smooth: bool = False,
):
    """Central difference of ``sum(upstream * image)`` w.r.t. one stored parameter.

    ``param_index`` is ``(field_name, flat_index)``. With ``return_smooth`` the
    result is ``(value, smooth)`` where ``smooth`` is False when the two probes
    straddle a culling, support, termination, clamp or degree-selection jump.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    cfg = cfg or RenderConfig()
    field, flat_index = param_index
    plus = _perturbed(scene, field, flat_index, h)
    minus = _perturbed(scene, field, flat_index, -h)
    r_plus = render(plus, cam, cfg)
    r_minus = render(minus, cam, cfg)
    value = (np.sum(upstream * r_plus.image) - np.sum(upstream * r_minus.image)) / (2.0 * h)
    if not return_smooth:
        return float(value)
    base = render(scene, cam, cfg)
    sig = signature(base, scene)
    smooth = signature(r_plus, plus) == sig and signature(r_minus, minus) == sig
    return float(value), smooth
