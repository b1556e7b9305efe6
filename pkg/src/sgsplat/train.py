"""Adam training against posed target images with a staged spherical-Gaussian schedule.

SG amplitudes start at zero and their parameters are held fixed until
``sg_start_iteration``; from then on they are optimized like every other
group, with Adam moments that start accumulating at that point.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .color_model import ModelKind
from .errors import ContractError, NumericError
from .grad import backward
from .metrics import ssim_and_grad
from .ply import save_ply
from .raster import Camera, RenderConfig, render
from .scene import SG_FIELDS, Scene

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_iterations: int = 30000
    sg_start_iteration: int = 2000
    sg_learning_rate: float = 0.0025
    lr_position: float = 0.00016
    lr_position_final: float = 0.0000016
    position_lr_decay: bool = False
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    lr_opacity: float = 0.05
    lr_diffuse: float = 0.0025
    lr_sh: float = 0.0025
    lr_sh_rest: float = 0.0025 / 20.0
    scene_extent: float = 1.0
    lambda_dssim: float = 0.2
    sg_zero_init: bool = True
    prune_interval: int = 0
    prune_opacity_floor: float = 0.005
    checkpoint_interval: int = 0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ContractError("total_iterations must be positive")
        if not 0 <= self.sg_start_iteration < self.total_iterations:
            raise ContractError("sg_start_iteration must lie in [0, total_iterations)")
        rates = [getattr(self, f.name) for f in fields(self) if f.name.startswith("lr_")]
        if self.sg_learning_rate <= 0 or any(r <= 0 for r in rates) or self.scene_extent <= 0:
            raise ContractError("learning rates and scene_extent must be positive")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ContractError("lambda_dssim must lie in [0, 1]")
        if not 0.0 <= self.prune_opacity_floor < 1.0:
            raise ContractError("prune_opacity_floor must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ContractError(f"unknown training options: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(default, bool) and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, (int, float)) and not isinstance(default, bool):
                v = type(default)(float(v)) if isinstance(default, int) else float(v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        """Read a JSON object or ``key = value`` lines (``#`` starts a comment)."""
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        d = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            d[k.strip()] = v.strip()
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(NumericError):
    """Raised when the loss stops being finite; carries the last good state."""

    def __init__(self, message: str, iteration: int, scene: Scene, snapshot_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.scene = scene
        self.snapshot_path = snapshot_path


def loss(rendered, target, lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1 - w) * L1 + w * (1 - SSIM)`` and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ContractError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size
    value = (1.0 - lambda_dssim) * l1
    if lambda_dssim > 0.0:
        s, d_s = ssim_and_grad(rendered, target)
        value += lambda_dssim * (1.0 - s)
        grad = grad - lambda_dssim * d_s
    return max(float(value), 0.0), grad


class Adam:
    """Adam over named arrays with per-element learning rates and per-group step counts."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr) -> np.ndarray:
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def keep(self, mask: np.ndarray) -> None:
        for store in (self.m, self.v):
            for k in store:
                store[k] = store[k][mask]


def prune(scene: Scene, opacity_floor: float) -> Scene:
    """Drop Gaussians whose activated opacity is below the floor, keeping at least one."""
    return scene.subset(np.flatnonzero(_prune_mask(scene, opacity_floor)))


def _prune_mask(scene: Scene, opacity_floor: float) -> np.ndarray:
    if not 0.0 <= opacity_floor < 1.0:
        raise ContractError("opacity_floor must lie in [0, 1)")
    keep = scene.opacities >= opacity_floor
    if len(scene) and not keep.any():
        keep[int(np.argmax(scene.opacities))] = True
    return keep


def learning_rates(scene: Scene, cfg: TrainConfig, iteration: int) -> dict:
    lr_pos = cfg.lr_position
    if cfg.position_lr_decay:
        f = min(iteration / cfg.total_iterations, 1.0)
        lr_pos = float(np.exp((1.0 - f) * np.log(cfg.lr_position) + f * np.log(cfg.lr_position_final)))
    rates = {
        "means": lr_pos * cfg.scene_extent,
        "quats": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "diffuse": cfg.lr_diffuse,
    }
    for name in SG_FIELDS:
        rates[name] = cfg.sg_learning_rate
    if scene.sh is not None:
        sh_lr = np.full((1, scene.sh.shape[1], 1), cfg.lr_sh_rest)
        sh_lr[:, 0] = cfg.lr_sh
        rates["sh"] = sh_lr
    return rates


def init_sg(scene: Scene) -> Scene:
    """Zero every SG amplitude (the staged warm start)."""
    if scene.kind is ModelKind.SH:
        return scene.copy()
    return scene.with_params(sg_alpha=np.zeros_like(scene.sg_alpha))


@dataclass
class TrainResult:
    scene: Scene
    losses: list[float] = field(default_factory=list)
    views: list[int] = field(default_factory=list)

    def write_csv(self, path) -> None:
        write_loss_csv(path, self.losses, self.views)


def write_loss_csv(path, losses: Sequence[float], views: Optional[Sequence[int]] = None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "view", "loss"])
        for i, value in enumerate(losses):
            w.writerow([i, "" if views is None else views[i], repr(float(value))])


def _view_schedule(n_views: int, total: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    epochs = -(-total // n_views)
    return np.concatenate([rng.permutation(n_views) for _ in range(epochs)])[:total]


def train(
    scene: Scene,
    views: Sequence[tuple[Camera, np.ndarray]],
    cfg: Optional[TrainConfig] = None,
    render_cfg: Optional[RenderConfig] = None,
    *,
    out_dir=None,
    callback: Optional[Callable[[int, Scene, float], None]] = None,
) -> TrainResult:
    """Optimize ``scene`` against ``views``; returns the final scene and per-iteration losses."""
    cfg = cfg or TrainConfig()
    render_cfg = render_cfg or RenderConfig()
    if not views:
        raise ContractError("training needs at least one view")
    for cam, target in views:
        if np.shape(target) != (cam.height, cam.width, 3):
            raise ContractError(f"target shape {np.shape(target)} does not match camera {cam.height}x{cam.width}")
    if len(scene) == 0:
        raise ContractError("cannot train an empty scene")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if cfg.sg_zero_init and cfg.sg_start_iteration > 0:
        scene = init_sg(scene)
    else:
        scene = scene.copy()
    adam = Adam(scene.params(), cfg.beta1, cfg.beta2, cfg.eps)
    schedule = _view_schedule(len(views), cfg.total_iterations, cfg.seed)
    result = TrainResult(scene)

    for it in range(cfg.total_iterations):
        vi = int(schedule[it])
        cam, target = views[vi]
        fwd = render(scene, cam, render_cfg)
        value, upstream = loss(fwd.image, target, cfg.lambda_dssim)
        if not np.isfinite(value):
            snap = None
            if out is not None:
                snap = out / f"diverged_{it:06d}.ply"
                save_ply(scene, snap)
            raise TrainingDiverged(f"non-finite loss at iteration {it} (view {vi})", it, scene, snap)
        result.losses.append(value)
        result.views.append(vi)

        grads = backward(scene, cam, render_cfg, upstream, result=fwd)
        rates = learning_rates(scene, cfg, it)
        sg_active = it >= cfg.sg_start_iteration
        updates = {}
        for name, param in scene.params().items():
            if name in SG_FIELDS and not sg_active:
                continue
            updates[name] = adam.step(name, param, grads[name], rates[name])
        if "sg_mu" in updates:
            mu = updates["sg_mu"]
            updates["sg_mu"] = mu / np.linalg.norm(mu, axis=1, keepdims=True)
        for name, arr in updates.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingDiverged(f"non-finite {name} after iteration {it}", it, scene)
            setattr(scene, name, arr)

        if cfg.prune_interval and (it + 1) % cfg.prune_interval == 0:
            keep = _prune_mask(scene, cfg.prune_opacity_floor)
            if not keep.all():
                scene = scene.subset(np.flatnonzero(keep))
                adam.keep(keep)
        if out is not None and cfg.checkpoint_interval and (it + 1) % cfg.checkpoint_interval == 0:
            save_ply(scene, out / f"checkpoint_{it + 1:06d}.ply")
        if callback is not None:
            callback(it, scene, value)
        if it % 100 == 0:
            log.debug("iteration %d loss %.6g", it, value)

    result.scene = scene
    if out is not None:
        result.write_csv(out / "loss.csv")
    return result
