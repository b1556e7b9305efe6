"""Frame-time measurement and the static per-Gaussian color cost table."""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from . import color_model as cm
from .color_model import ModelKind
from .raster import Camera, RenderConfig, flops_per_gaussian, render
from .scene import Scene

WARMUP = 3


def time_render(scene: Scene, cam: Camera, cfg: Optional[RenderConfig] = None, repeat: int = 20,
                warmup: int = WARMUP) -> dict:
    """Median wall time of ``repeat`` renders after ``warmup`` untimed ones."""
    return compare_renders({"scene": scene}, cam, cfg, repeat, warmup)["scene"]


def compare_renders(scenes: dict, cam: Camera, cfg: Optional[RenderConfig] = None, repeat: int = 20,
                    warmup: int = WARMUP) -> dict:
    """Time several scenes with interleaved runs so slow drift of the machine hits all of them alike."""
    if repeat < 1:
        raise ValueError("repeat must be at least 1")
    cfg = cfg or RenderConfig()
    for _ in range(warmup):
        for scene in scenes.values():
            render(scene, cam, cfg)
    times = {name: [] for name in scenes}
    for _ in range(repeat):
        for name, scene in scenes.items():
            t0 = time.perf_counter()
            render(scene, cam, cfg)
            times[name].append(time.perf_counter() - t0)
    out = {}
    for name, ts in times.items():
        ms = np.asarray(ts) * 1e3
        med = float(np.median(ms))
        out[name] = {
            "kind": ModelKind(scenes[name].kind).value,
            "n_gaussians": len(scenes[name]),
            "median_ms": med,
            "min_ms": float(ms.min()),
            "max_ms": float(ms.max()),
            "fps": 1e3 / med if med > 0 else float("inf"),
            "times_ms": ms.tolist(),
        }
    return out


def flops_table(sh_degree: int = cm.MAX_SH_DEGREE) -> list[dict]:
    """Per-Gaussian parameter count and color-evaluation flops for every model."""
    rows = []
    for kind in ModelKind:
        deg = sh_degree if kind is ModelKind.SH else cm.MIXED_SH_DEGREE
        rows.append({
            "kind": kind.value,
            "color_params": cm.kind_param_count(kind, deg),
            "flops_per_gaussian": flops_per_gaussian(kind, deg),
        })
    return rows


def speed_fixture(n: int = 50000, seed: int = 0, size: int = 800, scale: float = 0.002):
    """SH3 and orthogonal-SG scenes with identical geometry, plus a camera that sees them.

    Splats are a few pixels wide so the per-Gaussian color cost is a visible
    share of the frame time.
    """
    from .dataset import orbit_cameras, teacher_scene

    sh_scene = teacher_scene(n, seed=seed, scale=scale)
    rng = np.random.default_rng(seed + 1)
    sg_scene = Scene(
        ModelKind.SG3, sh_scene.means, sh_scene.quats, sh_scene.log_scales, sh_scene.opacity_logits,
        diffuse=rng.uniform(0.1, 0.9, (n, 3)),
        sg_alpha=rng.normal(0.0, 0.1, (n, 3, 3)),
        sg_log_lambda=np.log(rng.uniform(0.5, 8.0, (n, 3))),
    )
    cam = orbit_cameras(1, width=size, height=size)[0]
    return sh_scene, sg_scene, cam
