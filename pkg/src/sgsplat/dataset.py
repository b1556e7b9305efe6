"""Posed image sets on disk and a deterministic synthetic teacher scene.

A views directory holds ``NNN.json`` camera files, each with a target image
next to it as ``NNN.npy`` (float, linear) or ``NNN.png``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import color_model as cm
from .color_model import ModelKind
from .errors import ContractError
from .ply import save_ply
from .raster import Camera, RenderConfig, read_image, render, write_png
from .scene import Scene, logit

TEACHER_BAND_STD = (0.2, 0.12, 0.06)


def save_views(directory, views: Sequence[tuple[Camera, np.ndarray]], png: bool = False) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (cam, image) in enumerate(views):
        stem = directory / f"{i:03d}"
        cam.save(stem.with_suffix(".json"))
        np.save(stem.with_suffix(".npy"), np.asarray(image, dtype=np.float64))
        if png:
            write_png(stem.with_suffix(".png"), image)
        paths.append(stem.with_suffix(".json"))
    return paths


def load_views(directory) -> list[tuple[Camera, np.ndarray]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"views directory not found: {directory}")
    views = []
    for cam_path in sorted(directory.glob("*.json")):
        cam = Camera.load(cam_path)
        for suffix in (".npy", ".png"):
            img_path = cam_path.with_suffix(suffix)
            if img_path.exists():
                image = read_image(img_path)
                break
        else:
            raise FileNotFoundError(f"no image next to {cam_path}")
        if image.shape != (cam.height, cam.width, 3):
            raise ContractError(f"{img_path}: image shape {image.shape} does not match camera")
        views.append((cam, image))
    if not views:
        raise FileNotFoundError(f"no camera files in {directory}")
    return views


def orbit_cameras(
    n: int,
    radius: float = 4.0,
    elevation_deg: float = 20.0,
    width: int = 64,
    height: int = 64,
    fov_deg: float = 50.0,
    phase_deg: float = 0.0,
) -> list[Camera]:
    """Cameras evenly spaced in azimuth, alternating above and below the equator, aimed at the origin."""
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    cams = []
    for i in range(n):
        az = np.radians(phase_deg + 360.0 * i / n)
        el = np.radians(elevation_deg if i % 2 == 0 else -0.5 * elevation_deg)
        eye = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera.look_at(eye, (0.0, 0.0, 0.0), fx=fx, width=width, height=height))
    return cams


def teacher_scene(
    n: int = 1000,
    seed: int = 0,
    extent: float = 1.0,
    scale: float = 0.08,
    band_std: Sequence[float] = TEACHER_BAND_STD,
    background=(0.0, 0.0, 0.0),
) -> Scene:
    """Random degree-3 SH Gaussians in a cube; band ``l`` coefficients have std ``band_std[l-1]``."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(-extent, extent, (n, 3))
    quats = rng.normal(size=(n, 4))
    log_scales = np.log(scale) + 0.3 * rng.normal(size=(n, 3))
    opacity_logits = logit(np.clip(rng.uniform(0.5, 0.95, n), 1e-4, 1 - 1e-4))
    base = rng.uniform(0.15, 0.85, (n, 3))
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = (base - cm.SH_OFFSET) / cm.SH_C0
    for band, std in enumerate(band_std, start=1):
        sh[:, band * band : (band + 1) ** 2] = std * rng.normal(size=(n, 2 * band + 1, 3))
    return Scene(ModelKind.SH, means, quats, log_scales, opacity_logits, sh=sh, background=background)


def random_scene(
    kind,
    n: int,
    seed: int = 0,
    spread: float = 0.6,
    scale_range=(0.05, 0.3),
    color_std: float = 0.3,
    background=(0.2, 0.1, 0.3),
) -> Scene:
    """Randomized scene of any color model around the origin (test and benchmark fixture)."""
    kind = ModelKind(kind)
    rng = np.random.default_rng(seed)
    kw = dict(
        kind=kind,
        means=rng.normal(size=(n, 3)) * spread,
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        opacity_logits=rng.normal(size=n),
        background=background,
    )
    if kind in (ModelKind.SH, ModelKind.MIXED):
        kw["sh"] = rng.normal(size=(n, 16 if kind is ModelKind.SH else 9, 3)) * color_std
    else:
        kw["diffuse"] = rng.uniform(0.2, 0.8, (n, 3))
    if kind is not ModelKind.SH:
        lobes = 1 if kind is ModelKind.SG1 else 3
        kw["sg_alpha"] = rng.normal(size=(n, lobes, 3)) * color_std
        kw["sg_log_lambda"] = rng.normal(size=(n, lobes))
    if kind is ModelKind.SG1:
        mu = rng.normal(size=(n, 3))
        kw["sg_mu"] = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    return Scene(**kw)


def render_views(scene: Scene, cams: Sequence[Camera], cfg: Optional[RenderConfig] = None):
    return [(cam, render(scene, cam, cfg).image) for cam in cams]


def student_from(teacher: Scene, kind, seed: int = 0, jitter: float = 0.0) -> Scene:
    """Same geometry as ``teacher`` with only its view-independent color; SG amplitudes zero."""
    kind = ModelKind(kind)
    rng = np.random.default_rng(seed)
    n = len(teacher)
    means = teacher.means + jitter * rng.normal(size=(n, 3))
    dc = cm.SH_C0 * teacher.sh[:, 0] + cm.SH_OFFSET
    kw = dict(
        kind=kind,
        means=means,
        quats=teacher.quats.copy(),
        log_scales=teacher.log_scales.copy(),
        opacity_logits=teacher.opacity_logits.copy(),
        background=teacher.background.copy(),
    )
    if kind is ModelKind.SH:
        sh = np.zeros_like(teacher.sh)
        sh[:, 0] = teacher.sh[:, 0]
        kw["sh"] = sh
    elif kind is ModelKind.MIXED:
        sh = np.zeros((n, 9, 3))
        sh[:, 0] = teacher.sh[:, 0]
        kw["sh"] = sh
    else:
        kw["diffuse"] = dc
    if kind is not ModelKind.SH:
        lobes = 1 if kind is ModelKind.SG1 else 3
        kw["sg_alpha"] = np.zeros((n, lobes, 3))
        kw["sg_log_lambda"] = np.zeros((n, lobes))
    if kind is ModelKind.SG1:
        mu = rng.normal(size=(n, 3))
        kw["sg_mu"] = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    return Scene(**kw)


def write_synthetic(
    out_dir,
    n: int = 1000,
    n_views: int = 8,
    n_held_out: int = 2,
    width: int = 64,
    height: int = 64,
    seed: int = 0,
) -> dict:
    """Write ``scene.ply``, ``views/`` (training) and ``held_out/`` for the teacher scene."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = teacher_scene(n, seed=seed)
    save_ply(scene, out / "scene.ply")
    train_cams = orbit_cameras(n_views, width=width, height=height)
    held_cams = orbit_cameras(n_held_out, width=width, height=height, phase_deg=180.0 / n_views + 7.0)
    save_views(out / "views", render_views(scene, train_cams))
    save_views(out / "held_out", render_views(scene, held_cams))
    return {"scene": out / "scene.ply", "views": out / "views", "held_out": out / "held_out"}
