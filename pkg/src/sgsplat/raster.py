"""EWA projection, adaptive SH degree selection and tiled alpha compositing.

Pixel ``(row, col)`` has its center at image coordinates ``(x=col, y=row)``.
Cameras follow the OpenCV convention: +z looks forward, +y points down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

from . import _kernels
from . import color_model as cm
from .color_model import ModelKind
from .errors import ContractError
from .scene import GaussianPrimitive, Scene, quat_to_rotmat, sigmoid

DEFAULT_THRESHOLDS = (2.0, 8.0)
DILATION = 0.3
SIGMA_EXTENT = 3.0


@dataclass
class Camera:
    w2c: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ContractError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        self.width, self.height = int(self.width), int(self.height)

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, fx, fy=None, width, height, cx=None, cy=None, near=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        down = -np.asarray(up, dtype=np.float64)
        down = down - (down @ forward) * forward
        down /= np.linalg.norm(down)
        right = np.cross(down, forward)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        return cls(
            w2c,
            fx,
            fx if fy is None else fy,
            (width - 1) / 2.0 if cx is None else cx,
            (height - 1) / 2.0 if cy is None else cy,
            width,
            height,
            near,
        )

    def to_dict(self) -> dict:
        return {
            "w2c": [float(v) for v in self.w2c.ravel()],
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            w2c = np.asarray(d["w2c"], dtype=np.float64).reshape(4, 4)
            return cls(w2c, float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]), float(d.get("near", 0.01)))
        except KeyError as exc:
            raise ContractError(f"camera JSON is missing {exc.args[0]!r}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RenderConfig:
    tile_size: int = 16
    thresholds: tuple[float, float] = DEFAULT_THRESHOLDS
    t_min: float = 1e-4
    dilation: float = DILATION
    background: Optional[Sequence[float]] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if int(self.tile_size) < 1:
            raise ContractError(f"tile_size must be >= 1, got {self.tile_size}")
        t0, t1 = (float(t) for t in self.thresholds)
        if not t0 <= t1:
            raise ContractError(f"degree thresholds must be increasing, got {self.thresholds}")
        self.thresholds = (t0, t1)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    conic: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    radius_px: float


def select_degree(radius_px, thresholds=DEFAULT_THRESHOLDS):
    """SH degree from footprint radius: 0 below ``t0``, 1 below ``t1``, else 2."""
    t0, t1 = thresholds
    if t0 > t1:
        raise ContractError(f"degree thresholds must be increasing, got {thresholds}")
    r = np.asarray(radius_px, dtype=np.float64)
    deg = (r >= t0).astype(np.int64) + (r >= t1).astype(np.int64)
    return int(deg) if deg.ndim == 0 else deg


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


@dataclass
class Projection:
    """Per-Gaussian projection results plus the intermediates the backward pass reuses."""

    valid: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    degrees: Optional[np.ndarray]
    p_cam: np.ndarray
    jac: np.ndarray  # (N, 2, 3) perspective Jacobian
    rotmats: np.ndarray
    cov3d: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    color_eval: Optional[cm.ColorEval] = None
    bounds: Optional[np.ndarray] = None  # (N, 4) px0, px1, py0, py1 clipped pixel bounds


def project_gaussians(scene: Scene, cam: Camera, cfg: Optional[RenderConfig] = None) -> Projection:
    cfg = cfg or RenderConfig()
    n = len(scene)
    rot_w = cam.rotation
    p_cam = scene.means @ rot_w.T + cam.translation
    z = p_cam[:, 2]
    valid = z > cam.near
    zs = np.where(valid, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / (zs * zs)

    rotmats = quat_to_rotmat(scene.quats) if n else np.zeros((0, 3, 3))
    m = rotmats * scene.scales[:, None, :]
    cov3d = m @ np.swapaxes(m, -1, -2)
    tmat = jac @ rot_w
    cov2d = tmat @ cov3d @ np.swapaxes(tmat, -1, -2)
    cov2d[:, 0, 0] += cfg.dilation
    cov2d[:, 1, 1] += cfg.dilation
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    valid &= det > 0.0
    dets = np.where(valid, det, 1.0)
    conic = np.stack([c / dets, -b / dets, a / dets], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = SIGMA_EXTENT * np.sqrt(np.maximum(lam_max, 0.0))

    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    px0 = np.floor(mean2d[:, 0] - radius)
    px1 = np.ceil(mean2d[:, 0] + radius)
    py0 = np.floor(mean2d[:, 1] - radius)
    py1 = np.ceil(mean2d[:, 1] + radius)
    valid &= (px1 >= 0) & (px0 <= cam.width - 1) & (py1 >= 0) & (py0 <= cam.height - 1)
    valid &= np.isfinite(mean2d).all(axis=1) & np.isfinite(radius)
    bounds = np.zeros((n, 4), dtype=np.int64)
    if n:
        bounds[:, 0] = np.clip(px0, 0, cam.width - 1)
        bounds[:, 1] = np.clip(px1, 0, cam.width - 1)
        bounds[:, 2] = np.clip(py0, 0, cam.height - 1)
        bounds[:, 3] = np.clip(py1, 0, cam.height - 1)

    offset = scene.means - cam.center
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / np.where(dist > 0, dist, 1.0)[:, None]

    degrees = None
    if scene.kind is ModelKind.MIXED:
        degrees = select_degree(radius, cfg.thresholds) if n else np.zeros(0, dtype=np.int64)
    ev = cm.evaluate(scene.kind, scene.color_params(), dirs, axes=scene.lobe_axes(), degrees=degrees)

    return Projection(
        valid=valid,
        mean2d=mean2d,
        conic=conic,
        cov2d=cov2d,
        depth=z,
        radius=radius,
        opacity=sigmoid(scene.opacity_logits),
        colors=ev.colors,
        degrees=degrees,
        p_cam=p_cam,
        jac=jac,
        rotmats=rotmats,
        cov3d=cov3d,
        dirs=dirs,
        dist=dist,
        color_eval=ev,
        bounds=bounds,
    )


def project(g: GaussianPrimitive, cam: Camera, cfg: Optional[RenderConfig] = None) -> Optional[Splat2D]:
    """Project one Gaussian; ``None`` when it is culled."""
    scene = Scene.from_gaussians([g])
    proj = project_gaussians(scene, cam, cfg)
    if not proj.valid[0]:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0],
        conic=proj.conic[0],
        depth=float(proj.depth[0]),
        color=proj.colors[0],
        opacity=float(proj.opacity[0]),
        radius_px=float(proj.radius[0]),
    )


def depth_order(proj: Projection) -> np.ndarray:
    """Valid splat ids front to back; equal depths keep input order."""
    idx = np.flatnonzero(proj.valid)
    return idx[np.argsort(proj.depth[idx], kind="stable")]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, 3) linear RGB, unclamped
    final_t: np.ndarray  # (H, W) transmittance left for the background
    n_contrib: np.ndarray  # (H, W) splats composited per pixel
    support_sum: np.ndarray  # (H, W) sum of (id + 1) over composited splats
    proj: Projection = field(repr=False)
    order: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)
    entries: np.ndarray = field(repr=False)


def _background(scene: Scene, cfg: RenderConfig) -> np.ndarray:
    bg = scene.background if cfg.background is None else cfg.background
    return np.asarray(bg, dtype=np.float64).reshape(3)


def _set_threads(cfg: RenderConfig) -> None:
    if cfg.threads is not None:
        numba.set_num_threads(max(1, min(int(cfg.threads), numba.config.NUMBA_NUM_THREADS)))


def tile_grid(cam: Camera, tile_size: int) -> tuple[int, int]:
    return -(-cam.width // tile_size), -(-cam.height // tile_size)


def bin_splats(proj: Projection, cam: Camera, tile_size: int):
    order = depth_order(proj)
    tiles_x, tiles_y = tile_grid(cam, tile_size)
    b = proj.bounds
    offsets, entries = _kernels.bin_tiles(
        order.astype(np.int64), b[:, 0].copy(), b[:, 1].copy(), b[:, 2].copy(), b[:, 3].copy(),
        tile_size, tiles_x, tiles_y,
    )
    return order, offsets, entries


def render(scene: Scene, cam: Camera, cfg: Optional[RenderConfig] = None) -> RenderResult:
    """Composite the scene front to back through 16x16 (default) tiles."""
    cfg = cfg or RenderConfig()
    _set_threads(cfg)
    proj = project_gaussians(scene, cam, cfg)
    order, offsets, entries = bin_splats(proj, cam, cfg.tile_size)
    h, w = cam.height, cam.width
    image = np.empty((h, w, 3))
    final_t = np.empty((h, w))
    n_contrib = np.empty((h, w), dtype=np.int64)
    support_sum = np.empty((h, w), dtype=np.int64)
    tiles_x, _ = tile_grid(cam, cfg.tile_size)
    _kernels.composite(
        offsets, entries, proj.bounds,
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        np.ascontiguousarray(proj.opacity), np.ascontiguousarray(proj.colors),
        _background(scene, cfg), w, h, cfg.tile_size, tiles_x, cfg.t_min,
        image, final_t, n_contrib, support_sum,
    )
    return RenderResult(image, final_t, n_contrib, support_sum, proj, order, offsets, entries)


def composite_bruteforce(scene: Scene, cam: Camera, cfg: Optional[RenderConfig] = None):
    """Reference compositor: every pixel visits every projected splat in depth order.

    Returns ``(image, final_t, weight_sum)``. No tiling, no per-splat bounds.
    """
    cfg = cfg or RenderConfig()
    proj = project_gaussians(scene, cam, cfg)
    order = depth_order(proj)
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    trans = np.ones((h, w))
    active = np.ones((h, w), dtype=bool)
    color = np.zeros((h, w, 3))
    weight_sum = np.zeros((h, w))
    for s in order:
        dx = xs - proj.mean2d[s, 0]
        dy = ys - proj.mean2d[s, 1]
        ca, cb, cc = proj.conic[s]
        m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        a = np.where(active & (m2 <= _kernels.SUPPORT_M2), proj.opacity[s] * np.exp(-0.5 * m2), 0.0)
        wgt = a * trans
        color += wgt[..., None] * proj.colors[s]
        weight_sum += wgt
        trans = trans * (1.0 - a)
        active &= ~(trans < cfg.t_min)
    color += trans[..., None] * _background(scene, cfg)
    return color, trans, weight_sum


def flops_per_gaussian(kind, sh_degree: int = cm.MAX_SH_DEGREE) -> int:
    """Static per-Gaussian color cost, the C in the N x C frame-cost model."""
    return cm.color_flops(kind, sh_degree)


# ---------------------------------------------------------------------------
# Image output
# ---------------------------------------------------------------------------


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    data = np.round(linear_to_srgb(image) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    """Linear RGB float image from a ``.npy`` dump or an sRGB PNG."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    data = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(data)
