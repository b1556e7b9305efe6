"""Gaussian primitives and scenes.

A :class:`Scene` stores its Gaussians as parallel arrays (struct of arrays) in
the pre-activation convention of the 3D-GS checkpoint ecosystem: log-scales,
opacity logits, raw quaternions and, for spherical-Gaussian models, log
sharpness. :class:`GaussianPrimitive` is the one-at-a-time view of the same data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import color_model as cm
from .color_model import ModelKind
from .errors import ContractError, DegenerateRotationError, NumericError

COV_JITTER = 1e-9

# Trainable array fields per color model, geometry first.
GEOMETRY_FIELDS = ("means", "quats", "log_scales", "opacity_logits")
COLOR_FIELDS = {
    ModelKind.SH: ("sh",),
    ModelKind.SG1: ("diffuse", "sg_alpha", "sg_log_lambda", "sg_mu"),
    ModelKind.SG3: ("diffuse", "sg_alpha", "sg_log_lambda"),
    ModelKind.MIXED: ("sh", "sg_alpha", "sg_log_lambda"),
}
SG_FIELDS = ("sg_alpha", "sg_log_lambda", "sg_mu")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order, normalized first."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateRotationError("zero quaternion has no rotation")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def covariance(q, s) -> np.ndarray:
    """World covariance ``R S S^T R^T`` from a quaternion and log-scales; broadcasts."""
    r = quat_to_rotmat(q)
    m = r * np.exp(np.asarray(s, dtype=np.float64))[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(eq=False)
class GaussianPrimitive:
    position: np.ndarray
    rotation: np.ndarray  # quaternion (w, x, y, z), unnormalized storage
    log_scale: np.ndarray
    opacity_logit: float
    color: cm.ColorModel

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def covariance(self) -> np.ndarray:
        return covariance(self.rotation, self.log_scale)


def gaussian_density(g: GaussianPrimitive, x) -> float:
    """Unnormalized density ``exp(-0.5 (x-X)^T Sigma^-1 (x-X))``; 1 at the center."""
    cov = g.covariance + COV_JITTER * np.eye(3)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("covariance is singular after regularization") from exc
    diff = np.asarray(x, dtype=np.float64) - np.asarray(g.position, dtype=np.float64)
    y = np.linalg.solve(chol, diff)
    m2 = float(y @ y)
    if not np.isfinite(m2):
        raise NumericError("non-finite Mahalanobis distance")
    return float(np.exp(-0.5 * m2))


def _log_sharpness(lam) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(lam, dtype=np.float64))


def frame_axes(shared_axes: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Per-Gaussian lobe axes: each shared axis row rotated by the Gaussian's frame rotation vector."""
    rot = Rotation.from_rotvec(np.asarray(frames, dtype=np.float64)).as_matrix()
    return np.einsum("nij,aj->nai", rot, shared_axes)


@dataclass(eq=False)
class Scene:
    kind: ModelKind
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: Optional[np.ndarray] = None
    diffuse: Optional[np.ndarray] = None
    sg_alpha: Optional[np.ndarray] = None
    sg_log_lambda: Optional[np.ndarray] = None
    sg_mu: Optional[np.ndarray] = None
    sg_frame: Optional[np.ndarray] = None
    shared_axes: Optional[np.ndarray] = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        for name in ("means", "quats", "log_scales", "opacity_logits", "background"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.means)
        shapes = {"means": (n, 3), "quats": (n, 4), "log_scales": (n, 3), "opacity_logits": (n,)}
        if self.kind in (ModelKind.SG3, ModelKind.MIXED):
            if self.shared_axes is None:
                self.shared_axes = cm.DEFAULT_AXES.copy()
            self.shared_axes = cm.check_orthonormal(self.shared_axes)
            if self.sg_frame is None:
                self.sg_frame = np.zeros((n, 3))
            shapes["sg_frame"] = (n, 3)
        for name in COLOR_FIELDS[self.kind]:
            if getattr(self, name) is None:
                raise ContractError(f"{self.kind.value} scene requires field {name!r}")
        if self.kind is ModelKind.SG1:
            shapes.update(diffuse=(n, 3), sg_alpha=(n, 1, 3), sg_log_lambda=(n, 1), sg_mu=(n, 3))
        elif self.kind is ModelKind.SG3:
            shapes.update(diffuse=(n, 3), sg_alpha=(n, 3, 3), sg_log_lambda=(n, 3))
        elif self.kind is ModelKind.MIXED:
            shapes.update(sh=(n, 9, 3), sg_alpha=(n, 3, 3), sg_log_lambda=(n, 3))
        else:
            k = 0 if self.sh is None else np.asarray(self.sh).shape[1]
            if k not in (1, 4, 9, 16):
                raise ContractError(f"SH array must have 1, 4, 9 or 16 coefficients, got {k}")
            shapes["sh"] = (n, k, 3)
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ContractError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        if self.background.shape != (3,):
            raise ContractError("background must be an RGB 3-vector")

    def __len__(self) -> int:
        return len(self.means)

    @property
    def sh_degree(self) -> Optional[int]:
        return None if self.sh is None else int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def param_fields(self) -> tuple[str, ...]:
        return GEOMETRY_FIELDS + COLOR_FIELDS[self.kind]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_fields}

    def copy(self) -> "Scene":
        kw = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            kw[name] = v.copy() if isinstance(v, np.ndarray) else v
        return Scene(**kw)

    def with_params(self, **arrays) -> "Scene":
        return replace(self.copy(), **arrays)

    def subset(self, index) -> "Scene":
        index = np.asarray(index)
        kw = {"kind": self.kind, "shared_axes": self.shared_axes, "background": self.background.copy()}
        for name in GEOMETRY_FIELDS + ("sh", "diffuse", "sg_alpha", "sg_log_lambda", "sg_mu", "sg_frame"):
            v = getattr(self, name)
            kw[name] = None if v is None else v[index].copy()
        return Scene(**kw)

    # -- activations ------------------------------------------------------
    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return covariance(self.quats, self.log_scales)

    def lobe_axes(self) -> Optional[np.ndarray]:
        """(3, 3) shared axes when no Gaussian rotates its frame, else (N, 3, 3)."""
        if self.kind not in (ModelKind.SG3, ModelKind.MIXED):
            return None
        if not np.any(self.sg_frame):
            return self.shared_axes
        return frame_axes(self.shared_axes, self.sg_frame)

    def color_params(self) -> dict[str, np.ndarray]:
        """Activated color parameters in the layout :func:`color_model.evaluate` expects."""
        p = {}
        if self.sh is not None:
            p["sh"] = self.sh
        if self.diffuse is not None:
            p["diffuse"] = self.diffuse
        if self.kind is not ModelKind.SH:
            p["sg_alpha"] = self.sg_alpha
            p["sg_lambda"] = np.exp(self.sg_log_lambda)
        if self.kind is ModelKind.SG1:
            p["sg_mu"] = self.sg_mu
        return p

    # -- per-Gaussian view ------------------------------------------------
    def gaussian(self, i: int) -> GaussianPrimitive:
        lam = None if self.sg_log_lambda is None else np.exp(self.sg_log_lambda[i])
        if self.kind is ModelKind.SH:
            color = cm.SHOnly(cm.SHCoeffs(self.sh_degree, self.sh[i]))
        elif self.kind is ModelKind.SG1:
            mu = self.sg_mu[i] / np.linalg.norm(self.sg_mu[i])
            color = cm.DiffuseSG(self.diffuse[i], cm.SGLobe(self.sg_alpha[i, 0], lam[0], mu))
        else:
            axes = frame_axes(self.shared_axes, self.sg_frame[i : i + 1])[0]
            sgs = cm.OrthoSGSet(self.sg_alpha[i], lam, axes)
            if self.kind is ModelKind.SG3:
                color = cm.DiffuseOrthoSG(self.diffuse[i], sgs)
            else:
                color = cm.MixedSHSG(cm.SHCoeffs(2, self.sh[i]), sgs)
        return GaussianPrimitive(
            self.means[i].copy(), self.quats[i].copy(), self.log_scales[i].copy(), float(self.opacity_logits[i]), color
        )

    @classmethod
    def from_gaussians(
        cls, gaussians: Sequence[GaussianPrimitive], background=(0.0, 0.0, 0.0), shared_axes=None
    ) -> "Scene":
        if not gaussians:
            raise ContractError("use Scene.empty() for scenes without Gaussians")
        first = type(gaussians[0].color)
        if any(type(g.color) is not first for g in gaussians):
            raise ContractError("scenes must use a single color model for every Gaussian")
        kind = gaussians[0].color.kind
        kw = dict(
            kind=kind,
            means=np.array([g.position for g in gaussians], dtype=np.float64),
            quats=np.array([g.rotation for g in gaussians], dtype=np.float64),
            log_scales=np.array([g.log_scale for g in gaussians], dtype=np.float64),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            background=background,
        )
        colors = [g.color for g in gaussians]
        if kind is ModelKind.SH:
            degrees = {c.sh.degree for c in colors}
            if len(degrees) != 1:
                raise ContractError("all SH Gaussians must share one degree")
            kw["sh"] = np.array([c.sh.coeffs for c in colors])
        elif kind is ModelKind.SG1:
            kw["diffuse"] = np.array([c.diffuse for c in colors])
            kw["sg_alpha"] = np.array([[c.lobe.alpha] for c in colors])
            kw["sg_log_lambda"] = _log_sharpness([[c.lobe.lam] for c in colors])
            kw["sg_mu"] = np.array([c.lobe.mu for c in colors])
        else:
            axes = colors[0].sgs.axes if shared_axes is None else cm.check_orthonormal(shared_axes)
            for c in colors:
                if not np.allclose(c.sgs.axes, axes, atol=cm.ORTHO_TOL):
                    raise ContractError("orthogonal lobe axes must be shared by the whole scene")
            kw["shared_axes"] = axes
            kw["sg_alpha"] = np.array([c.sgs.alpha for c in colors])
            kw["sg_log_lambda"] = _log_sharpness([c.sgs.lam for c in colors])
            if kind is ModelKind.SG3:
                kw["diffuse"] = np.array([c.diffuse for c in colors])
            else:
                if any(c.sh.degree != cm.MIXED_SH_DEGREE for c in colors):
                    raise ContractError("mixed scenes store degree-2 SH for every Gaussian")
                kw["sh"] = np.array([c.sh.coeffs for c in colors])
        return cls(**kw)

    @classmethod
    def empty(cls, kind=ModelKind.SH, sh_degree: int = 3, background=(0.0, 0.0, 0.0)) -> "Scene":
        kind = ModelKind(kind)
        kw = dict(
            kind=kind,
            means=np.zeros((0, 3)),
            quats=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            background=background,
        )
        if kind is ModelKind.SH:
            kw["sh"] = np.zeros((0, cm.num_sh_coeffs(sh_degree), 3))
        if kind is ModelKind.MIXED:
            kw["sh"] = np.zeros((0, 9, 3))
        if kind in (ModelKind.SG1, ModelKind.SG3):
            kw["diffuse"] = np.zeros((0, 3))
        if kind is not ModelKind.SH:
            lobes = 1 if kind is ModelKind.SG1 else 3
            kw["sg_alpha"] = np.zeros((0, lobes, 3))
            kw["sg_log_lambda"] = np.zeros((0, lobes))
        if kind is ModelKind.SG1:
            kw["sg_mu"] = np.zeros((0, 3))
        return cls(**kw)
