"""View-dependent color models: real spherical harmonics and spherical Gaussians.

Four per-Gaussian color representations are supported:

``sh``     SH coefficients of degree 0..3, decoded as ``max(SH(d) + 0.5, 0)``.
``sg1``    diffuse RGB plus one free spherical-Gaussian lobe (10 reals).
``sg3``    diffuse RGB plus three lobes on an orthonormal axis triple (15 reals).
``mixed``  degree-2 SH (truncated at evaluation time) plus three orthogonal lobes.

A spherical-Gaussian lobe contributes ``alpha * exp(lambda * (d . mu - 1))``.
The 0.5 decoding offset applies to the SH part only; diffuse colors and lobes
are raw radiance.

Everything here is vectorized over a leading Gaussian axis so the rasterizer
and the optimizer can share one code path with the single-model helpers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ContractError, OrthogonalityError, UnsupportedDegreeError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_OFFSET = 0.5
MAX_SH_DEGREE = 3
MIXED_SH_DEGREE = 2
UNIT_TOL = 1e-6
ORTHO_TOL = 1e-6
DEFAULT_AXES = np.eye(3)


class ModelKind(str, enum.Enum):
    SH = "sh"
    SG1 = "sg1"
    SG3 = "sg3"
    MIXED = "mixed"


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def _check_degree(degree: int) -> None:
    if not isinstance(degree, (int, np.integer)) or degree < 0 or degree > MAX_SH_DEGREE:
        raise UnsupportedDegreeError(f"SH degree must be in 0..{MAX_SH_DEGREE}, got {degree!r}")


def _check_unit(direction: np.ndarray, what: str = "direction") -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ContractError(f"{what} must be a 3-vector, got shape {d.shape}")
    norms = np.linalg.norm(d, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= UNIT_TOL):
        raise ContractError(f"{what} must have unit length (|{what}| = {norms})")
    return d


# ---------------------------------------------------------------------------
# SH basis
# ---------------------------------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values ``(..., (degree+1)**2)`` in the 3D-GS constant convention."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (num_sh_coeffs(degree),))
    out[..., 0] = SH_C0
    if degree < 1:
        return out
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * x * y * z
    out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives of :func:`sh_basis` w.r.t. (x, y, z); shape ``(..., K, 3)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g = np.zeros(dirs.shape[:-1] + (num_sh_coeffs(degree), 3))
    if degree < 1:
        return g
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    if degree < 2:
        return g
    xx, yy, zz = x * x, y * y, z * z
    a, b, c, d, e = SH_C2
    g[..., 4, 0], g[..., 4, 1] = a * y, a * x
    g[..., 5, 1], g[..., 5, 2] = b * z, b * y
    g[..., 6, 0], g[..., 6, 1], g[..., 6, 2] = -2.0 * c * x, -2.0 * c * y, 4.0 * c * z
    g[..., 7, 0], g[..., 7, 2] = d * z, d * x
    g[..., 8, 0], g[..., 8, 1] = 2.0 * e * x, -2.0 * e * y
    if degree < 3:
        return g
    k0, k1, k2, k3, k4, k5, k6 = SH_C3
    g[..., 9, 0], g[..., 9, 1] = 6.0 * k0 * x * y, k0 * (3.0 * xx - 3.0 * yy)
    g[..., 10, 0], g[..., 10, 1], g[..., 10, 2] = k1 * y * z, k1 * x * z, k1 * x * y
    g[..., 11, 0] = -2.0 * k2 * x * y
    g[..., 11, 1] = k2 * (4.0 * zz - xx - 3.0 * yy)
    g[..., 11, 2] = 8.0 * k2 * y * z
    g[..., 12, 0] = -6.0 * k3 * x * z
    g[..., 12, 1] = -6.0 * k3 * y * z
    g[..., 12, 2] = k3 * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[..., 13, 0] = k4 * (4.0 * zz - 3.0 * xx - yy)
    g[..., 13, 1] = -2.0 * k4 * x * y
    g[..., 13, 2] = 8.0 * k4 * x * z
    g[..., 14, 0], g[..., 14, 1], g[..., 14, 2] = 2.0 * k5 * x * z, -2.0 * k5 * y * z, k5 * (xx - yy)
    g[..., 15, 0], g[..., 15, 1] = k6 * (3.0 * xx - 3.0 * yy), -6.0 * k6 * x * y
    return g


def eval_sh_basis(direction, degree: int) -> np.ndarray:
    """Basis values for one unit direction, ordered l = 0..degree, m = -l..l."""
    _check_degree(degree)
    d = _check_unit(direction)
    return sh_basis(d, degree)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


def _vec3(v, what: str) -> np.ndarray:
    arr = np.array(v, dtype=np.float64)
    if arr.shape != (3,):
        raise ContractError(f"{what} must be a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class SHCoeffs:
    """SH coefficients, one row per basis function and one column per channel."""

    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        _check_degree(self.degree)
        c = np.array(self.coeffs, dtype=np.float64)
        if c.shape != (num_sh_coeffs(self.degree), 3):
            raise ContractError(
                f"degree-{self.degree} SH needs shape {(num_sh_coeffs(self.degree), 3)}, got {c.shape}"
            )
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, degree: int) -> "SHCoeffs":
        return cls(degree, np.zeros((num_sh_coeffs(degree), 3)))

    def truncated(self, degree: int) -> "SHCoeffs":
        if degree > self.degree:
            raise ContractError(f"cannot truncate degree {self.degree} SH to degree {degree}")
        return SHCoeffs(degree, self.coeffs[: num_sh_coeffs(degree)])

    @property
    def size(self) -> int:
        return self.coeffs.size


@dataclass(frozen=True, eq=False)
class SGLobe:
    alpha: np.ndarray
    lam: float
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _vec3(self.alpha, "alpha"))
        object.__setattr__(self, "mu", _check_unit(_vec3(self.mu, "mu"), "mu"))
        if not self.lam >= 0.0:
            raise ContractError(f"sharpness must be non-negative, got {self.lam}")
        object.__setattr__(self, "lam", float(self.lam))


def check_orthonormal(axes, tol: float = ORTHO_TOL) -> np.ndarray:
    a = np.array(axes, dtype=np.float64)
    if a.shape != (3, 3):
        raise OrthogonalityError(f"axis triple must be 3x3, got shape {a.shape}")
    err = np.max(np.abs(a @ a.T - np.eye(3)))
    if not err <= tol:
        raise OrthogonalityError(f"axes are not orthonormal (max deviation {err:.3g} > {tol:g})")
    return a


@dataclass(frozen=True, eq=False)
class OrthoSGSet:
    """Three lobes on the rows of a shared orthonormal axis matrix."""

    alpha: np.ndarray  # (3 lobes, 3 channels)
    lam: np.ndarray  # (3,)
    axes: np.ndarray = field(default_factory=lambda: DEFAULT_AXES.copy())

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        lam = np.array(self.lam, dtype=np.float64)
        if alpha.shape != (3, 3) or lam.shape != (3,):
            raise ContractError("OrthoSGSet needs alpha of shape (3, 3) and lam of shape (3,)")
        if np.any(~(lam >= 0.0)):
            raise ContractError(f"sharpness must be non-negative, got {lam}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "axes", check_orthonormal(self.axes))

    @property
    def lobes(self) -> tuple[SGLobe, SGLobe, SGLobe]:
        return tuple(SGLobe(self.alpha[i], self.lam[i], self.axes[i]) for i in range(3))

    @classmethod
    def zeros(cls, axes=None, lam: float = 1.0) -> "OrthoSGSet":
        return cls(np.zeros((3, 3)), np.full(3, lam), DEFAULT_AXES if axes is None else axes)


@dataclass(frozen=True, eq=False)
class SHOnly:
    sh: SHCoeffs
    kind = ModelKind.SH


@dataclass(frozen=True, eq=False)
class DiffuseSG:
    diffuse: np.ndarray
    lobe: SGLobe
    kind = ModelKind.SG1

    def __post_init__(self):
        object.__setattr__(self, "diffuse", _vec3(self.diffuse, "diffuse"))


@dataclass(frozen=True, eq=False)
class DiffuseOrthoSG:
    diffuse: np.ndarray
    sgs: OrthoSGSet
    kind = ModelKind.SG3

    def __post_init__(self):
        object.__setattr__(self, "diffuse", _vec3(self.diffuse, "diffuse"))


@dataclass(frozen=True, eq=False)
class MixedSHSG:
    sh: SHCoeffs
    sgs: OrthoSGSet
    kind = ModelKind.MIXED

    def __post_init__(self):
        if self.sh.degree > MIXED_SH_DEGREE:
            raise UnsupportedDegreeError(
                f"mixed model SH degree must be <= {MIXED_SH_DEGREE}, got {self.sh.degree}"
            )


ColorModel = Union[SHOnly, DiffuseSG, DiffuseOrthoSG, MixedSHSG]


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def param_count(model: ColorModel) -> int:
    """Per-Gaussian stored reals of the color model; scene-shared axes excluded."""
    if isinstance(model, SHOnly):
        return 3 * num_sh_coeffs(model.sh.degree)
    if isinstance(model, DiffuseSG):
        return 3 + 3 + 1 + 3
    if isinstance(model, DiffuseOrthoSG):
        return 3 + 3 * (3 + 1)
    if isinstance(model, MixedSHSG):
        return 3 * num_sh_coeffs(model.sh.degree) + 3 * (3 + 1)
    raise TypeError(f"not a color model: {model!r}")


def shared_param_count(model: ColorModel) -> int:
    """Scene-global reals: an orthonormal axis triple has 3 rotational degrees of freedom."""
    return 3 if isinstance(model, (DiffuseOrthoSG, MixedSHSG)) else 0


def kind_param_count(kind: ModelKind | str, sh_degree: int = MAX_SH_DEGREE) -> int:
    kind = ModelKind(kind)
    if kind is ModelKind.SH:
        return 3 * num_sh_coeffs(sh_degree)
    if kind is ModelKind.SG1:
        return 10
    if kind is ModelKind.SG3:
        return 15
    return 3 * num_sh_coeffs(min(sh_degree, MIXED_SH_DEGREE)) + 12


# Arithmetic ops to evaluate each SH band's basis polynomials, counting one op per
# mul/add and reusing shared products (xx, yy, zz are computed once with band 2).
_SH_BAND_OPS = (0, 3, 6 + 9, 28)


def color_flops(kind: ModelKind | str, sh_degree: int = MAX_SH_DEGREE) -> int:
    """Static op count (mul-adds + transcendentals) for one color evaluation."""
    kind = ModelKind(kind)
    clamp = 3
    lobe = 3 + 1 + 1 + 3  # dot product, exponent argument, exp, per-channel mul-add
    if kind is ModelKind.SH:
        return sum(_SH_BAND_OPS[: sh_degree + 1]) + 3 * num_sh_coeffs(sh_degree) + 3 + clamp
    if kind is ModelKind.SG1:
        return lobe + clamp
    if kind is ModelKind.SG3:
        return 3 * lobe + clamp
    deg = min(sh_degree, MIXED_SH_DEGREE)
    return sum(_SH_BAND_OPS[: deg + 1]) + 3 * num_sh_coeffs(deg) + 3 + 3 * lobe + clamp


# ---------------------------------------------------------------------------
# Batched evaluation and gradients
# ---------------------------------------------------------------------------
#
# Parameter dictionaries hold per-Gaussian arrays with a leading axis N:
#   "sh"        (N, K, 3)   sh, mixed
#   "diffuse"   (N, 3)      sg1, sg3
#   "sg_alpha"  (N, L, 3)   sg1 (L=1), sg3, mixed (L=3)
#   "sg_lambda" (N, L)      activated sharpness
#   "sg_mu"     (N, 3)      sg1 only; normalized internally
# Lobe axes for sg3/mixed are passed separately as (3, 3) or (N, 3, 3).


@dataclass
class ColorEval:
    colors: np.ndarray  # clamped (N, 3)
    raw: np.ndarray  # before the >= 0 clamp
    basis: Optional[np.ndarray] = None  # masked SH basis (N, K)
    mask: Optional[np.ndarray] = None  # 1 where the SH term is within the evaluated degree
    mu: Optional[np.ndarray] = None  # unit lobe axes (N, L, 3)
    cos: Optional[np.ndarray] = None  # d . mu (N, L)
    weight: Optional[np.ndarray] = None  # exp(lambda (cos - 1)) (N, L)
    mu_norm: Optional[np.ndarray] = None  # |sg_mu| before normalization (sg1)


def _lobe_axes(kind: ModelKind, params: dict, axes, n: int):
    if kind is ModelKind.SG1:
        mu = np.asarray(params["sg_mu"], dtype=np.float64)
        norm = np.linalg.norm(mu, axis=-1)
        return (mu / norm[:, None])[:, None, :], norm
    ax = DEFAULT_AXES if axes is None else np.asarray(axes, dtype=np.float64)
    if ax.ndim == 2:
        ax = np.broadcast_to(ax, (n, 3, 3))
    return ax, None


def _degree_mask(k: int, degrees, n: int) -> Optional[np.ndarray]:
    if degrees is None:
        return None
    counts = (np.asarray(degrees) + 1) ** 2
    counts = np.broadcast_to(counts, (n,))
    return (np.arange(k)[None, :] < counts[:, None]).astype(np.float64)


def evaluate(kind, params: dict, dirs: np.ndarray, *, axes=None, degrees=None) -> ColorEval:
    """Colors of N Gaussians seen along unit directions ``dirs`` (N, 3).

    ``degrees`` (scalar or (N,)) truncates the SH part per Gaussian; ``None``
    uses every stored coefficient.
    """
    kind = ModelKind(kind)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    raw = np.zeros((n, 3))
    out = ColorEval(colors=raw, raw=raw)

    if kind in (ModelKind.SH, ModelKind.MIXED):
        sh = np.asarray(params["sh"], dtype=np.float64)
        k = sh.shape[1]
        degree = int(round(np.sqrt(k))) - 1
        basis = sh_basis(dirs, degree)
        mask = _degree_mask(k, degrees, n)
        if mask is not None:
            basis = basis * mask
        raw = np.einsum("nk,nkc->nc", basis, sh) + SH_OFFSET
        out.basis, out.mask = basis, mask
    else:
        raw = np.array(params["diffuse"], dtype=np.float64, copy=True)

    if kind is not ModelKind.SH:
        alpha = np.asarray(params["sg_alpha"], dtype=np.float64)
        lam = np.asarray(params["sg_lambda"], dtype=np.float64)
        mu, mu_norm = _lobe_axes(kind, params, axes, n)
        cos = np.einsum("nlk,nk->nl", mu, dirs)
        weight = np.exp(lam * (cos - 1.0))
        raw = raw + np.einsum("nl,nlc->nc", weight, alpha)
        out.mu, out.cos, out.weight, out.mu_norm = mu, cos, weight, mu_norm

    out.raw = raw
    out.colors = np.maximum(raw, 0.0)
    return out


def gradients(kind, params: dict, dirs: np.ndarray, upstream: np.ndarray, ev: ColorEval, *, with_dirs=True):
    """Backpropagate ``upstream`` (N, 3) through :func:`evaluate`.

    Returns ``(param_grads, d_dirs)``; ``param_grads`` mirrors ``params`` with
    ``sg_lambda`` differentiated w.r.t. the activated sharpness and ``sg_mu``
    w.r.t. the raw (unnormalized) stored axis.
    """
    kind = ModelKind(kind)
    dirs = np.asarray(dirs, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64) * (ev.raw >= 0.0)
    grads: dict[str, np.ndarray] = {}
    d_dirs = np.zeros_like(dirs) if with_dirs else None

    if kind in (ModelKind.SH, ModelKind.MIXED):
        sh = np.asarray(params["sh"], dtype=np.float64)
        grads["sh"] = ev.basis[:, :, None] * g[:, None, :]
        if with_dirs:
            degree = int(round(np.sqrt(sh.shape[1]))) - 1
            coef = np.einsum("nkc,nc->nk", sh, g)
            if ev.mask is not None:
                coef = coef * ev.mask
            d_dirs += np.einsum("nk,nkj->nj", coef, sh_basis_grad(dirs, degree))
    else:
        grads["diffuse"] = g.copy()

    if kind is not ModelKind.SH:
        alpha = np.asarray(params["sg_alpha"], dtype=np.float64)
        lam = np.asarray(params["sg_lambda"], dtype=np.float64)
        ga = np.einsum("nlc,nc->nl", alpha, g) * ev.weight
        grads["sg_alpha"] = ev.weight[:, :, None] * g[:, None, :]
        grads["sg_lambda"] = ga * (ev.cos - 1.0)
        dcos = ga * lam
        if with_dirs:
            d_dirs += np.einsum("nl,nlk->nk", dcos, ev.mu)
        if kind is ModelKind.SG1:
            mu_hat = ev.mu[:, 0, :]
            d_mu_hat = dcos[:, :1] * dirs
            radial = np.sum(d_mu_hat * mu_hat, axis=-1, keepdims=True)
            grads["sg_mu"] = (d_mu_hat - radial * mu_hat) / ev.mu_norm[:, None]
    return grads, d_dirs


# ---------------------------------------------------------------------------
# Single-model API
# ---------------------------------------------------------------------------


def model_params(model: ColorModel) -> dict[str, np.ndarray]:
    """Free parameters of one model keyed like :func:`grad_color`'s result."""
    if isinstance(model, SHOnly):
        return {"sh": model.sh.coeffs.copy()}
    if isinstance(model, DiffuseSG):
        return {
            "diffuse": model.diffuse.copy(),
            "alpha": model.lobe.alpha.copy(),
            "lambda": np.array(model.lobe.lam),
            "mu": model.lobe.mu.copy(),
        }
    if isinstance(model, DiffuseOrthoSG):
        return {"diffuse": model.diffuse.copy(), "alpha": model.sgs.alpha.copy(), "lambda": model.sgs.lam.copy()}
    if isinstance(model, MixedSHSG):
        return {"sh": model.sh.coeffs.copy(), "alpha": model.sgs.alpha.copy(), "lambda": model.sgs.lam.copy()}
    raise TypeError(f"not a color model: {model!r}")


def with_params(model: ColorModel, params: dict) -> ColorModel:
    """A copy of ``model`` with parameters replaced; ``mu`` is used as given (not validated)."""
    if isinstance(model, SHOnly):
        return SHOnly(SHCoeffs(model.sh.degree, params["sh"]))
    if isinstance(model, DiffuseSG):
        lobe = object.__new__(SGLobe)
        object.__setattr__(lobe, "alpha", np.asarray(params["alpha"], dtype=np.float64))
        object.__setattr__(lobe, "lam", float(params["lambda"]))
        object.__setattr__(lobe, "mu", np.asarray(params["mu"], dtype=np.float64))
        return DiffuseSG(params["diffuse"], lobe)
    if isinstance(model, DiffuseOrthoSG):
        return DiffuseOrthoSG(params["diffuse"], OrthoSGSet(params["alpha"], params["lambda"], model.sgs.axes))
    if isinstance(model, MixedSHSG):
        sgs = OrthoSGSet(params["alpha"], params["lambda"], model.sgs.axes)
        return MixedSHSG(SHCoeffs(model.sh.degree, params["sh"]), sgs)
    raise TypeError(f"not a color model: {model!r}")


def _as_batch(model: ColorModel):
    if isinstance(model, SHOnly):
        return {"sh": model.sh.coeffs[None]}, None
    if isinstance(model, DiffuseSG):
        p = {
            "diffuse": model.diffuse[None],
            "sg_alpha": model.lobe.alpha[None, None],
            "sg_lambda": np.array([[model.lobe.lam]]),
            "sg_mu": model.lobe.mu[None],
        }
        return p, None
    if isinstance(model, DiffuseOrthoSG):
        p = {"diffuse": model.diffuse[None], "sg_alpha": model.sgs.alpha[None], "sg_lambda": model.sgs.lam[None]}
        return p, model.sgs.axes
    if isinstance(model, MixedSHSG):
        p = {"sh": model.sh.coeffs[None], "sg_alpha": model.sgs.alpha[None], "sg_lambda": model.sgs.lam[None]}
        return p, model.sgs.axes
    raise TypeError(f"not a color model: {model!r}")


def _override_degree(model: ColorModel, sh_degree_override: Optional[int]) -> Optional[int]:
    if sh_degree_override is None:
        return None
    if not isinstance(model, MixedSHSG):
        raise ContractError("sh_degree_override applies only to the mixed SH+SG model")
    if sh_degree_override < 0 or sh_degree_override > model.sh.degree:
        raise ContractError(
            f"override degree {sh_degree_override} exceeds stored degree {model.sh.degree}"
        )
    return int(sh_degree_override)


def eval_sg(lobe: SGLobe, direction) -> np.ndarray:
    d = _check_unit(direction)
    return lobe.alpha * np.exp(lobe.lam * (float(d @ lobe.mu) - 1.0))


def eval_color(model: ColorModel, direction, sh_degree_override: Optional[int] = None) -> np.ndarray:
    """Linear RGB of one model along a unit direction, clamped at zero."""
    d = _check_unit(direction)
    degree = _override_degree(model, sh_degree_override)
    params, axes = _as_batch(model)
    return evaluate(model.kind, params, d[None], axes=axes, degrees=degree).colors[0]


def grad_color(model: ColorModel, direction, upstream, sh_degree_override: Optional[int] = None) -> dict:
    """Gradient of ``upstream . eval_color(model, direction)`` w.r.t. the model's free parameters."""
    d = _check_unit(direction)
    degree = _override_degree(model, sh_degree_override)
    params, axes = _as_batch(model)
    up = np.asarray(upstream, dtype=np.float64).reshape(1, 3)
    ev = evaluate(model.kind, params, d[None], axes=axes, degrees=degree)
    grads, _ = gradients(model.kind, params, d[None], up, ev, with_dirs=False)
    out = {}
    if "sh" in grads:
        out["sh"] = grads["sh"][0]
    if "diffuse" in grads:
        out["diffuse"] = grads["diffuse"][0]
    if "sg_alpha" in grads:
        if isinstance(model, DiffuseSG):
            out["alpha"] = grads["sg_alpha"][0, 0]
            out["lambda"] = np.array(grads["sg_lambda"][0, 0])
            out["mu"] = grads["sg_mu"][0]
        else:
            out["alpha"] = grads["sg_alpha"][0]
            out["lambda"] = grads["sg_lambda"][0]
    return out
