"""Distill SH color into spherical-Gaussian color models, one Gaussian at a time.

The fit samples the SH-decoded color on a Fibonacci lattice and alternates a
closed-form linear solve for the linear coefficients (diffuse, amplitudes, SH
bands) with bounded 1D searches over each sharpness. A sweep is kept only if
the RMSE on a second, disjoint lattice does not go up, so the reported
validation error is non-increasing by construction.

Mixed models are fitted in two stages: the orthogonal-SG model with a DC term
first, then SH bands 1 and 2 on its residual. Truncating the result to degree
0 therefore gives exactly the orthogonal-SG fit, which matters because the
renderer drops the higher bands for small splats.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.spatial.transform import Rotation

from . import color_model as cm
from .color_model import ModelKind
from .errors import ContractError
from .ply import bytes_per_gaussian, file_size, load_ply, save_ply
from .raster import Camera, RenderConfig, render
from .scene import Scene, _log_sharpness

LAMBDA_BOUNDS = (0.0, 50.0)
LAMBDA_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
RIDGE = 1e-8
AMPLITUDE_PENALTY = 1e-5
COND_LIMIT = 1e10
MIN_SAMPLES = 64
DEFAULT_SAMPLES = 256
DEFAULT_VALIDATION = 199
DEFAULT_ITERS = 4
TARGETS = (ModelKind.SG1, ModelKind.SG3, ModelKind.MIXED)


class FitWarning(UserWarning):
    pass


def fibonacci_sphere(n: int, seed: Optional[int] = None) -> np.ndarray:
    """``n`` quasi-uniform unit vectors; a seed applies a reproducible random rotation."""
    if n < 1:
        raise ContractError("need at least one direction")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if seed is not None:
        dirs = dirs @ Rotation.random(random_state=seed).as_matrix().T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def sample_sets(n: int = DEFAULT_SAMPLES, n_val: int = DEFAULT_VALIDATION, seed: int = 0):
    """Training and validation lattices (different sizes and rotations, so disjoint)."""
    return fibonacci_sphere(n, seed), fibonacci_sphere(n_val, seed + 1)


def sh_radiance(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Unclamped SH color ``sum_k c_k Y_k(d) + 0.5`` for coefficients (K, 3)."""
    degree = int(round(np.sqrt(len(sh)))) - 1
    return cm.sh_basis(dirs, degree) @ sh + cm.SH_OFFSET


# ---------------------------------------------------------------------------
# linear pieces
# ---------------------------------------------------------------------------


class _Solver:
    """Penalized least squares with a ridge fallback for ill-conditioned normal equations.

    The last ``n_lobes`` columns (SG amplitudes) carry a small Tikhonov
    penalty. Without it a lobe with sharpness near zero can mimic a linear
    function of the direction with huge, mutually cancelling amplitude and
    diffuse values, which float32 storage cannot represent faithfully.
    """

    def __init__(self, n_samples: int, n_lobes: int):
        self.ridged = False
        self.rho = AMPLITUDE_PENALTY * n_samples
        self.n_lobes = n_lobes

    def _penalty(self, ncols: int) -> np.ndarray:
        p = np.zeros(ncols)
        p[ncols - self.n_lobes:] = self.rho
        return p

    def solve(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        g = x.T @ x + np.diag(self._penalty(x.shape[1]))
        b = x.T @ t
        if not np.isfinite(g).all() or np.linalg.cond(g) > COND_LIMIT:
            self.ridged = True
            g = g + RIDGE * np.eye(len(g))
        return np.linalg.solve(g, b)

    def sse(self, x: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
        """Penalized objective at the optimal linear coefficients."""
        coef = self.solve(x, t)
        r = t - x @ coef
        p = self._penalty(x.shape[1])
        return float(np.sum(r * r) + np.sum(p[:, None] * coef * coef)), coef


def _rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def _lobes(dirs: np.ndarray, axes: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """(S, L) lobe values with unit amplitude; ``axes`` is (L, 3)."""
    return np.exp(lam[None, :] * (dirs @ axes.T - 1.0))


@dataclass
class FitResult:
    model: object
    rmse: float
    train_rmse: float
    history: list[float] = field(default_factory=list)
    ridged: bool = False


# ---------------------------------------------------------------------------
# per-kind fits on sampled targets
# ---------------------------------------------------------------------------


def _fit_ortho(dirs, target, vdirs, vtarget, axes, iters, solver, const_cols=None, vconst_cols=None):
    """Orthogonal-SG fit. ``const_cols`` replaces the constant column (used for SH DC)."""
    c = np.ones((len(dirs), 1)) if const_cols is None else const_cols
    vc = np.ones((len(vdirs), 1)) if vconst_cols is None else vconst_cols

    def design(d, cc, lam):
        return np.hstack([cc, _lobes(d, axes, lam)])

    def sse(lam):
        return solver.sse(design(dirs, c, lam), target)[0]

    def val_rmse(lam):
        coef = solver.solve(design(dirs, c, lam), target)
        return _rmse(design(vdirs, vc, lam) @ coef, vtarget)

    grid = [sse(np.full(3, g)) for g in LAMBDA_GRID]
    lam = np.full(3, LAMBDA_GRID[int(np.argmin(grid))])
    best = min(grid)
    history = [val_rmse(lam)]
    for _ in range(iters):
        trial = lam.copy()
        trial_sse = best
        for i in range(3):
            def f(x, i=i):
                probe = trial.copy()
                probe[i] = x
                return sse(probe)

            res = minimize_scalar(f, bounds=LAMBDA_BOUNDS, method="bounded", options={"xatol": 1e-5})
            if res.fun < trial_sse:
                trial[i] = res.x
                trial_sse = res.fun
        v = val_rmse(trial)
        if v > history[-1] or trial_sse >= best:
            break
        lam, best = trial, trial_sse
        history.append(v)
    coef = solver.solve(design(dirs, c, lam), target)
    return lam, coef, history


def _tangent_basis(mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([1.0, 0.0, 0.0]) if abs(mu[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(mu, a)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(mu, t1)


def _fit_single(dirs, target, vdirs, vtarget, iters, solver):
    ones = np.ones((len(dirs), 1))
    vones = np.ones((len(vdirs), 1))

    def design(d, o, lam, mu):
        return np.hstack([o, np.exp(lam * (d @ mu - 1.0))[:, None]])

    def sse(lam, mu):
        return solver.sse(design(dirs, ones, lam, mu), target)[0]

    def val_rmse(lam, mu):
        coef = solver.solve(design(dirs, ones, lam, mu), target)
        return _rmse(design(vdirs, vones, lam, mu) @ coef, vtarget)

    # coarse search: every sample direction as an axis, a grid of sharpness values
    cand_mu = dirs
    lam_grid = np.asarray(LAMBDA_GRID)
    w = np.exp(lam_grid[:, None, None] * (cand_mu @ dirs.T - 1.0)[None])  # (G, C, S)
    s = len(dirs)
    sw = w.sum(-1)
    sww = (w * w).sum(-1)
    st = target.sum(0)
    swt = w @ target  # (G, C, 3)
    det = s * sww - sw * sw
    det = np.where(np.abs(det) < 1e-12, np.inf, det)
    # explained sum of squares of the two-column regression, per channel
    expl = (sww[..., None] * st * st - 2.0 * sw[..., None] * st * swt + s * swt * swt) / det[..., None]
    gi, ci = np.unravel_index(int(np.argmax(expl.sum(-1))), sw.shape)
    lam, mu = float(lam_grid[gi]), cand_mu[ci].copy()
    best = sse(lam, mu)
    history = [val_rmse(lam, mu)]

    for _ in range(iters):
        t_lam, t_mu, t_sse = lam, mu, best
        res = minimize_scalar(lambda x: sse(x, t_mu), bounds=LAMBDA_BOUNDS, method="bounded", options={"xatol": 1e-6})
        if res.fun < t_sse:
            t_lam, t_sse = float(res.x), float(res.fun)
        t1, t2 = _tangent_basis(t_mu)

        def along(uv, base=t_mu, t1=t1, t2=t2, lam=t_lam):
            m = base + uv[0] * t1 + uv[1] * t2
            return sse(lam, m / np.linalg.norm(m))

        res = minimize(along, np.zeros(2), method="Nelder-Mead",
                       options={"xatol": 1e-9, "fatol": 1e-14, "initial_simplex": [[0, 0], [0.05, 0], [0, 0.05]]})
        if res.fun < t_sse:
            m = t_mu + res.x[0] * t1 + res.x[1] * t2
            t_mu, t_sse = m / np.linalg.norm(m), float(res.fun)
        v = val_rmse(t_lam, t_mu)
        if v > history[-1] or t_sse >= best:
            break
        lam, mu, best = t_lam, t_mu, t_sse
        history.append(v)
    coef = solver.solve(design(dirs, ones, lam, mu), target)
    return lam, mu, coef, history


def fit_color(
    target: np.ndarray,
    dirs: np.ndarray,
    kind,
    *,
    val_target: np.ndarray,
    val_dirs: np.ndarray,
    iters: int = DEFAULT_ITERS,
    axes=None,
) -> FitResult:
    """Fit a ``kind`` color model to sampled colors ``target`` (S, 3) at ``dirs`` (S, 3)."""
    kind = ModelKind(kind)
    if len(dirs) < MIN_SAMPLES:
        raise ContractError(f"need at least {MIN_SAMPLES} sample directions, got {len(dirs)}")
    if iters < 0:
        raise ContractError("iters must be non-negative")
    axes = cm.DEFAULT_AXES if axes is None else cm.check_orthonormal(axes)
    solver = _Solver(len(dirs), 1 if kind is ModelKind.SG1 else 3)
    if kind is ModelKind.SG1:
        lam, mu, coef, history = _fit_single(dirs, target, val_dirs, val_target, iters, solver)
        model = cm.DiffuseSG(coef[0], cm.SGLobe(coef[1], lam, mu))
    elif kind is ModelKind.SG3:
        lam, coef, history = _fit_ortho(dirs, target, val_dirs, val_target, axes, iters, solver)
        model = cm.DiffuseOrthoSG(coef[0], cm.OrthoSGSet(coef[1:4], lam, axes))
    elif kind is ModelKind.MIXED:
        # DC basis value is constant, so the constant column is the scaled DC coefficient
        dc = np.full((len(dirs), 1), cm.SH_C0)
        vdc = np.full((len(val_dirs), 1), cm.SH_C0)
        shifted, vshifted = target - cm.SH_OFFSET, val_target - cm.SH_OFFSET
        lam, coef, history = _fit_ortho(dirs, shifted, val_dirs, vshifted, axes, iters, solver, dc, vdc)
        sh = np.zeros((9, 3))
        sh[0] = coef[0]
        base = cm.DiffuseOrthoSG(np.zeros(3), cm.OrthoSGSet(coef[1:4], lam, axes))
        stage1 = np.hstack([dc, _lobes(dirs, axes, lam)]) @ coef
        vstage1 = np.hstack([vdc, _lobes(val_dirs, axes, lam)]) @ coef
        y = cm.sh_basis(dirs, 2)[:, 1:]
        bands = np.linalg.lstsq(y, shifted - stage1, rcond=None)[0]
        v = _rmse(vstage1 + cm.sh_basis(val_dirs, 2)[:, 1:] @ bands, vshifted)
        if v <= history[-1]:
            sh[1:] = bands
            history.append(v)
        model = cm.MixedSHSG(cm.SHCoeffs(2, sh), base.sgs)
    else:
        raise ContractError(f"cannot fit target model {kind.value!r}")
    train_rmse = _rmse(_raw(model, dirs), target)
    if solver.ridged:
        warnings.warn("ill-conditioned normal equations; used ridge regularization", FitWarning, stacklevel=2)
    return FitResult(model, history[-1], train_rmse, history, solver.ridged)


def _raw(model, dirs: np.ndarray) -> np.ndarray:
    params, axes = cm._as_batch(model)
    n = len(dirs)
    batch = {k: np.broadcast_to(v, (n,) + v.shape[1:]) for k, v in params.items()}
    return cm.evaluate(model.kind, batch, dirs, axes=axes).raw


def fit_sg_to_sh(
    sh,
    target_model,
    samples: Optional[np.ndarray] = None,
    iters: int = DEFAULT_ITERS,
    *,
    validation: Optional[np.ndarray] = None,
    seed: int = 0,
    axes=None,
) -> tuple[object, float]:
    """Fit an SG-based color model to SH color; returns ``(model, validation RMSE)``."""
    return fit_sg_to_sh_full(sh, target_model, samples, iters, validation=validation, seed=seed, axes=axes)[:2]


def fit_sg_to_sh_full(sh, target_model, samples=None, iters=DEFAULT_ITERS, *, validation=None, seed=0, axes=None):
    coeffs = sh.coeffs if isinstance(sh, cm.SHCoeffs) else np.asarray(sh, dtype=np.float64)
    if samples is None or validation is None:
        s, v = sample_sets(seed=seed)
        samples = s if samples is None else samples
        validation = v if validation is None else validation
    samples = np.asarray(samples, dtype=np.float64)
    validation = np.asarray(validation, dtype=np.float64)
    res = fit_color(
        sh_radiance(coeffs, samples), samples, target_model,
        val_target=sh_radiance(coeffs, validation), val_dirs=validation, iters=iters, axes=axes,
    )
    return res.model, res.rmse, res


def fit_sh(target: np.ndarray, dirs: np.ndarray, degree: int) -> cm.SHCoeffs:
    """Least-squares SH fit (with the 0.5 offset) to sampled colors."""
    coeffs, *_ = np.linalg.lstsq(cm.sh_basis(dirs, degree), target - cm.SH_OFFSET, rcond=None)
    return cm.SHCoeffs(degree, coeffs)


# ---------------------------------------------------------------------------
# whole scenes
# ---------------------------------------------------------------------------


def _fit_chunk(args):
    sh_block, kind, samples, validation, iters = args
    out = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FitWarning)
        for coeffs in sh_block:
            res = fit_color(
                sh_radiance(coeffs, samples), samples, kind,
                val_target=sh_radiance(coeffs, validation), val_dirs=validation, iters=iters,
            )
            out.append(({k: v[0] for k, v in cm._as_batch(res.model)[0].items()}, res.rmse))
    return out, len(caught)


def convert_scene(
    scene: Scene,
    target_model,
    *,
    samples: int = DEFAULT_SAMPLES,
    iters: int = DEFAULT_ITERS,
    seed: int = 0,
    workers: int = 1,
) -> tuple[Scene, np.ndarray]:
    """Replace every Gaussian's SH color by a fitted ``target_model``; returns (scene, per-Gaussian RMSE)."""
    kind = ModelKind(target_model)
    if kind not in TARGETS:
        raise ContractError(f"conversion target must be one of {[k.value for k in TARGETS]}")
    if scene.kind is not ModelKind.SH:
        raise ContractError("conversion input must be an SH scene")
    dirs, vdirs = sample_sets(samples, seed=seed)
    n = len(scene)
    jobs = [(block, kind, dirs, vdirs, iters) for block in np.array_split(scene.sh, max(1, min(n, workers * 4)))]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_fit_chunk, jobs))
    else:
        parts = [_fit_chunk(j) for j in jobs]
    fitted = [p for part, _ in parts for p in part]
    n_ridged = sum(c for _, c in parts)
    if n_ridged:
        warnings.warn(f"{n_ridged} fits used ridge regularization", FitWarning, stacklevel=2)
    rmse = np.array([r for _, r in fitted])
    params = [p for p, _ in fitted]

    kw = dict(
        kind=kind, means=scene.means.copy(), quats=scene.quats.copy(), log_scales=scene.log_scales.copy(),
        opacity_logits=scene.opacity_logits.copy(), background=scene.background.copy(),
    )
    stack = lambda key: np.array([p[key] for p in params]).reshape((n,) + np.shape(params[0][key])) if n else None
    lobes = 1 if kind is ModelKind.SG1 else 3
    if n == 0:
        out = Scene.empty(kind, background=scene.background)
        return out, rmse
    kw["sg_alpha"] = stack("sg_alpha").reshape(n, lobes, 3)
    kw["sg_log_lambda"] = _log_sharpness(stack("sg_lambda").reshape(n, lobes))
    if kind is ModelKind.SG1:
        kw["diffuse"] = stack("diffuse")
        kw["sg_mu"] = stack("sg_mu").reshape(n, 3)
    elif kind is ModelKind.SG3:
        kw["diffuse"] = stack("diffuse")
    else:
        kw["sh"] = stack("sh")
    return Scene(**kw), rmse


def truncate_sh(scene: Scene, degree: int) -> Scene:
    """Drop SH bands above ``degree`` (the best fit of that degree for an orthonormal basis)."""
    if scene.kind is not ModelKind.SH:
        raise ContractError("truncation needs an SH scene")
    return scene.with_params(sh=scene.sh[:, : cm.num_sh_coeffs(degree)].copy())


def _histogram(rmse: np.ndarray, bins: int = 20):
    if len(rmse) == 0:
        return np.zeros(bins + 1), np.zeros(bins, dtype=int)
    hi = float(rmse.max())
    counts, edges = np.histogram(rmse, bins=bins, range=(0.0, hi if hi > 0 else 1.0))
    return edges, counts


def report_paths(report_path) -> tuple[Path, Path, Path]:
    """JSON summary, histogram CSV and per-Gaussian CSV derived from ``report_path``."""
    p = Path(report_path)
    stem = p.with_suffix("") if p.suffix.lower() in (".json", ".csv") else p
    return stem.with_suffix(".json"), Path(f"{stem}_hist.csv"), Path(f"{stem}_rmse.csv")


def convert_checkpoint(
    in_path,
    out_path,
    target_model,
    report_path=None,
    *,
    samples: int = DEFAULT_SAMPLES,
    iters: int = DEFAULT_ITERS,
    seed: int = 0,
    workers: int = 1,
    held_out_camera: Optional[Camera] = None,
    render_cfg: Optional[RenderConfig] = None,
) -> dict:
    """Convert an SH checkpoint, write the SG checkpoint and a report, return the summary."""
    scene = load_ply(in_path)
    kind = ModelKind(target_model)
    converted, rmse = convert_scene(scene, kind, samples=samples, iters=iters, seed=seed, workers=workers)
    save_ply(converted, out_path)
    n = len(scene)
    in_payload = n * bytes_per_gaussian(scene.kind)
    out_payload = n * bytes_per_gaussian(kind)
    ratio = out_payload / in_payload if in_payload else float("nan")
    edges, counts = _histogram(rmse)
    summary = {
        "input": str(in_path),
        "output": str(out_path),
        "target_model": kind.value,
        "n_gaussians": n,
        "samples": samples,
        "iters": iters,
        "seed": seed,
        "input_bytes_per_gaussian": bytes_per_gaussian(scene.kind),
        "output_bytes_per_gaussian": bytes_per_gaussian(kind),
        "input_payload_bytes": in_payload,
        "output_payload_bytes": out_payload,
        "byte_ratio": ratio,
        "reduction_percent": 100.0 * (1.0 - ratio) if in_payload else float("nan"),
        "input_file_bytes": file_size(in_path),
        "output_file_bytes": file_size(out_path),
        "file_ratio": file_size(out_path) / file_size(in_path),
        "rmse_mean": float(rmse.mean()) if n else 0.0,
        "rmse_median": float(np.median(rmse)) if n else 0.0,
        "rmse_max": float(rmse.max()) if n else 0.0,
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }
    if held_out_camera is not None:
        from .metrics import psnr

        ref = np.clip(render(scene, held_out_camera, render_cfg).image, 0.0, 1.0)
        out = np.clip(render(converted, held_out_camera, render_cfg).image, 0.0, 1.0)
        summary["held_out_psnr"] = psnr(out, ref)
    if report_path is not None:
        write_report(summary, rmse, report_path)
    return summary


def write_report(summary: dict, rmse: np.ndarray, report_path) -> None:
    json_path, hist_path, per_path = report_paths(report_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(summary, indent=2) + "\n")
    edges, counts = summary["histogram"]["edges"], summary["histogram"]["counts"]
    with open(hist_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rmse_low", "rmse_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    with open(per_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gaussian", "rmse"])
        for i, r in enumerate(rmse):
            w.writerow([i, repr(float(r))])
