"""PSNR and SSIM for (H, W, 3) float images in [0, 1]."""

from __future__ import annotations

import numpy as np

from .errors import ContractError

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _check_pair(a, b, check_range: bool = True):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    if check_range:
        for img in (a, b):
            if img.size and (img.min() < -1e-9 or img.max() > 1.0 + 1e-9):
                raise ContractError("image values must lie in [0, 1]")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b, check_range=False)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    err = float(np.mean((a - b) ** 2))
    if err < MSE_FLOOR:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _pad_index(n: int, pad: int) -> np.ndarray:
    return np.pad(np.arange(n), pad, mode="reflect")


def _blur(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable filter over the first two axes with mirror (no edge repeat) padding."""
    pad = len(w) // 2
    h, wd = img.shape[:2]
    rows = img[_pad_index(h, pad)]
    out = sum(w[k] * rows[k : k + h] for k in range(len(w)))
    cols = out[:, _pad_index(wd, pad)]
    return sum(w[k] * cols[:, k : k + wd] for k in range(len(w)))


def _unpad(padded: np.ndarray, n: int, pad: int) -> np.ndarray:
    """Adjoint of mirror padding along axis 0: fold the border back onto its sources."""
    if pad >= n:
        out = np.zeros((n,) + padded.shape[1:])
        np.add.at(out, _pad_index(n, pad), padded)
        return out
    out = padded[pad : pad + n].copy()
    out[1 : pad + 1] += padded[:pad][::-1]
    out[n - 1 - pad : n - 1] += padded[pad + n :][::-1]
    return out


def _blur_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    pad = len(w) // 2
    h, wd = g.shape[:2]
    cols = np.zeros((h, wd + 2 * pad) + g.shape[2:])
    for k in range(len(w)):
        cols[:, k : k + wd] += w[k] * g
    mid = np.swapaxes(_unpad(np.swapaxes(cols, 0, 1), wd, pad), 0, 1)
    rows = np.zeros((h + 2 * pad,) + g.shape[1:])
    for k in range(len(w)):
        rows[k : k + h] += w[k] * mid
    return _unpad(rows, h, pad)


def _ssim_terms(a, b, w):
    mu_a, mu_b = _blur(a, w), _blur(b, w)
    e_aa, e_bb, e_ab = _blur(a * a, w), _blur(b * b, w), _blur(a * b, w)
    s_aa = e_aa - mu_a * mu_a
    s_bb = e_bb - mu_b * mu_b
    s_ab = e_ab - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + C1
    a2 = 2.0 * s_ab + C2
    b1 = mu_a * mu_a + mu_b * mu_b + C1
    b2 = s_aa + s_bb + C2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    a, b = _check_pair(a, b)
    return ssim_unchecked(a, b)


def ssim_unchecked(a, b) -> float:
    w = gaussian_window()
    _, _, a1, a2, b1, b2 = _ssim_terms(a, b, w)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_and_grad(x, y) -> tuple[float, np.ndarray]:
    """Mean SSIM of ``(x, y)`` and its gradient w.r.t. ``x``.

    The expressions are arranged so the gradient is exactly zero when ``x == y``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = gaussian_window()
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y, w)
    den = b1 * b2
    s_map = (a1 * a2) / den
    g = 1.0 / s_map.size
    d_mu = 2.0 * (mu_y * (a2 - a1) - mu_x * s_map * (b2 - b1)) / den
    u = a1 / den
    d_exy = 2.0 * u
    d_exx = -u * (a2 / b2)
    grad = (
        _blur_adjoint(d_mu * g, w)
        + 2.0 * x * _blur_adjoint(d_exx * g, w)
        + y * _blur_adjoint(d_exy * g, w)
    )
    return float(np.mean(s_map)), grad
