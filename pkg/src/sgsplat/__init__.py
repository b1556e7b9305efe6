"""Gaussian splatting with spherical-Gaussian color models.

Renderer, analytic gradients, trainer and an SH-to-SG checkpoint converter,
all on the CPU with numpy and numba.
"""

from __future__ import annotations

from .color_model import (
    DiffuseOrthoSG,
    DiffuseSG,
    MixedSHSG,
    ModelKind,
    OrthoSGSet,
    SGLobe,
    SHCoeffs,
    SHOnly,
    eval_color,
    grad_color,
    param_count,
)
from .errors import ContractError, NumericError, PLYFormatError, PLYTruncatedError
from .raster import Camera, RenderConfig, render
from .scene import GaussianPrimitive, Scene

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ContractError",
    "DiffuseOrthoSG",
    "DiffuseSG",
    "GaussianPrimitive",
    "MixedSHSG",
    "ModelKind",
    "NumericError",
    "OrthoSGSet",
    "PLYFormatError",
    "PLYTruncatedError",
    "RenderConfig",
    "SGLobe",
    "SHCoeffs",
    "SHOnly",
    "Scene",
    "eval_color",
    "grad_color",
    "param_count",
    "render",
]
