"""Exception types shared across the package.

The CLI maps :class:`ContractError` to exit code 2 and I/O or format
problems (:class:`PLYFormatError`, :class:`OSError`) to exit code 1.
"""

from __future__ import annotations


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class UnsupportedDegreeError(ContractError):
    """Spherical-harmonic degree outside the supported 0..3 range."""


class DegenerateRotationError(ContractError):
    """A quaternion with zero norm cannot define a rotation."""


class OrthogonalityError(ContractError):
    """Axis triple is not orthonormal within tolerance."""


class NumericError(ArithmeticError):
    """Non-finite or singular values where finite, well-conditioned ones are required."""


class PLYFormatError(ValueError):
    """The PLY header or body does not match a supported layout."""


class PLYTruncatedError(OSError):
    """The PLY body ended before every declared element was read."""
