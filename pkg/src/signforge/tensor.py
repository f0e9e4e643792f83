"""Dense tensor substrate: float32 NCHW arrays plus shape/validity helpers.

Tensors are plain numpy arrays. Activations are laid out N x C x H x W,
convolution weights Cout x Cin x Kh x Kw, depthwise weights C x 1 x Kh x Kw.
Production dtype is float32; the kernels are dtype-generic so gradient-check
harnesses can rerun them in float64.
"""
from __future__ import annotations

import os

import numpy as np

Tensor = np.ndarray

DTYPE = np.float32

# Debug-mode finite checks on every kernel output. Off by default; the test
# suite flips it on.
_debug_checks = os.environ.get("SIGNFORGE_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class ShapeError(ValueError):
    """A tensor had the wrong shape for an op; names the offending axis."""


def tensor(data, dtype=DTYPE) -> Tensor:
    """Build a validated tensor: contiguous, floating, all dims >= 1."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dimensions must be >= 1, got shape {arr.shape}")
    return arr


def zeros(shape, dtype=DTYPE) -> Tensor:
    return np.zeros(shape, dtype=dtype)


def check_finite(arr: Tensor, what: str) -> Tensor:
    """Raise if debug checks are on and `arr` contains NaN/Inf."""
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


def require_shape(arr: Tensor, ndim: int, what: str) -> None:
    if arr.ndim != ndim:
        raise ShapeError(f"{what} must have {ndim} axes, got {arr.ndim} (shape {arr.shape})")
