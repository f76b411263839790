"""Spline-interpolated zoom, HU windowing, axial rotation and grayscale frames."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    AlreadyNormalized,
    BadChannelCount,
    QueryOutOfRange,
    TooFewSamples,
)
from .volume_io import Domain, Volume

__all__ = [
    "SplineOrder",
    "ResizeSpec",
    "natural_second_derivatives",
    "spline_interp_1d",
    "interpolation_matrix",
    "align_corners_coords",
    "siz_resize",
    "hu_normalize",
    "rotate_axial",
    "rgb_to_gray",
    "AUGMENT_ANGLES",
    "DEFAULT_WINDOW",
]

AUGMENT_ANGLES = (-20.0, -10.0, -5.0, 0.0, 5.0, 10.0, 20.0)
DEFAULT_WINDOW = (-1000.0, 400.0)


class SplineOrder(enum.IntEnum):
    LINEAR = 1
    CUBIC = 3


@dataclass(frozen=True)
class ResizeSpec:
    target_dims: tuple[int, int, int]
    spline_order: SplineOrder = SplineOrder.CUBIC

    def __post_init__(self):
        dims = tuple(int(d) for d in self.target_dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"target_dims must be three positive integers, got {self.target_dims}")
        object.__setattr__(self, "target_dims", dims)
        object.__setattr__(self, "spline_order", SplineOrder(self.spline_order))


def natural_second_derivatives(y: np.ndarray) -> np.ndarray:
    """Second derivatives of the natural cubic spline through ``y`` at unit spacing.

    Solves the tridiagonal system ``M[i-1] + 4 M[i] + M[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1])``
    with ``M[0] = M[-1] = 0`` by forward elimination and back substitution.
    ``y`` may carry trailing axes, which are solved independently.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    m = np.zeros_like(y)
    if n < 3:
        return m
    rhs = 6.0 * (y[2:] - 2.0 * y[1:-1] + y[:-2])
    inner = n - 2
    diag = np.empty(inner)
    r = np.empty_like(rhs)
    diag[0] = 4.0
    r[0] = rhs[0]
    for i in range(1, inner):
        f = 1.0 / diag[i - 1]
        diag[i] = 4.0 - f
        r[i] = rhs[i] - f * r[i - 1]
    sol = np.empty_like(rhs)
    sol[-1] = r[-1] / diag[-1]
    for i in range(inner - 2, -1, -1):
        sol[i] = (r[i] - sol[i + 1]) / diag[i]
    m[1:-1] = sol
    return m


def _check_queries(q, n):
    q = np.asarray(q, dtype=np.float64)
    if q.size and (np.any(~np.isfinite(q)) or q.min() < 0.0 or q.max() > n - 1):
        raise QueryOutOfRange(f"queries must lie in [0, {n - 1}]")
    return q


def spline_interp_1d(samples, queries, order=SplineOrder.CUBIC) -> np.ndarray:
    """Evaluate the interpolating spline through ``samples`` (nodes 0..S-1) at ``queries``.

    Extra trailing axes of ``samples`` are interpolated independently.
    """
    y = np.asarray(samples, dtype=np.float64)
    n = y.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    q = _check_queries(queries, n)
    order = SplineOrder(order)
    seg = np.minimum(np.floor(q).astype(np.intp), n - 2)
    t = (q - seg).reshape(q.shape + (1,) * (y.ndim - 1))
    a = 1.0 - t
    out = a * y[seg] + t * y[seg + 1]
    if order is SplineOrder.CUBIC:
        m = natural_second_derivatives(y)
        out = out + ((a ** 3 - a) * m[seg] + (t ** 3 - t) * m[seg + 1]) / 6.0
    return out


def interpolation_matrix(n_source: int, queries, order) -> np.ndarray:
    """Matrix ``A`` with ``A @ y == spline_interp_1d(y, queries, order)`` for every y.

    Rows for queries that land on nodes are exact unit vectors.
    """
    if n_source == 1:
        if SplineOrder(order) is SplineOrder.CUBIC:
            raise TooFewSamples("cubic resize needs a source extent of at least 2")
        q = _check_queries(queries, 1)
        return np.ones((q.size, 1))
    return spline_interp_1d(np.eye(n_source), queries, order)


def align_corners_coords(n_source: int, n_target: int) -> np.ndarray:
    if n_target == 1:
        return np.array([(n_source - 1) / 2.0])
    return np.arange(n_target) * ((n_source - 1) / (n_target - 1))


def siz_resize(vol: Volume, spec: ResizeSpec) -> Volume:
    """Resize to ``spec.target_dims`` with separable 1D splines (depth, then height, then width).

    Target index ``i`` samples source coordinate ``i (S-1)/(T-1)``. Unit-normalized
    inputs are clipped back into [0, 1] after cubic overshoot.
    """
    data = vol.data
    for axis, target in enumerate(spec.target_dims):
        source = data.shape[axis]
        if source == target:
            continue
        mat = interpolation_matrix(source, align_corners_coords(source, target), spec.spline_order)
        data = np.moveaxis(np.tensordot(mat, data, axes=([1], [axis])), 0, axis)
    data = np.ascontiguousarray(data)
    if vol.domain is Domain.UNIT_NORMALIZED:
        data = np.clip(data, 0.0, 1.0)
    return Volume(data, vol.domain)


def hu_normalize(vol: Volume, window=DEFAULT_WINDOW) -> Volume:
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {window}")
    if vol.domain is Domain.UNIT_NORMALIZED:
        raise AlreadyNormalized("volume is already unit-normalized")
    out = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume(np.clip(out, 0.0, 1.0), Domain.UNIT_NORMALIZED)


def rotate_axial(vol: Volume, angle_deg: float) -> Volume:
    """Rotate each axial slice by ``angle_deg`` about its centre (bilinear, zero fill)."""
    if angle_deg == 0:
        return Volume(vol.data.copy(), vol.domain)
    out = _kernels.rotate_bilinear(np.ascontiguousarray(vol.data), math.radians(angle_deg))
    if vol.domain is Domain.UNIT_NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    return Volume(out, vol.domain)


_LUMA = np.array([0.299, 0.587, 0.114])


def rgb_to_gray(frame) -> np.ndarray:
    """ITU-R 601 luma of an (..., 3) RGB array."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim < 1 or frame.shape[-1] != 3:
        raise BadChannelCount(f"expected 3 channels in the last axis, got shape {frame.shape}")
    return frame @ _LUMA
