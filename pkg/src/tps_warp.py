#!/usr/bin/env python3
"""
Thin-plate-spline warp fields and differentiable bilinear sampling

Coordinates are normalized to [-1, 1]; pixel i of an N-pixel axis has its
center at -1 + (2i + 1)/N. Field channel 0 holds x (columns), channel 1 y (rows).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.spatial.distance import cdist

import config
from exceptions import NonFiniteError, ShapeError
from tensor_autodiff import Tensor, as_tensor, matmul, record_op, reshape, transpose

logger = logging.getLogger(__name__)

# Tensor[2×h×w] of normalized source coordinates
WarpField = Tensor


def radial_basis(r: np.ndarray) -> np.ndarray:
    """U(r) = r²·log(r²), with U(0) = 0"""
    r2 = np.asarray(r, dtype=np.float64) ** 2
    safe = np.where(r2 == 0, 1.0, r2)
    return np.where(r2 == 0, 0.0, r2 * np.log(safe))


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(h·w)×2 array of normalized (x, y) pixel centers, row-major"""
    xs = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ys = -1.0 + (2.0 * np.arange(height) + 1.0) / height
    grid_y, grid_x = np.meshgrid(ys, xs, indexing='ij')
    return np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)


def identity_field(height: int, width: int) -> np.ndarray:
    """2×h×w identity warp field"""
    return pixel_centers(height, width).T.reshape(2, height, width)


@dataclass(frozen=True)
class ControlGrid:
    """n×n regular grid of control points over [-1, 1]², row-major"""
    per_side: int = config.CONTROL_POINTS_PER_SIDE

    @property
    def count(self) -> int:
        return self.per_side * self.per_side

    @property
    def points(self) -> np.ndarray:
        ticks = np.linspace(-1.0, 1.0, self.per_side)
        grid_y, grid_x = np.meshgrid(ticks, ticks, indexing='ij')
        return np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)


class TpsSystem:
    """
    Factorized (C+3)×(C+3) TPS interpolation system

    Depends only on the control grid, so it is built once and shared.
    """

    def __init__(self, grid: ControlGrid = ControlGrid(), regularization: float = config.TPS_REGULARIZATION):
        self.grid = grid
        self.points = grid.points
        count = len(self.points)
        if len(np.unique(self.points, axis=0)) != count:
            raise ValueError("Control points must be distinct")

        kernel = radial_basis(cdist(self.points, self.points)) + regularization * np.eye(count)
        affine = np.hstack([np.ones((count, 1)), self.points])
        system = np.zeros((count + 3, count + 3))
        system[:count, :count] = kernel
        system[:count, count:] = affine
        system[count:, :count] = affine.T

        self._lu = lu_factor(system, check_finite=True)
        assert np.all(np.abs(np.diag(self._lu[0])) > 0), "TPS system is singular"

        # Columns of the inverse that map control-point targets to [weights; affine]
        self._inverse_targets = lu_solve(self._lu, np.eye(count + 3)[:, :count])
        self._field_cache: Dict[Tuple[int, int], np.ndarray] = {}

    @property
    def count(self) -> int:
        return len(self.points)

    def solve(self, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Fit the spline mapping control points to targets

        Args:
            targets: C×2 target positions

        Returns:
            (C×2 non-affine weights, 3×2 affine coefficients for [1, x, y])
        """
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (self.count, 2):
            raise ShapeError("TPS targets must be C×2", targets.shape, (self.count, 2))
        rhs = np.vstack([targets, np.zeros((3, 2))])
        solution = lu_solve(self._lu, rhs)
        return solution[:self.count], solution[self.count:]

    def transform_matrix(self, coords: np.ndarray) -> np.ndarray:
        """N×C matrix A with spline(coords) = A @ targets"""
        coords = np.asarray(coords, dtype=np.float64)
        basis = np.hstack([radial_basis(cdist(coords, self.points)), np.ones((len(coords), 1)), coords])
        return basis @ self._inverse_targets

    def field_matrix(self, height: int, width: int) -> np.ndarray:
        """transform_matrix at the pixel centers of an h×w output, cached"""
        key = (height, width)
        if key not in self._field_cache:
            self._field_cache[key] = self.transform_matrix(pixel_centers(height, width))
        return self._field_cache[key]

    def warp_points(self, shifts: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """
        Evaluate the spline fitted to (points + shifts) at arbitrary coordinates

        The identity part is added exactly; only the displacement goes through
        the spline, which reproduces affine maps.
        """
        shifts = np.asarray(shifts, dtype=np.float64).reshape(self.count, 2)
        coords = np.asarray(coords, dtype=np.float64)
        return coords + self.transform_matrix(coords) @ shifts


@dataclass
class TpsParams:
    """Per-point (Δx, Δy) control-point shifts, interleaved, length 2C"""
    shifts: np.ndarray
    count: int = config.CONTROL_POINTS_PER_SIDE ** 2

    def __post_init__(self):
        self.shifts = np.asarray(self.shifts, dtype=np.float64).reshape(-1)
        if self.shifts.shape != (2 * self.count,):
            raise ShapeError("TPS params must have length 2C", self.shifts.shape, (2 * self.count,))

    @classmethod
    def uniform(cls, dx: float, dy: float, count: int = config.CONTROL_POINTS_PER_SIDE ** 2) -> 'TpsParams':
        """Every control point moved by (dx, dy): a pure translation"""
        return cls(np.tile([dx, dy], count), count)

    def as_tensor(self) -> Tensor:
        return Tensor(self.shifts)


def tps_grid(params, system: TpsSystem, out: Tuple[int, int]) -> WarpField:
    """
    Warp field of the spline through the shifted control points

    Args:
        params: Tensor (or TpsParams) of length 2C
        system: Shared TPS system
        out: (h, w) of the output grid

    Returns:
        2×h×w tensor of source coordinates, differentiable w.r.t. params
    """
    if isinstance(params, TpsParams):
        params = params.as_tensor()
    params = as_tensor(params)
    if params.shape != (2 * system.count,):
        raise ShapeError("tps_grid: params must have length 2C", params.shape, (2 * system.count,))
    if not np.all(np.isfinite(params.data)):
        raise NonFiniteError("tps_grid: non-finite warp parameters")

    height, width = out
    dtype = params.dtype
    matrix = Tensor(system.field_matrix(height, width), dtype=dtype)
    identity = Tensor(pixel_centers(height, width).T, dtype=dtype)

    displacement = matmul(matrix, reshape(params, (system.count, 2)))  # N×2
    field = transpose(displacement) + identity                         # 2×N
    return reshape(field, (2, height, width))


def _snap(coords: np.ndarray, tolerance: float) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < tolerance, nearest, coords)


def grid_sample(f: Tensor, field: WarpField) -> Tensor:
    """
    Bilinear sampling of f at the field's coordinates, border-clamped

    Args:
        f: D×H×W feature map or image
        field: 2×h×w normalized source coordinates

    Returns:
        D×h×w, differentiable w.r.t. f and field. Clamped coordinates get a
        zero field gradient.
    """
    field = as_tensor(field)
    if f.ndim != 3 or field.ndim != 3 or field.shape[0] != 2:
        raise ShapeError("grid_sample expects D×H×W features and a 2×h×w field", f.shape, field.shape)
    if not np.all(np.isfinite(field.data)):
        raise NonFiniteError("grid_sample: non-finite coordinates")

    depth, height, width = f.shape
    _, out_h, out_w = field.shape
    tolerance = 8 * np.finfo(field.dtype).eps * max(height, width)

    coords = field.data.astype(np.float64).reshape(2, -1)
    px_raw = _snap(((coords[0] + 1.0) * width - 1.0) / 2.0, tolerance)
    py_raw = _snap(((coords[1] + 1.0) * height - 1.0) / 2.0, tolerance)
    inside_x = (px_raw >= 0) & (px_raw <= width - 1)
    inside_y = (py_raw >= 0) & (py_raw <= height - 1)
    px = np.clip(px_raw, 0, width - 1)
    py = np.clip(py_raw, 0, height - 1)

    x0 = np.clip(np.floor(px).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.int64), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = px - x0
    wy = py - y0

    idx00, idx01 = y0 * width + x0, y0 * width + x1
    idx10, idx11 = y1 * width + x0, y1 * width + x1
    weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
    indices = (idx00, idx01, idx10, idx11)

    flat = f.data.reshape(depth, -1)
    v00, v01, v10, v11 = (flat[:, idx] for idx in indices)
    out = weights[0] * v00 + weights[1] * v01 + weights[2] * v10 + weights[3] * v11
    out = out.astype(f.dtype).reshape(depth, out_h, out_w)

    def backward(g):
        g_flat = g.reshape(depth, -1).astype(np.float64)

        grad_f = np.zeros((height * width, depth), dtype=np.float64)
        for idx, weight in zip(indices, weights):
            np.add.at(grad_f, idx, (g_flat * weight).T)
        grad_f = grad_f.T.reshape(depth, height, width).astype(f.dtype)

        d_px = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_py = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        grad_x = (g_flat * d_px).sum(axis=0) * inside_x * (width / 2.0)
        grad_y = (g_flat * d_py).sum(axis=0) * inside_y * (height / 2.0)
        grad_field = np.stack([grad_x, grad_y]).reshape(2, out_h, out_w).astype(field.dtype)
        return grad_f, grad_field

    return record_op(out, (f, field), 'grid_sample', backward)


def warp(f: Tensor, params, system: TpsSystem, out: Optional[Tuple[int, int]] = None) -> Tensor:
    """grid_sample(f, tps_grid(params)) at f's resolution unless out is given"""
    height, width = out or f.shape[1:]
    return grid_sample(f, tps_grid(params, system, (height, width)))
