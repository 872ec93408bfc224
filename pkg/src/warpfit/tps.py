"""Thin-plate-spline warping with differentiable bilinear sampling.

A warp is parameterized by a 2x3 affine matrix plus a per-control-point
displacement on a regular lattice covering [-1, 1]^2. The control points
are mapped to targets t_i = A [c_i; 1] + d_i and the spline that
interpolates them is recovered with one multiply by a cached inverse of
the system matrix

    L = [[K, P], [P^T, 0]],  K_ij = U(|c_i - c_j|),  P_i = [1, x_i, y_i]

with the biharmonic kernel U(r) = r^2 log(r^2) (zero at r = 0). Because
the side conditions P^T w = 0 are part of the solve, pure affine targets
come back with exactly zero radial weights and the affine part alone.
Evaluating the spline on a pixel lattice is another multiply by a cached
basis matrix, so params -> dense field is linear end to end and
differentiates through the stock matmul machinery.

Coordinates are align-corners style: (-1,-1) is the CENTER of the
top-left pixel and (+1,+1) the center of the bottom-right pixel; the
first field channel is x (column), the second y (row). Warping is
backward: the field says where in the source each output pixel reads
from, and reads outside [-1,1]^2 contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, _accumulate, _from_op, concat, matmul, no_grad


def _kernel(r2: np.ndarray) -> np.ndarray:
    """U as a function of squared radius: r^2 log(r^2), continued by 0 at 0."""
    safe = np.where(r2 > 0.0, r2, 1.0)
    return np.where(r2 > 0.0, safe * np.log(safe), 0.0)


def output_lattice(h: int, w: int) -> np.ndarray:
    """(h*w, 2) pixel-center coordinates in [-1,1]^2, x varying fastest."""
    if h < 1 or w < 1:
        raise ParameterError(f"lattice needs positive dimensions, got {h}x{w}")
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


class ControlGrid:
    """A k x k control-point lattice with its cached solve and basis matrices.

    Instances are immutable after construction apart from internal caches
    and can be shared across models; all cached matrices are built in
    float64 and cast per requested dtype.
    """

    def __init__(self, points_per_side: int):
        if points_per_side < 2:
            raise ParameterError(f"control grid needs at least 2 points per side, got {points_per_side}")
        self.points_per_side = int(points_per_side)
        self.num_points = self.points_per_side ** 2
        axis = np.linspace(-1.0, 1.0, self.points_per_side)
        gx, gy = np.meshgrid(axis, axis)
        self.points = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (K,2), rows row-major in y

        k = self.num_points
        diff = self.points[:, None, :] - self.points[None, :, :]
        km = _kernel((diff * diff).sum(axis=2))
        p = np.concatenate([np.ones((k, 1)), self.points], axis=1)  # [1, x, y]
        system = np.zeros((k + 3, k + 3))
        system[:k, :k] = km
        system[:k, k:] = p
        system[k:, :k] = p.T
        self.system = system
        self.system_inverse = np.linalg.inv(system)
        residual = np.max(np.abs(system @ self.system_inverse - np.eye(k + 3)))
        if not np.isfinite(residual) or residual > 1e-8:
            raise ParameterError(f"control lattice produced a singular system (residual {residual:.2e})")

        # rows [x, y, 1] so that targets = aug @ A^T for a 2x3 affine A
        self._aug = np.concatenate([self.points, np.ones((k, 1))], axis=1)
        self._basis_cache: dict[tuple, np.ndarray] = {}

    def basis(self, h: int, w: int, dtype=np.float64) -> np.ndarray:
        """(h*w, K+3) matrix sending spline coefficients to field samples."""
        key = (h, w, np.dtype(dtype).str)
        if key not in self._basis_cache:
            lattice = output_lattice(h, w)
            diff = lattice[:, None, :] - self.points[None, :, :]
            radial = _kernel((diff * diff).sum(axis=2))
            full = np.concatenate([radial, np.ones((lattice.shape[0], 1)), lattice], axis=1)
            self._basis_cache[key] = full.astype(dtype)
        return self._basis_cache[key]


IDENTITY_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass
class TpsParams:
    """Warp parameters: 2x3 affine (row-major) plus (K,2) displacements,
    each displacement a (dx, dy) added to the affine image of its control
    point."""

    affine: np.ndarray
    displacements: np.ndarray

    def __post_init__(self):
        self.affine = np.asarray(self.affine, dtype=np.float64)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if self.affine.shape != (2, 3):
            raise DimensionError(f"affine must be 2x3, got {self.affine.shape}")
        if self.displacements.ndim != 2 or self.displacements.shape[1] != 2:
            raise DimensionError(f"displacements must be (K,2), got {self.displacements.shape}")

    @property
    def num_points(self) -> int:
        return self.displacements.shape[0]

    @staticmethod
    def identity(num_points: int) -> "TpsParams":
        return TpsParams(IDENTITY_AFFINE.copy(), np.zeros((num_points, 2)))

    def to_vector(self) -> np.ndarray:
        """Flat layout: 6 affine entries row-major, then per-point (dx, dy)."""
        return np.concatenate([self.affine.ravel(), self.displacements.ravel()])

    @staticmethod
    def from_vector(vec) -> "TpsParams":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size < 8 or (vec.size - 6) % 2 != 0:
            raise DimensionError(
                f"parameter vector must hold 6 affine values plus 2K displacements, got {vec.size}")
        return TpsParams(vec[:6].reshape(2, 3), vec[6:].reshape(-1, 2))


def tps_solve(grid: ControlGrid, affine: Tensor, displacements: Tensor) -> Tensor:
    """Solve for spline coefficients from warp parameters.

    affine: (..., 2, 3) or (..., 6); displacements: (..., K, 2) or (..., 2K).
    Returns (..., K+3, 2): rows 0..K-1 are the radial weights w, the last
    three rows the affine part a as [constant, x, y] per output coordinate.
    """
    k = grid.num_points
    affine = _ensure_trailing(affine, (2, 3), "affine")
    displacements = _ensure_trailing(displacements, (k, 2), "displacements")
    # the system has a wide dynamic range, so the (small) solve always runs
    # in 64-bit; only the coefficients return in the graph's dtype
    in_dtype = affine.data.dtype
    if in_dtype != np.float64:
        affine = affine.astype(np.float64)
        displacements = displacements.astype(np.float64)
    aug = Tensor(grid._aug, dtype=np.float64)
    inv = Tensor(grid.system_inverse, dtype=np.float64)

    targets = matmul(aug, affine.swap_last_axes()) + displacements  # (..., K, 2)
    pad = Tensor(np.zeros(targets.shape[:-2] + (3, 2)), dtype=np.float64)
    rhs = concat([targets, pad], axis=-2)
    coeffs = matmul(inv, rhs)
    return coeffs if in_dtype == np.float64 else coeffs.astype(in_dtype)


def tps_grid(grid: ControlGrid, coefficients: Tensor, out_shape: tuple[int, int]) -> Tensor:
    """Evaluate the spline on a pixel lattice: (..., K+3, 2) -> (..., H, W, 2)."""
    h, w = out_shape
    if coefficients.shape[-2:] != (grid.num_points + 3, 2):
        raise DimensionError(
            f"coefficients must end in ({grid.num_points + 3}, 2), got {coefficients.shape}")
    basis_np = grid.basis(h, w, coefficients.data.dtype)
    basis = Tensor(basis_np, dtype=basis_np.dtype)
    flat = matmul(basis, coefficients)  # (..., H*W, 2)
    return flat.reshape(flat.shape[:-2] + (h, w, 2))


def _ensure_trailing(t: Tensor, trailing: tuple[int, int], name: str) -> Tensor:
    """Reshape a possibly-flattened tensor so it ends in ``trailing``."""
    flat = trailing[0] * trailing[1]
    if t.shape[-2:] == trailing:
        return t
    if t.shape[-1] == flat:
        return t.reshape(t.shape[:-1] + trailing)
    raise DimensionError(f"{name} must end in {trailing} or ({flat},), got {t.shape}")


def bilinear_sample(image: Tensor, field: Tensor) -> Tensor:
    """Sample (N,C,H,W) at field (N,Ho,Wo,2) coordinates with zero padding.

    Each output pixel bilinearly interpolates the four source pixels around
    its sampling point; corners outside the image contribute zero, so a
    fully out-of-range sample is exactly 0. Differentiable in both the
    image and the field (the field gradient treats the out-of-range
    indicator as locally constant).
    """
    if image.ndim != 4:
        raise DimensionError(f"image must be (N,C,H,W), got {image.shape}")
    if field.ndim != 4 or field.shape[-1] != 2:
        raise DimensionError(f"field must be (N,Ho,Wo,2), got {field.shape}")
    if image.shape[0] != field.shape[0]:
        raise DimensionError(f"batch mismatch: image {image.shape[0]} vs field {field.shape[0]}")
    n, c, h, w = image.shape
    ho, wo = field.shape[1:3]
    if not np.all(np.isfinite(field.data)):
        raise ParameterError("field contains non-finite coordinates")

    # coordinate math in 64-bit so lattice-exact fields land exactly on
    # pixel centers; values and weights stay in the image dtype
    px = (field.data[..., 0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    py = (field.data[..., 1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(image.data.dtype)
    fy = (py - y0).astype(image.data.dtype)
    x1, y1 = x0 + 1, y0 + 1

    def corner(yi, xi):
        valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h))
        lin = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)  # (N,Ho,Wo)
        flat = image.data.reshape(n, c, h * w)
        vals = np.take_along_axis(flat, lin.reshape(n, 1, ho * wo), axis=2)
        vals = vals.reshape(n, c, ho, wo) * valid[:, None].astype(image.data.dtype)
        return vals, valid, lin

    v00, m00, l00 = corner(y0, x0)
    v01, m01, l01 = corner(y0, x1)
    v10, m10, l10 = corner(y1, x0)
    v11, m11, l11 = corner(y1, x1)

    one = np.asarray(1.0, dtype=image.data.dtype)
    w00 = (one - fx) * (one - fy)
    w01 = fx * (one - fy)
    w10 = (one - fx) * fy
    w11 = fx * fy
    out_data = (v00 * w00[:, None] + v01 * w01[:, None]
                + v10 * w10[:, None] + v11 * w11[:, None])

    def bwd(g):
        if image.requires_grad:
            nc_off = ((np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w))
            nc_off = nc_off[:, :, None, None]
            total = np.zeros(n * c * h * w, dtype=np.float64)
            for vals_w, mask, lin in ((w00, m00, l00), (w01, m01, l01),
                                      (w10, m10, l10), (w11, m11, l11)):
                contrib = g * (vals_w * mask.astype(g.dtype))[:, None]
                idx = (nc_off + lin[:, None]).ravel()
                total += np.bincount(idx, weights=contrib.ravel().astype(np.float64),
                                     minlength=n * c * h * w)
            _accumulate(image, total.reshape(image.shape).astype(image.data.dtype))
        if field.requires_grad:
            dpx = (one - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
            dpy = (one - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
            gx = (g * dpx).sum(axis=1) * (0.5 * (w - 1))
            gy = (g * dpy).sum(axis=1) * (0.5 * (h - 1))
            _accumulate(field, np.stack([gx, gy], axis=-1))

    return _from_op(out_data, (image, field), bwd)


def warp_field(grid: ControlGrid, params: TpsParams, out_shape: tuple[int, int],
               dtype=np.float64) -> np.ndarray:
    """Dense (H,W,2) sampling field for one parameter set (no graph)."""
    if params.num_points != grid.num_points:
        raise DimensionError(
            f"params carry {params.num_points} control points, grid has {grid.num_points}")
    with no_grad():
        coeffs = tps_solve(grid,
                           Tensor(params.affine, dtype=dtype),
                           Tensor(params.displacements, dtype=dtype))
        return tps_grid(grid, coeffs, out_shape).data


def warp_mask(mask: np.ndarray, params: TpsParams, grid: ControlGrid) -> np.ndarray:
    """Warp a single (H,W) mask in [0,1]; returns a soft mask in [0,1].

    Bilinear interpolation of values in [0,1] stays in [0,1]; the final
    clip only trims float round-off.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be 2-d, got {mask.shape}")
    if mask.size and (mask.min() < -1e-6 or mask.max() > 1.0 + 1e-6):
        raise ParameterError("mask values must lie in [0, 1]")
    h, w = mask.shape
    with no_grad():
        field = Tensor(warp_field(grid, params, (h, w))[None], dtype=np.float64)
        out = bilinear_sample(Tensor(mask[None, None], dtype=np.float64), field)
    return np.clip(out.data[0, 0], 0.0, 1.0)
