"""Mutual-information affine registration.

A transform maps fixed-image world coordinates to moving-image world
coordinates. The twelve parameters are translation (mm), rotation (rad,
applied z-y-x), per-axis scale and three shears, composed about the centre
of the fixed image.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import DataError, OverlapError
from .volume import GridSpec, Volume

log = logging.getLogger(__name__)

N_PARAMS = 12
SCALE_RANGE = (0.5, 2.0)


@dataclass(eq=False)
class AffineTransform:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(4, 4)
        if abs(np.linalg.det(self.matrix[:3, :3])) < 1e-12:
            raise DataError("affine transform is not invertible")

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @classmethod
    def from_params(cls, params, center=(0.0, 0.0, 0.0)):
        return cls(params_to_matrix(params, center))

    def inverse(self):
        return AffineTransform(np.linalg.inv(self.matrix))

    def apply(self, xyz):
        xyz = np.asarray(xyz, float)
        return xyz @ self.matrix[:3, :3].T + self.matrix[:3, 3]


def rotation_matrix(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def params_to_matrix(params, center=(0.0, 0.0, 0.0)):
    p = np.asarray(params, float)
    shear = np.array([[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]])
    lin = rotation_matrix(*p[3:6]) @ shear @ np.diag(p[6:9])
    c = np.asarray(center, float)
    out = np.eye(4)
    out[:3, :3] = lin
    out[:3, 3] = c + p[:3] - lin @ c
    return out


def identity_params():
    p = np.zeros(N_PARAMS)
    p[6:9] = 1.0
    return p


def grid_center(grid: GridSpec):
    return grid.index_to_world((np.asarray(grid.dims, float) - 1.0) / 2.0)


def robust_range(values, lo=1.0, hi=99.0):
    a, b = np.percentile(values, [lo, hi])
    if b <= a:
        a, b = float(np.min(values)), float(np.max(values))
    return float(a), float(b)


def _scale(values, rng):
    a, b = rng
    if b <= a:
        return np.zeros_like(values)
    return np.clip((values - a) / (b - a), 0.0, 1.0)


def joint_histogram(x, y, bins):
    """Joint histogram of values in [0, 1] with linear partial-volume binning.

    Bin centres sit at k / (bins - 1); each sample spreads unit mass over the
    (up to) four neighbouring bins with bilinear weights.
    """
    px = np.clip(x, 0.0, 1.0) * (bins - 1)
    py = np.clip(y, 0.0, 1.0) * (bins - 1)
    ix = np.minimum(np.floor(px).astype(np.int64), bins - 2)
    iy = np.minimum(np.floor(py).astype(np.int64), bins - 2)
    fx, fy = px - ix, py - iy
    hist = np.zeros(bins * bins)
    for dx, wx in ((0, 1.0 - fx), (1, fx)):
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            hist += np.bincount((ix + dx) * bins + iy + dy, weights=wx * wy, minlength=bins * bins)
    return hist.reshape(bins, bins)


def mi_from_histogram(hist):
    total = hist.sum()
    if total <= 0:
        raise OverlapError("empty joint histogram")
    p = hist / total
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(np.outer(px, py)[nz]))))


def entropy(values, bins):
    """Entropy of the marginal under the same binning as the MI estimate."""
    hist = joint_histogram(values, values, bins).sum(axis=1)
    p = hist[hist > 0] / hist.sum()
    return float(-np.sum(p * np.log(p)))


class _MIObjective:
    """MI between fixed voxel values and the moving image sampled through T."""

    def __init__(self, fixed: Volume, moving: Volume, bins=32, scale=True, fixed_mask=None,
                 fill_outside=False):
        if bins < 8:
            raise ValueError("at least 8 histogram bins are required")
        self.bins = bins
        fvals = fixed.flat()[:, 0].astype(float)
        mvals = moving.data[..., 0].astype(float)
        if scale:
            fvals = _scale(fvals, robust_range(fvals))
            mvals = _scale(mvals, robust_range(mvals))
        self.fixed_values = fvals
        self.world = fixed.grid.index_to_world(fixed.grid.voxel_indices())
        if fixed_mask is not None:
            keep = np.asarray(fixed_mask).ravel()
            self.fixed_values = self.fixed_values[keep]
            self.world = self.world[keep]
        self.moving = mvals
        self.evaluations = 0
        self.fill = float(mvals.min()) if fill_outside else None
        self.moving_grid = moving.grid
        self.hi = np.asarray(moving.grid.dims, float) - 1.0

    def _sample(self, coords):
        # order-1 spline = trilinear; only called on in-bounds coordinates
        return map_coordinates(self.moving, coords.T, order=1, mode="nearest")

    def __call__(self, matrix):
        coords = self.moving_grid.world_to_index(self.world @ matrix[:3, :3].T + matrix[:3, 3])
        inside = np.all((coords >= 0.0) & (coords <= self.hi), axis=1)
        if not np.any(inside):
            raise OverlapError("images do not overlap under the transform")
        self.evaluations += 1
        if self.fill is None:
            mv = self._sample(coords[inside])
            return mi_from_histogram(joint_histogram(self.fixed_values[inside], mv, self.bins))
        # every fixed sample counts; outside the moving image it reads the lowest intensity
        mv = np.full(len(coords), self.fill)
        mv[inside] = self._sample(coords[inside])
        return mi_from_histogram(joint_histogram(self.fixed_values, mv, self.bins))


def mutual_information(fixed: Volume, moving: Volume, transform=None, bins=32, scale=True):
    """MI (nats) of fixed intensities against moving intensities at T(x).

    ``scale=True`` maps both images to [0, 1] by their 1st/99th percentiles;
    with ``scale=False`` intensities are taken to be in [0, 1] already.
    """
    matrix = np.eye(4) if transform is None else getattr(transform, "matrix", transform)
    return _MIObjective(fixed, moving, bins, scale)(np.asarray(matrix, float))


def downsample(vol: Volume, factor: int) -> Volume:
    """Block-average by an integer factor; the grid origin moves to block centres."""
    if factor == 1:
        return vol
    dims = tuple(max(1, n // factor) for n in vol.grid.dims)
    data = vol.data[: dims[0] * factor, : dims[1] * factor, : dims[2] * factor].astype(float)
    data = data.reshape(dims[0], factor, dims[1], factor, dims[2], factor, vol.channels).mean(axis=(1, 3, 5))
    aff = vol.grid.affine.copy()
    aff[:3, 3] = vol.grid.index_to_world(np.full(3, (factor - 1) / 2.0))
    aff[:3, :3] = aff[:3, :3] * factor
    return Volume(GridSpec(dims, aff), data)


def _smooth(vol: Volume, sigma):
    if sigma <= 0:
        return vol
    return Volume(vol.grid, gaussian_filter(vol.data.astype(float), (sigma, sigma, sigma, 0), mode="nearest"))


@dataclass
class RegistrationOptions:
    levels: int = 3
    bins: int = 32
    dof: int = 12
    translation_step: float = 2.0  # mm, at the finest level
    rotation_step: float = np.deg2rad(2.0)
    scale_step: float = 0.02
    shear_step: float = 0.02
    min_step_fraction: float = 1.0 / 32.0
    max_sweeps: int = 200
    smoothing: float = 0.0  # Gaussian sigma in voxels of each level


def _step_sizes(opts: RegistrationOptions):
    steps = np.zeros(N_PARAMS)
    steps[:3] = opts.translation_step
    steps[3:6] = opts.rotation_step
    steps[6:9] = opts.scale_step
    steps[9:] = opts.shear_step
    steps[opts.dof:] = 0.0
    return steps


def _coordinate_search(objective, params, steps, min_steps, center, max_sweeps):
    best = objective(params_to_matrix(params, center))
    sweeps = 0
    while np.any(steps > min_steps) and sweeps < max_sweeps:
        sweeps += 1
        improved = False
        for i in np.flatnonzero(steps > 0):
            for sign in (1.0, -1.0):
                trial = params.copy()
                trial[i] += sign * steps[i]
                if np.any(trial[6:9] < SCALE_RANGE[0]) or np.any(trial[6:9] > SCALE_RANGE[1]):
                    continue
                try:
                    value = objective(params_to_matrix(trial, center))
                except OverlapError:
                    continue
                if value > best + 1e-12:
                    params, best, improved = trial, value, True
                    break
        if not improved:
            steps = np.where(steps > min_steps, steps / 2.0, steps)
    return params, best


def register_affine_mi(fixed: Volume, moving: Volume, opts: RegistrationOptions = None) -> AffineTransform:
    """Maximize MI over an affine with a multi-resolution coordinate search.

    Levels run coarse to fine with a factor-two downsampling between them;
    step sizes scale with the level. Every level fits a rigid pose; the
    remaining degrees of freedom are refined at full resolution with a
    quarter of the base steps. Deterministic for given inputs.
    """
    opts = opts or RegistrationOptions()
    if np.ptp(fixed.data[..., 0]) == 0 or np.ptp(moving.data[..., 0]) == 0:
        raise DataError("registration needs nonconstant images")
    center = grid_center(fixed.grid)
    params = identity_params()
    base_steps = _step_sizes(opts)
    for level in reversed(range(opts.levels)):
        factor = 2 ** level
        obj = _MIObjective(_smooth(downsample(fixed, factor), opts.smoothing),
                           _smooth(downsample(moving, factor), opts.smoothing), opts.bins,
                           fill_outside=True)
        # rigid first; scales and shears are freed only once the pose is settled at full resolution
        stages = [base_steps * factor]
        stages[0][6:] = 0.0
        if level == 0 and opts.dof > 6:
            stages.append(base_steps / 4.0)
        for steps in stages:
            params, best = _coordinate_search(obj, params, steps, steps * opts.min_step_fraction,
                                              center, opts.max_sweeps)
        log.debug("registration level %d: MI %.6f", level, best)
    final = _MIObjective(fixed, moving, opts.bins, fill_outside=True)
    if final(params_to_matrix(params, center)) <= final(np.eye(4)) + 1e-12:
        warnings.warn("registration did not improve on the identity; returning identity",
                      RuntimeWarning, stacklevel=2)
        return AffineTransform.identity()
    return AffineTransform(params_to_matrix(params, center))
