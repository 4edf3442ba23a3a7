"""Regular-grid volumes in world (RAS, mm) coordinates.

Arrays are stored as ``(nx, ny, nz, channels)``; flattened voxel order is C
order over ``(x, y, z)``, matching ``np.indices(dims).reshape(3, -1).T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundaryError, DataError, EmptyRegionError, InvalidGridError

EIG_FLOOR = 1e-8

# (row, col) of the six stored tensor channels: Dxx, Dyy, Dzz, Dxy, Dxz, Dyz
TENSOR_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


@dataclass(eq=False)
class GridSpec:
    dims: tuple
    affine: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidGridError(f"dims must be three positive integers, got {self.dims}")
        self.affine = np.asarray(self.affine, dtype=float).copy()
        if self.affine.shape != (4, 4) or not np.all(np.isfinite(self.affine)):
            raise InvalidGridError("affine must be a finite 4x4 matrix")
        lin = self.affine[:3, :3]
        if abs(np.linalg.det(lin)) < 1e-12 * max(1.0, np.abs(lin).max()) ** 3:
            raise InvalidGridError("affine linear part is singular")

    @classmethod
    def from_spacing(cls, dims, spacing=1.0, origin=(0.0, 0.0, 0.0)):
        aff = np.eye(4)
        aff[:3, :3] = np.diag(np.broadcast_to(np.asarray(spacing, float), (3,)))
        aff[:3, 3] = origin
        return cls(dims, aff)

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def voxel_indices(self) -> np.ndarray:
        """All voxel indices, shape (V, 3), in flattening order."""
        return np.indices(self.dims).reshape(3, -1).T

    def index_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=float)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_index(self, xyz) -> np.ndarray:
        inv = np.linalg.inv(self.affine)
        xyz = np.asarray(xyz, dtype=float)
        return xyz @ inv[:3, :3].T + inv[:3, 3]

    def same_as(self, other: "GridSpec", atol=1e-6) -> bool:
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol)


@dataclass(eq=False)
class Volume:
    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape == self.grid.dims:
            data = data[..., None]
        if data.ndim != 4 or data.shape[:3] != self.grid.dims:
            raise DataError(f"data shape {data.shape} does not match grid {self.grid.dims}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def flat(self) -> np.ndarray:
        """Data as (V, channels)."""
        return self.data.reshape(-1, self.channels)

    def scalar(self) -> np.ndarray:
        if self.channels != 1:
            raise DataError(f"expected a single-channel volume, got {self.channels} channels")
        return self.data[..., 0]


class TensorVolume(Volume):
    """Six-channel symmetric tensor field (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)."""

    def __post_init__(self):
        super().__post_init__()
        if self.channels != 6:
            raise DataError("tensor volumes need exactly 6 channels")

    def matrices(self) -> np.ndarray:
        return channels_to_matrices(self.flat())


def channels_to_matrices(six):
    six = np.asarray(six, dtype=float)
    out = np.empty(six.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(TENSOR_INDEX):
        out[..., i, j] = six[..., k]
        out[..., j, i] = six[..., k]
    return out


def matrices_to_channels(mats):
    mats = np.asarray(mats, dtype=float)
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return np.stack([sym[..., i, j] for i, j in TENSOR_INDEX], axis=-1)


def _corners(coords, dims, mode):
    """Lower corner indices, fractional offsets and an inside mask.

    For ``mode='clamp'`` the fractional derivative is zero along clamped axes;
    the returned ``active`` array marks axes where the coordinate was inside.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    hi = np.asarray(dims, dtype=float) - 1.0
    if not np.all(np.isfinite(coords)):
        raise BoundaryError("non-finite sample coordinate")
    inside = np.all((coords >= -1e-9) & (coords <= hi + 1e-9), axis=1)
    if mode == "raise" and not np.all(inside):
        raise BoundaryError("sample point outside the grid; pass mode='clamp' or 'zero'")
    if mode not in ("raise", "clamp", "zero"):
        raise ValueError(f"unknown boundary mode {mode!r}")
    clipped = np.clip(coords, 0.0, hi)
    active = (coords > 0.0) & (coords < hi)
    i0 = np.floor(clipped).astype(np.int64)
    i0 = np.minimum(i0, np.maximum(np.asarray(dims) - 2, 0))
    t = clipped - i0
    i1 = np.minimum(i0 + 1, np.asarray(dims) - 1)
    return i0, i1, t, inside, active


def trilinear_weights(coords, dims, mode="clamp"):
    """Eight-corner flat indices and weights, each of shape (N, 8)."""
    i0, i1, t, inside, _ = _corners(coords, dims, mode)
    nx, ny, nz = dims
    idx = np.empty((len(t), 8), dtype=np.int64)
    w = np.empty((len(t), 8))
    k = 0
    for cx in (0, 1):
        ix = i1[:, 0] if cx else i0[:, 0]
        wx = t[:, 0] if cx else 1.0 - t[:, 0]
        for cy in (0, 1):
            iy = i1[:, 1] if cy else i0[:, 1]
            wy = t[:, 1] if cy else 1.0 - t[:, 1]
            for cz in (0, 1):
                iz = i1[:, 2] if cz else i0[:, 2]
                wz = t[:, 2] if cz else 1.0 - t[:, 2]
                idx[:, k] = (ix * ny + iy) * nz + iz
                w[:, k] = wx * wy * wz
                k += 1
    if mode == "zero":
        w[~inside] = 0.0
    return idx, w


def trilinear(data, coords, mode="clamp", gradient=False):
    """Sample a (nx, ny, nz, C) array at continuous voxel coordinates.

    Returns values (N, C) and, with ``gradient=True``, the derivative of each
    value with respect to the coordinate, shape (N, C, 3).
    """
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[..., None]
    dims = data.shape[:3]
    flat = data.reshape(-1, data.shape[3])
    i0, i1, t, inside, active = _corners(coords, dims, mode)
    ny, nz = dims[1], dims[2]
    vals = np.zeros((len(t), flat.shape[1]))
    grad = np.zeros((len(t), flat.shape[1], 3)) if gradient else None
    for cx in (0, 1):
        ix = i1[:, 0] if cx else i0[:, 0]
        wx = t[:, 0] if cx else 1.0 - t[:, 0]
        sx = 1.0 if cx else -1.0
        for cy in (0, 1):
            iy = i1[:, 1] if cy else i0[:, 1]
            wy = t[:, 1] if cy else 1.0 - t[:, 1]
            sy = 1.0 if cy else -1.0
            for cz in (0, 1):
                iz = i1[:, 2] if cz else i0[:, 2]
                wz = t[:, 2] if cz else 1.0 - t[:, 2]
                sz = 1.0 if cz else -1.0
                corner = flat[(ix * ny + iy) * nz + iz]
                vals += (wx * wy * wz)[:, None] * corner
                if gradient:
                    grad[:, :, 0] += (sx * wy * wz)[:, None] * corner
                    grad[:, :, 1] += (wx * sy * wz)[:, None] * corner
                    grad[:, :, 2] += (wx * wy * sz)[:, None] * corner
    if gradient:
        # flat axes (dim 1) and clamped coordinates carry no derivative
        grad *= (active & (np.asarray(dims) > 1))[:, None, :]
    if mode == "zero":
        vals[~inside] = 0.0
        if gradient:
            grad[~inside] = 0.0
    return (vals, grad) if gradient else vals


def trilinear_sample(vol: Volume, point, mode="raise") -> np.ndarray:
    """Value of every channel at one continuous voxel coordinate."""
    return trilinear(vol.data, np.asarray(point, float)[None, :], mode=mode)[0]


def _target_coords(source: GridSpec, target: GridSpec) -> np.ndarray:
    return source.world_to_index(target.index_to_world(target.voxel_indices()))


def resample(vol: Volume, target: GridSpec, mode="trilinear", boundary="clamp") -> Volume:
    """Resample onto ``target``; ``mode='nearest'`` for label volumes."""
    if not isinstance(target, GridSpec):
        raise InvalidGridError("target must be a GridSpec")
    coords = _target_coords(vol.grid, target)
    if mode == "nearest":
        hi = np.asarray(vol.grid.dims) - 1
        idx = np.rint(coords).astype(np.int64)
        outside = np.any((idx < 0) | (idx > hi), axis=1)
        idx = np.clip(idx, 0, hi)
        vals = vol.data[idx[:, 0], idx[:, 1], idx[:, 2]]
        if boundary == "zero":
            vals[outside] = 0
    elif mode == "trilinear":
        vals = trilinear(vol.data, coords, mode=boundary)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return Volume(target, vals.reshape(target.dims + (vol.channels,)))


def _sym_log(mats):
    evals, evecs = np.linalg.eigh(mats)
    evals = np.log(np.maximum(evals, EIG_FLOOR))
    return (evecs * evals[..., None, :]) @ np.swapaxes(evecs, -1, -2)


def _sym_exp(mats):
    evals, evecs = np.linalg.eigh(0.5 * (mats + np.swapaxes(mats, -1, -2)))
    return (evecs * np.exp(evals)[..., None, :]) @ np.swapaxes(evecs, -1, -2)


def logeuclidean_resample(tensors: TensorVolume, target: GridSpec) -> TensorVolume:
    """Interpolate matrix logarithms trilinearly and map back with exp."""
    if not np.all(np.isfinite(tensors.data)):
        raise DataError("non-finite tensor input")
    logs = matrices_to_channels(_sym_log(tensors.matrices()))
    log_vol = Volume(tensors.grid, logs.reshape(tensors.grid.dims + (6,)))
    out = resample(log_vol, target, mode="trilinear")
    mats = _sym_exp(channels_to_matrices(out.flat()))
    return TensorVolume(target, matrices_to_channels(mats).reshape(target.dims + (6,)))


def bounding_box(prior: Volume, threshold: float, margin_mm: float, resolution=None) -> GridSpec:
    """Isotropic grid covering every voxel with ``prior > threshold``.

    The box keeps the source orientation; ``resolution`` defaults to the
    smallest source spacing.
    """
    values = prior.scalar()
    hits = np.argwhere(values > threshold)
    if len(hits) == 0:
        raise EmptyRegionError(f"no voxel above threshold {threshold}")
    spacing = prior.grid.spacing
    res = float(spacing.min() if resolution is None else resolution)
    lo = hits.min(axis=0) - margin_mm / spacing
    hi = hits.max(axis=0) + margin_mm / spacing
    extent = (hi - lo) * spacing
    dims = tuple(int(n) for n in np.floor(extent / res + 1e-9).astype(int) + 1)
    direction = prior.grid.affine[:3, :3] / spacing
    aff = np.eye(4)
    aff[:3, :3] = direction * res
    aff[:3, 3] = prior.grid.index_to_world(lo)
    return GridSpec(dims, aff)
