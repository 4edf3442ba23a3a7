"""Deformable probabilistic atlas.

The atlas is a voxelized stack of class probabilities. A coarse grid of
control points carries displacements (mm, atlas world frame) that are
interpolated trilinearly at every subject voxel and added after the initial
affine. Deformations are regularized by a discrete bending energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .volume import GridSpec, Volume, trilinear, trilinear_weights

PRIOR_FLOOR = 1e-16
DEFAULT_STIFFNESS = 0.05
DEFAULT_CONTROL_SPACING = 10


@dataclass(eq=False)
class ProbAtlas:
    probs: Volume
    names: list = field(default_factory=list)

    def __post_init__(self):
        data = self.probs.data
        if np.any(data < 0):
            raise DataError("atlas probabilities must be nonnegative")
        if not np.allclose(data.sum(axis=3), 1.0, atol=1e-5):
            raise DataError("atlas probabilities must sum to one in every voxel")
        if not self.names:
            self.names = [f"class{c + 1}" for c in range(self.n_classes)]
        if len(self.names) != self.n_classes:
            raise DataError("one class name per atlas channel is required")

    @property
    def grid(self) -> GridSpec:
        return self.probs.grid

    @property
    def n_classes(self) -> int:
        return self.probs.channels

    def permuted(self, order):
        order = list(order)
        return ProbAtlas(Volume(self.grid, self.probs.data[..., order]), [self.names[i] for i in order])


@dataclass(eq=False)
class DeformationField:
    control: GridSpec
    displacements: np.ndarray
    stiffness: float = DEFAULT_STIFFNESS

    def __post_init__(self):
        disp = np.asarray(self.displacements, dtype=float)
        if disp.shape != self.control.dims + (3,):
            disp = disp.reshape(self.control.dims + (3,))
        if not np.all(np.isfinite(disp)):
            raise DataError("displacements must be finite")
        if self.stiffness <= 0:
            raise DataError("stiffness must be positive")
        self.displacements = disp

    @classmethod
    def zeros(cls, control: GridSpec, stiffness=DEFAULT_STIFFNESS):
        return cls(control, np.zeros(control.dims + (3,)), stiffness)

    def with_displacements(self, disp):
        return DeformationField(self.control, np.asarray(disp).reshape(self.control.dims + (3,)),
                                self.stiffness)


def control_grid_for(grid: GridSpec, spacing=DEFAULT_CONTROL_SPACING) -> GridSpec:
    """Control lattice covering ``grid`` with one point every ``spacing`` voxels."""
    if spacing < 2:
        raise DataError("control spacing must be at least two working voxels")
    dims = tuple(int(np.ceil((n - 1) / spacing)) + 1 for n in grid.dims)
    return GridSpec(dims, grid.affine @ np.diag([spacing, spacing, spacing, 1.0]))


def deform_point(fld: DeformationField, index, affine_init, grid: GridSpec, atlas_grid: GridSpec):
    """Continuous atlas voxel coordinate reached from subject voxel ``index``."""
    world = grid.index_to_world(np.asarray(index, float)[None, :])
    moved = world @ np.asarray(affine_init)[:3, :3].T + np.asarray(affine_init)[:3, 3]
    cidx = fld.control.world_to_index(world)
    disp = trilinear(fld.displacements, cidx, mode="clamp")
    return atlas_grid.world_to_index(moved + disp)[0]


# -- bending energy -----------------------------------------------------------

def _diff(n, order):
    if n <= order:
        return sp.csr_matrix((0, n))
    stencil = [-1.0, 1.0] if order == 1 else [1.0, -2.0, 1.0]
    return sp.diags(stencil, list(range(order + 1)), shape=(n - order, n), format="csr")


@lru_cache(maxsize=16)
def _bending_operator(dims, spacing):
    eye = [sp.identity(n, format="csr") for n in dims]
    h = np.asarray(spacing)
    cell = float(np.prod(h))
    H = sp.csr_matrix((int(np.prod(dims)),) * 2)
    for a in range(3):
        ops = list(eye)
        ops[a] = _diff(dims[a], 2)
        L = sp.kron(sp.kron(ops[0], ops[1]), ops[2], format="csr")
        H = H + (L.T @ L) / h[a] ** 4
        for b in range(a + 1, 3):
            ops = list(eye)
            ops[a] = _diff(dims[a], 1)
            ops[b] = _diff(dims[b], 1)
            L = sp.kron(sp.kron(ops[0], ops[1]), ops[2], format="csr")
            H = H + 2.0 * (L.T @ L) / (h[a] ** 2 * h[b] ** 2)
    return (cell * H).tocsr()


def bending_energy(fld: DeformationField):
    """Discrete bending energy and its gradient (same shape as displacements).

    Squared second differences (pure and mixed, mixed terms counted twice),
    divided by the squared control spacings and scaled by the cell volume.
    Affine displacement fields have zero energy.
    """
    spacing = tuple(float(s) for s in fld.control.spacing)
    H = _bending_operator(fld.control.dims, spacing)
    theta = fld.displacements.reshape(-1, 3)
    Ht = H @ theta
    return float(np.sum(theta * Ht)), (2.0 * Ht).reshape(fld.displacements.shape)


# -- deformed prior -----------------------------------------------------------

class DeformedAtlas:
    """Atlas prior evaluated at the (masked) voxels of a working grid."""

    def __init__(self, atlas: ProbAtlas, grid: GridSpec, affine_init=None, control=None,
                 mask=None):
        self.atlas = atlas
        self.grid = grid
        self.affine_init = np.eye(4) if affine_init is None else np.asarray(affine_init, float)
        self.control = control_grid_for(grid) if control is None else control
        idx = grid.voxel_indices()
        if mask is not None:
            idx = idx[np.asarray(mask).ravel()]
        world = grid.index_to_world(idx)
        moved = world @ self.affine_init[:3, :3].T + self.affine_init[:3, 3]
        self.base = atlas.grid.world_to_index(moved)
        self.jac = np.linalg.inv(atlas.grid.affine)[:3, :3]
        cidx, cw = trilinear_weights(self.control.world_to_index(world), self.control.dims)
        rows = np.repeat(np.arange(len(idx)), 8)
        n_ctrl = int(np.prod(self.control.dims))
        self.weights = sp.csr_matrix((cw.ravel(), (rows, cidx.ravel())), shape=(len(idx), n_ctrl))
        self.weights_t = self.weights.T.tocsr()

    @property
    def n_voxels(self):
        return self.base.shape[0]

    def coords(self, fld: DeformationField) -> np.ndarray:
        disp = self.weights @ fld.displacements.reshape(-1, 3)
        return self.base + disp @ self.jac.T

    def prior(self, fld: DeformationField, gradient=False):
        """Floored, renormalized class probabilities, shape (V, C)."""
        raw = trilinear(self.atlas.probs.data, self.coords(fld), mode="clamp", gradient=gradient)
        raw, draw = raw if gradient else (raw, None)
        floored = np.maximum(raw, PRIOR_FLOOR)
        total = floored.sum(axis=1, keepdims=True)
        probs = floored / total
        if not gradient:
            return probs
        return probs, (floored, total, raw > PRIOR_FLOOR, draw)

    def kl(self, fld: DeformationField, W, with_gradient=True):
        """sum_vc w log(w / A(theta)) + stiffness * R(theta), and its gradient."""
        probs, (floored, total, active, draw) = self.prior(fld, gradient=True)
        logw = np.log(np.where(W > 0, W, 1.0))
        value = float(np.sum(W * (logw - np.log(probs))))
        bend, bend_grad = bending_energy(fld)
        value += fld.stiffness * bend
        if not with_gradient:
            return value
        # d value / d raw_j = (-w_j / floored_j + sum_c w_c / total) on unfloored entries
        g_raw = (-W / floored + W.sum(axis=1, keepdims=True) / total) * active
        g_coord = np.einsum("vc,vcd->vd", g_raw, draw)
        g_disp = g_coord @ self.jac
        grad = (self.weights_t @ g_disp).reshape(fld.displacements.shape)
        return value, grad + fld.stiffness * bend_grad


def atlas_prior(fld: DeformationField, deformed: DeformedAtlas, voxels=None) -> np.ndarray:
    probs = deformed.prior(fld)
    return probs if voxels is None else probs[voxels]


def kl_data_term(fld: DeformationField, W, deformed: DeformedAtlas):
    return deformed.kl(fld, W)
