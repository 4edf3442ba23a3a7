import numpy as np
import pytest

from jointseg import synth
from jointseg.atlas import (PRIOR_FLOOR, DeformationField, DeformedAtlas, ProbAtlas, bending_energy,
                            control_grid_for, deform_point)
from jointseg.errors import DataError
from jointseg.gem import m_step_deformation
from jointseg.volume import GridSpec, Volume


def _affine_field(control, A, t):
    world = control.index_to_world(control.voxel_indices().astype(float))
    return DeformationField(control, world @ A.T + t)


def test_affine_fields_have_zero_bending(rng):
    control = GridSpec.from_spacing((5, 4, 6), (2.0, 3.0, 1.5), origin=(1, -2, 0))
    fld = _affine_field(control, rng.standard_normal((3, 3)), rng.standard_normal(3))
    val, grad = bending_energy(fld)
    scale = np.sum(fld.displacements ** 2)
    assert abs(val) < 1e-12 * scale
    assert np.max(np.abs(grad)) < 1e-10 * np.sqrt(scale)


def test_bending_quadratic_is_positive_and_gradient_fd(rng):
    control = GridSpec.from_spacing((4, 5, 3), (2.0, 1.0, 3.0))
    fld = DeformationField(control, rng.standard_normal(control.dims + (3,)))
    val, grad = bending_energy(fld)
    assert val > 0
    h = 1e-6
    flat = fld.displacements.ravel()
    for i in rng.choice(flat.size, 15, replace=False):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (bending_energy(fld.with_displacements(flat + e))[0]
              - bending_energy(fld.with_displacements(flat - e))[0]) / (2 * h)
        assert grad.ravel()[i] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_kl_gradient_finite_difference(rng):
    atlas = synth.default_atlas((12, 12, 12), width=2.5)
    grid = atlas.grid
    deformed = DeformedAtlas(atlas, grid, control=control_grid_for(grid, 4))
    fld = DeformationField(deformed.control, 0.4 * rng.standard_normal(deformed.control.dims + (3,)))
    W = rng.dirichlet(np.ones(4), size=deformed.n_voxels)
    val, grad = deformed.kl(fld, W)
    flat = fld.displacements.ravel()
    h = 1e-6
    for i in rng.choice(flat.size, 20, replace=False):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (deformed.kl(fld.with_displacements(flat + e), W, False)
              - deformed.kl(fld.with_displacements(flat - e), W, False)) / (2 * h)
        assert grad.ravel()[i] == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_prior_is_normalized_and_floored(default_atlas):
    deformed = DeformedAtlas(default_atlas, default_atlas.grid)
    fld = DeformationField.zeros(deformed.control)
    p = deformed.prior(fld)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert p.min() >= PRIOR_FLOOR / 2
    # identity mapping reproduces the atlas voxel values
    np.testing.assert_allclose(p, default_atlas.probs.flat(), atol=1e-12)


def test_deform_point_matches_deformed_coords(rng, default_atlas):
    grid = default_atlas.grid
    deformed = DeformedAtlas(default_atlas, grid)
    fld = DeformationField(deformed.control, rng.standard_normal(deformed.control.dims + (3,)))
    coords = deformed.coords(fld)
    for v in rng.choice(grid.n_voxels, 5, replace=False):
        idx = grid.voxel_indices()[v]
        np.testing.assert_allclose(deform_point(fld, idx, np.eye(4), grid, grid), coords[v], atol=1e-10)


def test_two_voxel_shift_is_recovered(default_atlas):
    # responsibilities are the atlas moved by +2 mm along x; the deformation must find it
    grid = default_atlas.grid
    shift = np.eye(4)
    shift[0, 3] = 2.0
    W = DeformedAtlas(default_atlas, grid, shift).prior(DeformationField.zeros(control_grid_for(grid)))
    deformed = DeformedAtlas(default_atlas, grid)
    fld = m_step_deformation(W, DeformationField.zeros(deformed.control), deformed, max_iter=200)
    inner = fld.displacements[1:-1, 1:-1, 1:-1]
    np.testing.assert_allclose(inner[..., 0], 2.0, atol=0.1)
    np.testing.assert_allclose(inner[..., 1:], 0.0, atol=0.1)


def test_atlas_validation():
    g = GridSpec.from_spacing((2, 2, 2))
    with pytest.raises(DataError):
        ProbAtlas(Volume(g, np.full((2, 2, 2, 2), 0.4)))
    with pytest.raises(DataError):
        ProbAtlas(Volume(g, np.full((2, 2, 2, 2), 0.5)), ["only_one"])
    with pytest.raises(DataError):
        control_grid_for(g, 1)
