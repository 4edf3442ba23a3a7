import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointseg.affine import (AffineTransform, RegistrationOptions, downsample, entropy, grid_center,
                             identity_params, joint_histogram, mutual_information, params_to_matrix,
                             register_affine_mi, rotation_matrix)
from jointseg.errors import DataError, OverlapError
from jointseg.volume import GridSpec, Volume
from phantoms import structured_phantom, transform_errors


@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3))
def test_rotation_is_orthonormal(angles):
    R = rotation_matrix(*angles)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_params_compose_about_centre():
    c = np.array([10.0, -5.0, 3.0])
    p = identity_params()
    p[3:6] = [0.1, -0.2, 0.3]
    p[6:9] = [1.1, 0.9, 1.05]
    M = params_to_matrix(p, c)
    np.testing.assert_allclose(M[:3, :3] @ c + M[:3, 3], c, atol=1e-12)
    p[:3] = [1.0, 2.0, 3.0]
    M = params_to_matrix(p, c)
    np.testing.assert_allclose(M[:3, :3] @ c + M[:3, 3], c + [1, 2, 3], atol=1e-12)
    np.testing.assert_allclose(params_to_matrix(identity_params(), c), np.eye(4))
    T = AffineTransform(M)
    np.testing.assert_allclose(T.inverse().apply(T.apply(c)), c, atol=1e-12)


def test_joint_histogram_mass_and_partial_volume():
    x = np.array([0.0, 0.5, 1.0, 0.25])
    h = joint_histogram(x, x, 3)
    assert h.sum() == pytest.approx(4.0)
    # 0.25 sits halfway between bin centres 0 and 0.5
    assert h[0, 0] == pytest.approx(1.25) and h[0, 1] == pytest.approx(0.25)


def test_mi_of_image_with_itself_is_its_entropy(rng):
    # values on bin centres give a diagonal joint histogram
    bins = 32
    vals = rng.integers(0, bins, (16, 16, 16)) / (bins - 1)
    vol = Volume(GridSpec.from_spacing((16, 16, 16)), vals)
    mi = mutual_information(vol, vol, bins=bins, scale=False)
    assert mi == pytest.approx(entropy(vals.ravel(), bins), rel=1e-12)


def test_mi_of_independent_noise_is_small():
    rng = np.random.default_rng(21)
    g = GridSpec.from_spacing((64, 64, 64))
    a, b = Volume(g, rng.random(g.dims)), Volume(g, rng.random(g.dims))
    assert 0.0 <= mutual_information(a, b) < 0.05


def test_mi_symmetry_under_inverse():
    a = structured_phantom(24)
    b = structured_phantom(24, params_to_matrix([3, -2, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0]), noise=2.0)
    T = np.eye(4)
    T[:3, 3] = [3.0, -2.0, 1.0]
    # integer shifts sample voxel centres, so the shared overlap is identical in both directions
    fwd = mutual_information(a, b, T)
    bwd = mutual_information(b, a, np.linalg.inv(T))
    assert fwd == pytest.approx(bwd, rel=1e-12)


def test_mi_errors():
    g = GridSpec.from_spacing((8, 8, 8))
    v = Volume(g, np.random.default_rng(0).random(g.dims))
    far = np.eye(4)
    far[:3, 3] = 100.0
    with pytest.raises(OverlapError):
        mutual_information(v, v, far)
    with pytest.raises(ValueError):
        mutual_information(v, v, bins=4)
    with pytest.raises(DataError):
        register_affine_mi(Volume(g, np.ones(g.dims)), v)


def test_downsample_keeps_world_positions():
    g = GridSpec.from_spacing((8, 8, 8), 1.5, origin=(2, 3, 4))
    v = Volume(g, np.indices((8, 8, 8))[0].astype(float))
    d = downsample(v, 2)
    assert d.grid.dims == (4, 4, 4)
    # the coarse voxel value equals the average index, located at the block centre
    centre = d.grid.index_to_world(np.array([[1.0, 0.0, 0.0]]))[0]
    np.testing.assert_allclose(g.world_to_index(centre[None])[0, 0], d.data[1, 0, 0, 0])


def test_identical_images_return_identity():
    v = structured_phantom(24, noise=3.0)
    with pytest.warns(RuntimeWarning, match="identity"):
        T = register_affine_mi(v, v)
    np.testing.assert_array_equal(T.matrix, np.eye(4))


def test_no_spurious_drift():
    fixed = structured_phantom(40, noise=3.0)
    moving = structured_phantom(40)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        T = register_affine_mi(fixed, moving)
    shift, angle, scale = transform_errors(T.matrix, np.eye(4), grid_center(fixed.grid))
    assert shift < 0.5 and angle < 0.5 and scale < 0.01


def test_registration_is_deterministic():
    fixed = structured_phantom(24, params_to_matrix([2, 0, 0, 0, 0, 0.05, 1, 1, 1, 0, 0, 0],
                                                    [11.5] * 3), noise=3.0)
    moving = structured_phantom(24)
    opts = RegistrationOptions(levels=2)
    a = register_affine_mi(fixed, moving, opts)
    b = register_affine_mi(fixed, moving, opts)
    np.testing.assert_array_equal(a.matrix, b.matrix)
