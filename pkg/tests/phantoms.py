"""Synthetic images with a known geometry, shared by the registration tests."""

import numpy as np

from jointseg.volume import GridSpec, Volume

# (centre offset from the grid centre in mm, radius in mm, contrast)
BLOBS = [((9, 4, -2), 3.5, 60), ((-6, 8, 3), 3.0, 90), ((-4, -9, -5), 4.0, 75),
         ((3, -3, 8), 2.5, 100), ((-10, -2, 1), 3.0, 50)]


def _sigmoid(r):
    return 1.0 / (1.0 + np.exp(-r / 0.6))


def structured_phantom(n=40, transform=None, noise=0.0, seed=0):
    """An ellipsoidal head with five off-centre blobs, optionally moved.

    The returned image is I(x) = P(T x) + noise, so registering it as the
    fixed image against the untransformed phantom must recover T.
    """
    grid = GridSpec.from_spacing((n, n, n), 1.0)
    T = np.eye(4) if transform is None else np.asarray(transform, float)
    world = grid.index_to_world(grid.voxel_indices())
    x = world @ T[:3, :3].T + T[:3, 3] - (n - 1) / 2.0
    v = 30.0 * _sigmoid(14.0 - np.linalg.norm(x / np.array([1.0, 1.2, 1.4]), axis=1))
    for c, r, a in BLOBS:
        v += a * _sigmoid(r - np.linalg.norm(x - np.asarray(c, float), axis=1))
    v += noise * np.random.default_rng(seed).standard_normal(len(x))
    return Volume(grid, v.reshape(grid.dims))


def transform_errors(found, truth, center):
    """Translation error at the centre (mm), rotation error (deg), max scale error."""
    found, truth = np.asarray(found), np.asarray(truth)
    shift = found[:3, :3] @ center + found[:3, 3] - (truth[:3, :3] @ center + truth[:3, 3])
    U, S, Vt = np.linalg.svd(found[:3, :3])
    R = U @ Vt
    cos = (np.trace(R @ truth[:3, :3].T) - 1.0) / 2.0
    angle = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    St = np.linalg.svd(truth[:3, :3], compute_uv=False)
    return float(np.linalg.norm(shift)), float(angle), float(np.max(np.abs(S / St - 1.0)))
