"""Sample complete datasets from the forward model, with ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import distributions as dist
from .atlas import DeformationField, DeformedAtlas, ProbAtlas, control_grid_for
from .gem import ClassParams, DiffusionFeatures
from .volume import GridSpec, Volume

DEFAULT_SHAPE = (32, 32, 32)
DEFAULT_NAMES = ["background", "blob_a", "blob_b", "blob_c"]


@dataclass(eq=False)
class GroundTruth:
    labels: Volume  # 1..C
    params: ClassParams
    deformation: DeformationField
    seed: int


def default_atlas(shape=DEFAULT_SHAPE, spacing=1.0, n_classes=4, width=5.0, peak=8.0) -> ProbAtlas:
    """Background plus ``n_classes - 1`` fuzzy blobs arranged around the centre.

    Blob k has unnormalized weight ``peak * exp(-d^2 / (2 width^2))`` against
    a background weight of one.
    """
    grid = GridSpec.from_spacing(shape, spacing)
    idx = grid.voxel_indices().astype(float)
    centre = (np.asarray(shape, float) - 1.0) / 2.0
    radius = 0.19 * min(shape)
    scores = [np.ones(len(idx))]
    for k in range(n_classes - 1):
        ang = 2.0 * np.pi * k / max(n_classes - 1, 1) + np.pi / 6
        c = centre + radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        d2 = np.sum((idx - c) ** 2, axis=1) * spacing ** 2
        scores.append(peak * np.exp(-d2 / (2.0 * width ** 2)))
    scores = np.stack(scores, axis=1)
    probs = scores / scores.sum(axis=1, keepdims=True)
    names = DEFAULT_NAMES[:n_classes] if n_classes <= len(DEFAULT_NAMES) else None
    return ProbAtlas(Volume(grid, probs.reshape(tuple(shape) + (n_classes,))), names or [])


def default_truth(n_classes=4) -> ClassParams:
    means = np.array([[20.0], [50.0], [80.0], [110.0]])
    var = np.array([25.0, 25.0, 25.0, 25.0])
    alpha = np.array([2.0, 6.0, 4.0, 8.0])
    beta = np.array([6.0, 4.0, 4.0, 3.0])
    axes = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                     np.ones(3) / np.sqrt(3.0)])
    kappa = np.array([8.0, 30.0, 20.0, 40.0])
    sel = slice(0, n_classes)
    return ClassParams(means[sel], var[sel, None, None], alpha[sel], beta[sel], axes[sel],
                       kappa[sel])


def sample_dataset(atlas: ProbAtlas, truth: ClassParams, fld: DeformationField = None,
                   grid: GridSpec = None, seed=0, affine_init=None):
    """Draw (S, diffusion features, ground truth) voxel by voxel.

    labels ~ Cat(A_v), s ~ N(mu_l, Sigma_l), f ~ Beta(alpha_l, beta_l),
    phi ~ DSW(psi_l, f * kappa_l). A single PCG64 stream seeded by ``seed``
    is consumed in a fixed order, so equal seeds give identical datasets.
    """
    grid = grid or atlas.grid
    fld = fld or DeformationField.zeros(control_grid_for(grid))
    rng = np.random.default_rng(seed)
    probs = DeformedAtlas(atlas, grid, affine_init, fld.control).prior(fld)
    n_vox, n_classes = probs.shape
    cum = np.cumsum(probs, axis=1)
    u = rng.random(n_vox)
    labels = np.minimum((u[:, None] >= cum).sum(axis=1), n_classes - 1)

    d = truth.means.shape[1]
    s = np.empty((n_vox, d))
    fa = np.empty(n_vox)
    dirs = np.empty((n_vox, 3))
    z = rng.standard_normal((n_vox, d))
    for c in range(n_classes):
        sel = np.flatnonzero(labels == c)
        chol = np.linalg.cholesky(truth.covs[c])
        s[sel] = truth.means[c] + z[sel] @ chol.T
        fa[sel] = rng.beta(truth.alpha[c], truth.beta[c], size=sel.size)
    fa = np.clip(fa, dist.FA_CLAMP, 1.0 - dist.FA_CLAMP)
    for c in range(n_classes):
        sel = np.flatnonzero(labels == c)
        if sel.size:
            dirs[sel] = dist.sample_dsw(truth.axes[c], fa[sel] * truth.kappa[c], rng)

    S = Volume(grid, s.reshape(grid.dims + (d,)))
    D = DiffusionFeatures(Volume(grid, fa.reshape(grid.dims)), Volume(grid, dirs.reshape(grid.dims + (3,))))
    lab = Volume(grid, (labels + 1).astype(np.int16).reshape(grid.dims))
    return S, D, GroundTruth(lab, truth.copy(), fld, int(seed))


def dice(a, b, label) -> float:
    a = np.asarray(a) == label
    b = np.asarray(b) == label
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * np.sum(a & b) / denom
