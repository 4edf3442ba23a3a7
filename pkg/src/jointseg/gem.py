"""Generalized EM for joint structural/diffusion segmentation.

Per voxel and class, the log joint is

    log N(s_v; mu_c, Sigma_c) + log Beta(f_v; alpha_c, beta_c)
      + f_v kappa_c (psi_c . phi_v)^2 - log Z(f_v kappa_c) + log A_vc(theta)

and the objective adds ``-stiffness * R(theta)`` plus, per class, the
zero-degrees-of-freedom Normal-Inverse-Wishart log prior
``-1/2 log|Sigma_c| - n_c/2 (mu_c - M_c)' Sigma_c^-1 (mu_c - M_c)``.
After every E-step the lower bound equals this objective exactly.
"""

from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, logsumexp

from . import distributions as dist
from .atlas import DeformationField, DeformedAtlas, ProbAtlas, bending_energy, control_grid_for
from .errors import ConfigError, DataError
from .optim import minimize_cg
from .volume import Volume

log = logging.getLogger(__name__)

BETA_LOWER = 1e-3
# per-unit-mass objectives are O(1); gradients below this are at rounding level
MSTEP_ABS_GRAD = 1e-10
# the Beta and kappa subproblems are tiny, so they are solved to near machine precision
MSTEP_GRAD_TOL = 1e-10
CHUNK = 8192


@dataclass
class SharingGroups:
    """Class -> group index maps for the three parameter families."""

    gaussian: np.ndarray
    beta: np.ndarray
    dsw: np.ndarray

    def __post_init__(self):
        self.gaussian = np.asarray(self.gaussian, dtype=int)
        self.beta = np.asarray(self.beta, dtype=int)
        self.dsw = np.asarray(self.dsw, dtype=int)
        if not (self.gaussian.shape == self.beta.shape == self.dsw.shape) or self.gaussian.ndim != 1:
            raise ConfigError("sharing maps need one entry per class")

    @classmethod
    def separate(cls, n_classes):
        return cls(np.arange(n_classes), np.arange(n_classes), np.arange(n_classes))

    @property
    def n_classes(self):
        return len(self.gaussian)

    @staticmethod
    def groups(labels):
        return [np.flatnonzero(labels == g) for g in np.unique(labels)]

    def permuted(self, order):
        order = np.asarray(order)
        return SharingGroups(self.gaussian[order], self.beta[order], self.dsw[order])


@dataclass
class ClassParams:
    means: np.ndarray  # (C, d)
    covs: np.ndarray  # (C, d, d)
    alpha: np.ndarray
    beta: np.ndarray
    axes: np.ndarray  # (C, 3)
    kappa: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, float))
        n_classes, d = self.means.shape
        self.covs = np.asarray(self.covs, float).reshape(n_classes, d, d)
        self.alpha = np.asarray(self.alpha, float).reshape(n_classes)
        self.beta = np.asarray(self.beta, float).reshape(n_classes)
        self.axes = np.asarray(self.axes, float).reshape(n_classes, 3)
        self.kappa = np.asarray(self.kappa, float).reshape(n_classes)

    @property
    def n_classes(self):
        return self.means.shape[0]

    def copy(self):
        return ClassParams(self.means.copy(), self.covs.copy(), self.alpha.copy(), self.beta.copy(),
                           self.axes.copy(), self.kappa.copy())

    def permuted(self, order):
        o = np.asarray(order)
        return ClassParams(self.means[o], self.covs[o], self.alpha[o], self.beta[o], self.axes[o],
                           self.kappa[o])

    def to_dict(self, names=None):
        names = names or [f"class{c + 1}" for c in range(self.n_classes)]
        return {
            name: {
                "mean": self.means[c].tolist(),
                "cov": self.covs[c].tolist(),
                "alpha": float(self.alpha[c]),
                "beta": float(self.beta[c]),
                "axis": self.axes[c].tolist(),
                "kappa": float(self.kappa[c]),
            }
            for c, name in enumerate(names)
        }

    @classmethod
    def from_dict(cls, table, names):
        rows = [table[n] for n in names]
        return cls([r["mean"] for r in rows], [r["cov"] for r in rows], [r["alpha"] for r in rows],
                   [r["beta"] for r in rows], [r["axis"] for r in rows], [r["kappa"] for r in rows])


@dataclass
class Hyperparams:
    """NIW hypermeans (C, d) and scales (C,); scale 0 leaves the mean free."""

    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, float))
        self.scales = np.asarray(self.scales, float).reshape(self.means.shape[0])
        if np.any(self.scales < 0):
            raise ConfigError("NIW scales must be nonnegative")

    @classmethod
    def flat(cls, n_classes, n_channels=1):
        return cls(np.zeros((n_classes, n_channels)), np.zeros(n_classes))

    def permuted(self, order):
        return Hyperparams(self.means[np.asarray(order)], self.scales[np.asarray(order)])


@dataclass(eq=False)
class DiffusionFeatures:
    fa: Volume
    dirs: Volume

    def __post_init__(self):
        if self.dirs.channels != 3 or self.fa.channels != 1:
            raise DataError("diffusion features need a scalar FA and a 3-channel direction volume")
        if not self.fa.grid.same_as(self.dirs.grid):
            raise ConfigError("FA and direction volumes must share a grid")
        f = self.fa.flat()[:, 0]
        if np.any(f < 0) or np.any(f > 1):
            raise DataError("FA must lie in [0, 1]")
        norms = np.linalg.norm(self.dirs.flat(), axis=1)
        if np.any(np.abs(norms[f > 0] - 1.0) > 1e-6):
            raise DataError("principal directions must be unit vectors where FA > 0")


@dataclass
class GEMOptions:
    max_iter: int = 100
    tol: float = 1e-6
    deform_every: int = 5
    mstep_iter: int = 100
    registration_iter: int = 20
    grad_tol: float = 1e-6  # deformation update
    stiffness: float = 0.05
    control_spacing: int = 10
    var_floor: float = 1e-6
    kappa_init: float = 10.0
    threads: int = 1
    deform: bool = True


@dataclass(eq=False)
class GEMResult:
    params: ClassParams
    W: np.ndarray
    labels: Volume
    posteriors: Volume
    volumes: np.ndarray
    bound_trace: list
    field: DeformationField
    affine: np.ndarray
    mask: np.ndarray
    iterations: int
    converged: bool
    wall_time: float = 0.0


class Problem:
    """Flattened observations on the masked working voxels."""

    def __init__(self, s, fa, dirs, deformed: DeformedAtlas, hyper: Hyperparams,
                 sharing: SharingGroups, var_floor=1e-6, threads=1):
        self.s = np.asarray(s, float).reshape(len(fa), -1)
        fa = np.asarray(fa, float)
        if not (np.all(np.isfinite(self.s)) and np.all(np.isfinite(fa)) and np.all(np.isfinite(dirs))):
            raise DataError("non-finite input data")
        self.fa_beta = dist.clamp_fa(fa)
        self.log_f = np.log(self.fa_beta)
        self.log_1mf = np.log1p(-self.fa_beta)
        # below the FA clamp the direction is undefined: uniform axial density
        self.fa_dsw = np.where(fa < dist.FA_CLAMP, 0.0, fa)
        self.dirs = np.where(self.fa_dsw[:, None] > 0, dirs, np.array([1.0, 0.0, 0.0]))
        self.deformed = deformed
        self.hyper = hyper
        self.sharing = sharing
        self.threads = max(1, int(threads))
        var = np.atleast_1d(np.var(self.s, axis=0))
        self.cov_floor = var_floor * float(var.mean()) if var.mean() > 0 else var_floor

    @property
    def n_voxels(self):
        return self.s.shape[0]

    def _chunk_loglik(self, params: ClassParams, sl):
        s, f = self.s[sl], self.fa_dsw[sl]
        out = np.empty((s.shape[0], params.n_classes))
        for c in range(params.n_classes):
            cos2 = (self.dirs[sl] @ params.axes[c]) ** 2
            k_eff = f * params.kappa[c]
            logz, _ = dist.kummer_logz(k_eff)
            out[:, c] = (
                dist.gaussian_logpdf(s, params.means[c], params.covs[c])
                + (params.alpha[c] - 1.0) * self.log_f[sl]
                + (params.beta[c] - 1.0) * self.log_1mf[sl]
                - dist.log_beta_fn(params.alpha[c], params.beta[c])
                + k_eff * cos2 - logz
            )
        return out

    def log_likelihood(self, params: ClassParams) -> np.ndarray:
        """Observation log-likelihood per voxel and class, (V, C).

        Chunks are fixed-size, so the result does not depend on ``threads``.
        """
        slices = [slice(i, min(i + CHUNK, self.n_voxels)) for i in range(0, self.n_voxels, CHUNK)]
        if self.threads == 1 or len(slices) == 1:
            parts = [self._chunk_loglik(params, sl) for sl in slices]
        else:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(lambda sl: self._chunk_loglik(params, sl), slices))
        return np.concatenate(parts, axis=0)

    def log_prior_terms(self, params: ClassParams, fld: DeformationField) -> float:
        bend, _ = bending_energy(fld)
        return -fld.stiffness * bend + float(np.sum(niw_log_prior(params, self.hyper)))


def niw_log_prior(params: ClassParams, hyper: Hyperparams) -> np.ndarray:
    out = np.empty(params.n_classes)
    for c in range(params.n_classes):
        sign, logdet = np.linalg.slogdet(params.covs[c])
        diff = params.means[c] - hyper.means[c]
        out[c] = -0.5 * logdet - 0.5 * hyper.scales[c] * diff @ np.linalg.solve(params.covs[c], diff)
    return out


# -- E-step -----------------------------------------------------------------

def e_step(params: ClassParams, problem: Problem, fld: DeformationField, prior=None):
    """Responsibilities (V, C) and the lower bound at the new responsibilities."""
    if prior is None:
        prior = problem.deformed.prior(fld)
    joint = problem.log_likelihood(params) + np.log(prior)
    norm = logsumexp(joint, axis=1)
    W = np.exp(joint - norm[:, None])
    W /= W.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(W)):
        raise AssertionError("non-finite responsibilities; the model produced an invalid density")
    bound = float(np.sum(norm)) + problem.log_prior_terms(params, fld)
    return W, bound


def lower_bound(W, params: ClassParams, problem: Problem, fld: DeformationField, prior=None):
    """The Jensen bound for arbitrary responsibilities ``W``."""
    if prior is None:
        prior = problem.deformed.prior(fld)
    joint = problem.log_likelihood(params) + np.log(prior)
    entropy = -np.sum(W * np.log(np.where(W > 0, W, 1.0)))
    return float(np.sum(W * joint) + entropy) + problem.log_prior_terms(params, fld)


# -- M-steps ----------------------------------------------------------------

def _floor_cov(cov, floor):
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if np.all(evals >= floor):
        return cov
    evals = np.maximum(evals, floor)
    return (evecs * evals) @ evecs.T


def m_step_gaussian(W, s, hyper: Hyperparams, sharing: SharingGroups, params: ClassParams,
                    cov_floor=0.0) -> ClassParams:
    """Closed-form mean/covariance update, pooled over each sharing group.

    For a group G: mu = (sum_G n_c M_c + sum w s) / (sum_G n_c + sum w) and
    Sigma = (sum_G n_c (mu - M_c)(mu - M_c)' + sum w (s - mu)(s - mu)') / (|G| + sum w),
    which reduces to the per-class update for singleton groups. Covariance
    eigenvalues are floored at ``cov_floor``.
    """
    s = np.asarray(s, float).reshape(W.shape[0], -1)
    out = params.copy()
    for members in SharingGroups.groups(sharing.gaussian):
        w = W[:, members].sum(axis=1)
        mass = w.sum()
        if mass <= 1e-12:
            warnings.warn(f"empty Gaussian group {members.tolist()}; parameters held", RuntimeWarning,
                          stacklevel=2)
            continue
        n = hyper.scales[members]
        M = hyper.means[members]
        mu = (n @ M + w @ s) / (n.sum() + mass)
        diff = s - mu
        scatter = (diff * w[:, None]).T @ diff
        dm = mu - M
        scatter += (dm * n[:, None]).T @ dm
        cov = _floor_cov(scatter / (len(members) + mass), cov_floor)
        out.means[members] = mu
        out.covs[members] = cov
    return out


def beta_objective(alpha, beta, sum_log_f, sum_log_1mf, mass):
    """Weighted Beta log-likelihood and its gradient in (alpha, beta)."""
    value = ((alpha - 1.0) * sum_log_f + (beta - 1.0) * sum_log_1mf
             - mass * dist.log_beta_fn(alpha, beta))
    common = digamma(alpha + beta)
    grad = np.array([sum_log_f - mass * (digamma(alpha) - common),
                     sum_log_1mf - mass * (digamma(beta) - common)])
    return float(value), grad


def beta_init_mom(W, fa, sharing: SharingGroups, params: ClassParams) -> ClassParams:
    out = params.copy()
    f = dist.clamp_fa(fa)
    for members in SharingGroups.groups(sharing.beta):
        w = W[:, members].sum(axis=1)
        mass = w.sum()
        if mass <= 1e-12:
            out.alpha[members], out.beta[members] = 1.0, 1.0
            continue
        m = w @ f / mass
        v = w @ (f - m) ** 2 / mass
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = dist.beta_mom(m, v)
        out.alpha[members], out.beta[members] = fit.alpha, fit.beta
    return out


def m_step_beta(W, log_f, log_1mf, sharing: SharingGroups, params: ClassParams,
                max_iter=100, grad_tol=MSTEP_GRAD_TOL) -> ClassParams:
    out = params.copy()
    for members in SharingGroups.groups(sharing.beta):
        w = W[:, members].sum(axis=1)
        mass = w.sum()
        if mass <= 1e-12:
            continue
        a1, a2 = w @ log_f, w @ log_1mf

        def neg(x):
            v, g = beta_objective(x[0], x[1], a1, a2, mass)
            return -v / mass, -g / mass

        x0 = np.array([out.alpha[members[0]], out.beta[members[0]]])
        res = minimize_cg(neg, x0, lower=BETA_LOWER, max_iter=max_iter, grad_tol=grad_tol,
                          abs_grad_tol=MSTEP_ABS_GRAD)
        out.alpha[members], out.beta[members] = res.x
    return out


def m_step_psi(W, fa, dirs, sharing: SharingGroups, params: ClassParams) -> ClassParams:
    """Axis update: leading eigenvector of sum w f phi phi'."""
    out = params.copy()
    for members in SharingGroups.groups(sharing.dsw):
        w = W[:, members].sum(axis=1) * fa
        scatter = (dirs * w[:, None]).T @ dirs
        if not np.trace(scatter) > 0:
            continue
        _, evecs = np.linalg.eigh(scatter)
        out.axes[members] = canonical_sign(evecs[:, -1])
    return out


def canonical_sign(v):
    v = np.asarray(v, float)
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def kappa_objective(kappa, w, fa, cos2):
    """sum_v w f kappa cos2 - sum_v w log Z(f kappa), and its kappa derivative."""
    logz, dlogz = dist.kummer_logz(fa * kappa)
    value = kappa * np.sum(w * fa * cos2) - np.sum(w * logz)
    grad = np.sum(w * fa * (cos2 - dlogz))
    return float(value), float(grad)


def m_step_kappa(W, fa, dirs, sharing: SharingGroups, params: ClassParams,
                 max_iter=100, grad_tol=MSTEP_GRAD_TOL) -> ClassParams:
    out = params.copy()
    for members in SharingGroups.groups(sharing.dsw):
        w = W[:, members].sum(axis=1)
        keep = (w > 0) & (fa > 0)
        mass = w.sum()
        if mass <= 1e-12 or not np.any(keep):
            continue
        wk, fk = w[keep], fa[keep]
        cos2 = (dirs[keep] @ out.axes[members[0]]) ** 2

        def neg(x):
            v, g = kappa_objective(x[0], wk, fk, cos2)
            return -v / mass, np.array([-g / mass])

        res = minimize_cg(neg, [out.kappa[members[0]]], lower=0.0, upper=dist.KAPPA_MAX,
                          max_iter=max_iter, grad_tol=grad_tol, abs_grad_tol=MSTEP_ABS_GRAD)
        k = float(res.x[0])
        if k >= dist.KAPPA_MAX and neg(res.x)[1][0] < 0:
            warnings.warn("kappa reached its upper bound; clamped", RuntimeWarning, stacklevel=2)
        out.kappa[members] = k
    return out


def m_step_deformation(W, fld: DeformationField, deformed: DeformedAtlas, max_iter=20,
                       grad_tol=1e-6) -> DeformationField:
    def fun(x):
        return deformed.kl(fld.with_displacements(x), W)

    res = minimize_cg(fun, fld.displacements.ravel(), max_iter=max_iter, grad_tol=grad_tol)
    return fld.with_displacements(res.x)


# -- outputs ------------------------------------------------------------------

def hard_segmentation(W) -> np.ndarray:
    """Zero-based argmax per voxel; ties go to the lowest class index."""
    return np.argmax(np.asarray(W), axis=1)


def expected_volumes(W, voxel_volume=1.0) -> np.ndarray:
    return voxel_volume * np.asarray(W).sum(axis=0)


# -- driver -------------------------------------------------------------------

def soft_template(atlas: ProbAtlas, intensities) -> Volume:
    t = np.asarray(intensities, float)
    return Volume(atlas.grid, atlas.probs.data @ t)


def foreground_mask(deformed_full: DeformedAtlas, fld, background_idx):
    probs = deformed_full.prior(fld)
    fg = [c for c in range(probs.shape[1]) if c not in set(background_idx)]
    if len(fg) == probs.shape[1]:
        return np.ones(probs.shape[0], dtype=bool)
    return probs[:, fg].sum(axis=1) > 1e-6


def initial_params(W, problem: Problem, kappa_init=10.0) -> ClassParams:
    n_classes = W.shape[1]
    d = problem.s.shape[1]
    params = ClassParams(np.zeros((n_classes, d)), np.tile(np.eye(d), (n_classes, 1, 1)),
                         np.ones(n_classes), np.ones(n_classes),
                         np.tile([1.0, 0.0, 0.0], (n_classes, 1)), np.full(n_classes, kappa_init))
    return beta_init_mom(W, problem.fa_beta, problem.sharing, params)


def run_gem(S: Volume, D: DiffusionFeatures, atlas: ProbAtlas, hyper: Hyperparams = None,
            sharing: SharingGroups = None, opts: GEMOptions = None, affine_init=None,
            background=(), template=None, callback=None) -> GEMResult:
    """Fit the model and return parameters, soft/hard segmentations and volumes."""
    start = time.perf_counter()
    opts = opts or GEMOptions()
    grid = S.grid
    if not (grid.same_as(D.fa.grid) and grid.same_as(D.dirs.grid)):
        raise ConfigError("sMRI and diffusion features must be on the same working grid")
    n_classes = atlas.n_classes
    hyper = hyper or Hyperparams.flat(n_classes, S.channels)
    sharing = sharing or SharingGroups.separate(n_classes)
    if sharing.n_classes != n_classes or hyper.means.shape != (n_classes, S.channels):
        raise ConfigError("hyperparameters and sharing maps must match the atlas classes")
    if not np.all(np.isfinite(S.data)):
        raise DataError("non-finite sMRI data")

    if affine_init is None:
        from .affine import register_affine_mi

        if template is None:
            template = np.arange(n_classes, dtype=float)
        affine_init = register_affine_mi(
            Volume(grid, S.data[..., :1]), soft_template(atlas, template)).matrix
    affine_init = np.asarray(affine_init, float)

    control = control_grid_for(grid, opts.control_spacing)
    fld = DeformationField.zeros(control, opts.stiffness)
    mask = foreground_mask(DeformedAtlas(atlas, grid, affine_init, control), fld, background)
    deformed = DeformedAtlas(atlas, grid, affine_init, control, mask)
    problem = Problem(S.flat()[mask], D.fa.flat()[mask, 0], D.dirs.flat()[mask], deformed, hyper,
                      sharing, opts.var_floor, opts.threads)

    prior = deformed.prior(fld)
    W = prior.copy()
    params = initial_params(W, problem, opts.kappa_init)
    trace = []
    converged = False
    it = 0
    while it < opts.max_iter:
        it += 1
        params = m_step_gaussian(W, problem.s, hyper, sharing, params, problem.cov_floor)
        params = m_step_beta(W, problem.log_f, problem.log_1mf, sharing, params, opts.mstep_iter,
                             MSTEP_GRAD_TOL)
        params = m_step_psi(W, problem.fa_dsw, problem.dirs, sharing, params)
        params = m_step_kappa(W, problem.fa_dsw, problem.dirs, sharing, params, opts.mstep_iter,
                              MSTEP_GRAD_TOL)
        if opts.deform and opts.deform_every > 0 and it % opts.deform_every == 0:
            fld = m_step_deformation(W, fld, deformed, opts.registration_iter, opts.grad_tol)
            prior = deformed.prior(fld)
        W, bound = e_step(params, problem, fld, prior)
        trace.append(bound)
        log.debug("GEM iteration %d: bound %.10g", it, bound)
        if callback is not None:
            callback(it, bound, params)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < opts.tol * abs(trace[-1]):
            converged = True
            break

    labels = np.zeros(grid.n_voxels, dtype=np.int16)
    labels[mask] = hard_segmentation(W) + 1
    post = np.zeros((grid.n_voxels, n_classes))
    post[mask] = W
    return GEMResult(
        params=params,
        W=W,
        labels=Volume(grid, labels.reshape(grid.dims)),
        posteriors=Volume(grid, post.reshape(grid.dims + (n_classes,))),
        volumes=expected_volumes(W, grid.voxel_volume),
        bound_trace=trace,
        field=fld,
        affine=affine_init,
        mask=mask,
        iterations=it,
        converged=converged,
        wall_time=time.perf_counter() - start,
    )
