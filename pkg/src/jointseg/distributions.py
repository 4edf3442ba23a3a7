"""Likelihood building blocks: Gaussian, Beta and the axial Watson (DSW) law.

DSW log-densities are ``kappa * (psi.phi)**2 - logZ``, i.e. with respect to
the uniform probability measure on the sphere; they are zero everywhere when
``kappa == 0``. Per unit solid angle the density is ``exp(logpdf) / (4 pi)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import dawsn, digamma, gammaln

from .errors import DecompositionError, DomainError

KAPPA_MAX = 5000.0
FA_CLAMP = 1e-6
UNIT_TOL = 1e-6

_SERIES_CUTOFF = 1.0
_SERIES_TERMS = 30


@dataclass
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))


@dataclass
class NIWHyper:
    mean: np.ndarray
    scale: float = 0.0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if self.scale < 0 or not np.all(np.isfinite(self.mean)):
            raise DomainError("NIW scale must be >= 0 and the hypermean finite")


@dataclass
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise DomainError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")


@dataclass
class DSWParams:
    axis: np.ndarray
    kappa: float

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-10:
            raise DomainError("DSW axis must be a unit vector")
        if not 0.0 <= self.kappa <= KAPPA_MAX:
            raise DomainError(f"kappa must lie in [0, {KAPPA_MAX}]")


# -- Gaussian ---------------------------------------------------------------

def gaussian_logpdf(s, mean, cov):
    """Multivariate normal log-density; ``s`` has shape (..., d)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    s = np.asarray(s, dtype=float)
    if s.ndim == 0 or s.shape[-1] != mean.shape[0]:
        s = s[..., None]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("covariance is not symmetric positive definite") from exc
    diff = (s - mean).reshape(-1, mean.shape[0])
    z = np.linalg.solve(chol, diff.T)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (maha + logdet + mean.shape[0] * np.log(2 * np.pi))
    return out.reshape(s.shape[:-1]) if s.ndim > 1 else float(out[0])


# -- Beta -------------------------------------------------------------------

def log_beta_fn(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise DomainError("log Beta needs positive arguments")
    return gammaln(a) + gammaln(b) - gammaln(a + b)


def clamp_fa(f):
    f = np.asarray(f, dtype=float)
    if np.any(~np.isfinite(f)) or np.any(f < 0) or np.any(f > 1):
        raise DomainError("FA values must lie in [0, 1]")
    return np.clip(f, FA_CLAMP, 1.0 - FA_CLAMP)


def beta_logpdf(f, alpha, beta):
    f = clamp_fa(f)
    return (alpha - 1.0) * np.log(f) + (beta - 1.0) * np.log1p(-f) - log_beta_fn(alpha, beta)


def beta_mom(mean, var) -> BetaParams:
    """Method-of-moments Beta fit; falls back to the uniform Beta(1, 1)."""
    if not (0.0 < mean < 1.0) or not (0.0 < var < mean * (1.0 - mean)):
        warnings.warn(
            f"method of moments undefined for mean={mean:.4g}, var={var:.4g}; using Beta(1, 1)",
            RuntimeWarning,
            stacklevel=2,
        )
        return BetaParams(1.0, 1.0)
    common = mean * (1.0 - mean) / var - 1.0
    return BetaParams(mean * common, (1.0 - mean) * common)


# -- Kummer partition function and DSW ----------------------------------------

def kummer_logz(kappa):
    """log Z(kappa) and d log Z / d kappa for Z(kappa) = int_0^1 exp(kappa t^2) dt.

    Below kappa = 1 the power series sum kappa^n / (n! (2n + 1)) is summed
    directly. Above, Z(kappa) = exp(kappa) F(sqrt kappa) / sqrt kappa with F
    the Dawson integral, so log Z never forms exp(kappa) and
    d log Z / d kappa = 1 / (2 sqrt(kappa) F(sqrt kappa)) - 1 / (2 kappa).
    """
    kappa = np.asarray(kappa, dtype=float)
    if np.any(~np.isfinite(kappa)) or np.any(kappa < 0) or np.any(kappa > KAPPA_MAX):
        raise DomainError(f"kappa must lie in [0, {KAPPA_MAX}]")
    flat = kappa.ravel()
    logz = np.empty_like(flat)
    dlogz = np.empty_like(flat)

    small = flat < _SERIES_CUTOFF
    if np.any(small):
        k = flat[small]
        term = np.ones_like(k)  # kappa^n / n!
        zm1 = np.zeros_like(k)
        dz = np.zeros_like(k)
        for n in range(1, _SERIES_TERMS):
            dz += term / (2 * n + 1)  # kappa^(n-1)/(n-1)! / (2n+1)
            term = term * k / n
            zm1 += term / (2 * n + 1)
        logz[small] = np.log1p(zm1)
        dlogz[small] = dz / (1.0 + zm1)

    big = ~small
    if np.any(big):
        k = flat[big]
        root = np.sqrt(k)
        daw = dawsn(root)
        logz[big] = k + np.log(daw) - 0.5 * np.log(k)
        dlogz[big] = 0.5 / (root * daw) - 0.5 / k

    logz = logz.reshape(kappa.shape)
    dlogz = dlogz.reshape(kappa.shape)
    if kappa.ndim == 0:
        return float(logz), float(dlogz)
    return logz, dlogz


def dsw_logpdf(phi, axis, kappa):
    """Axial Watson log-density; ``kappa`` may be per-sample (FA-modulated)."""
    phi = np.asarray(phi, dtype=float)
    norms = np.linalg.norm(phi, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise DomainError("DSW argument must be a unit vector")
    cos2 = (phi @ np.asarray(axis, dtype=float)) ** 2
    logz, _ = kummer_logz(kappa)
    return kappa * cos2 - logz


def _orthonormal_frame(axis):
    axis = np.asarray(axis, dtype=float)
    helper = np.eye(3)[np.argmin(np.abs(axis))]
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


def sample_dsw(axis, kappa, rng, size=None):
    """Draw unit axes from DSW(axis, kappa).

    ``t = axis . phi`` is drawn by rejection: a uniform proposal when
    kappa <= 1, otherwise a truncated exponential proposal on ``1 - |t|``
    (acceptance stays near one half for any kappa). The azimuth is uniform.
    ``kappa`` may be an array of per-sample concentrations.
    """
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    kappa = np.asarray(kappa, dtype=float)
    if size is None:
        size = kappa.shape
    size = (size,) if np.isscalar(size) else tuple(size)
    kappa = np.broadcast_to(kappa, size).ravel()
    if np.any(kappa < 0):
        raise DomainError("sample_dsw needs kappa >= 0")
    n = kappa.size
    t = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        k = kappa[todo]
        u1 = rng.random(todo.size)
        u2 = rng.random(todo.size)
        sign = np.where(rng.random(todo.size) < 0.5, -1.0, 1.0)
        low = k <= 1.0
        cand = np.empty(todo.size)
        accept = np.empty(todo.size, dtype=bool)
        # uniform proposal on [-1, 1]
        cand[low] = 2.0 * u1[low] - 1.0
        accept[low] = u2[low] <= np.exp(k[low] * (cand[low] ** 2 - 1.0))
        # s = 1 - |t| ~ Exp(kappa) truncated to [0, 1]
        kh = k[~low]
        s = -np.log1p(-u1[~low] * -np.expm1(-kh)) / kh
        cand[~low] = sign[~low] * (1.0 - s)
        accept[~low] = u2[~low] <= np.exp(-kh * s * (1.0 - s))
        t[todo[accept]] = cand[accept]
        todo = todo[~accept]
    u, v = _orthonormal_frame(axis)
    az = 2.0 * np.pi * rng.random(n)
    r = np.sqrt(np.clip(1.0 - t * t, 0.0, None))
    out = t[:, None] * axis + (r * np.cos(az))[:, None] * u + (r * np.sin(az))[:, None] * v
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(size + (3,))


# -- parameter derivatives used by the M-steps --------------------------------

def beta_dlogpdf(f, alpha, beta):
    """Gradient of beta_logpdf with respect to (alpha, beta)."""
    f = clamp_fa(f)
    common = digamma(alpha + beta)
    return np.log(f) - digamma(alpha) + common, np.log1p(-f) - digamma(beta) + common
