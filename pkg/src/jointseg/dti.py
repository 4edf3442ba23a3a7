"""Diffusion tensor fit and the two observables used by the model (FA and principal axis)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError
from .volume import TensorVolume, Volume

B0_THRESHOLD = 50.0
SHELL_TOL = 100.0
SIGNAL_FLOOR = 1e-6
BVEC_TOL = 1e-3
DIRECTION_TOL = 1e-3


@dataclass(eq=False)
class DWIProtocol:
    """b-values (s/mm^2) and gradient directions, one pair per DWI channel."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=float).ravel()
        bvecs = np.asarray(self.bvecs, dtype=float)
        if bvecs.ndim == 2 and bvecs.shape[0] == 3 and bvecs.shape[1] != 3:
            bvecs = bvecs.T
        if bvecs.ndim != 2 or bvecs.shape[1] != 3:
            raise ProtocolError("bvecs must hold three components per channel")
        self.bvecs = bvecs
        if len(self.bvals) != len(self.bvecs):
            raise ProtocolError(f"{len(self.bvals)} b-values but {len(self.bvecs)} gradient directions")
        if np.any(~np.isfinite(self.bvals)) or np.any(self.bvals < 0):
            raise ProtocolError("b-values must be finite and nonnegative")
        if not np.any(self.b0_mask):
            raise ProtocolError(f"no b=0 channel (b <= {B0_THRESHOLD:g})")
        dw = ~self.b0_mask
        norms = np.linalg.norm(self.bvecs[dw], axis=1)
        if np.any(np.abs(norms - 1.0) > BVEC_TOL):
            raise ProtocolError("diffusion-weighted gradient directions must be unit vectors")
        n_dirs = count_directions(self.bvecs[dw])
        if n_dirs < 6:
            raise ProtocolError(f"need at least 6 distinct gradient directions, found {n_dirs}")

    @property
    def n_channels(self):
        return len(self.bvals)

    @property
    def b0_mask(self):
        return self.bvals <= B0_THRESHOLD

    def shell_channels(self, shell=None):
        """Indices of the b=0 channels plus the channels of one shell."""
        if shell is None:
            return np.arange(self.n_channels)
        keep = self.b0_mask | (np.abs(self.bvals - shell) <= SHELL_TOL)
        if not np.any(keep & ~self.b0_mask):
            raise ProtocolError(f"no channels in the b={shell:g} shell")
        return np.flatnonzero(keep)

    def select(self, channels):
        return DWIProtocol(self.bvals[channels], self.bvecs[channels])


def count_directions(dirs, tol=DIRECTION_TOL):
    """Number of distinct axes (g and -g are the same axis)."""
    kept = []
    for g in np.asarray(dirs, float):
        g = g / np.linalg.norm(g)
        if all(1.0 - abs(g @ k) > tol for k in kept):
            kept.append(g)
    return len(kept)


def design_matrix(bvals, bvecs):
    """Rows [1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz]."""
    b = np.asarray(bvals, float)
    g = np.asarray(bvecs, float)
    return np.column_stack([
        np.ones_like(b),
        -b * g[:, 0] ** 2, -b * g[:, 1] ** 2, -b * g[:, 2] ** 2,
        -2 * b * g[:, 0] * g[:, 1], -2 * b * g[:, 0] * g[:, 2], -2 * b * g[:, 1] * g[:, 2],
    ])


def synthesize_dwi(tensors, s0, proto: DWIProtocol):
    """Noiseless signals S0 exp(-b g^T D g); ``tensors`` is (..., 3, 3)."""
    tensors = np.asarray(tensors, float)
    q = np.einsum("ni,...ij,nj->...n", proto.bvecs, tensors, proto.bvecs)
    return np.asarray(s0, float)[..., None] * np.exp(-proto.bvals * q)


def _fit_signals(signals, X):
    """WLS fit of the seven log-linear coefficients for signals of shape (V, N)."""
    b0 = X[:, 1:].sum(axis=1) == 0  # rows with no diffusion weighting
    s0_mean = signals[:, b0].mean(axis=1)
    floor = SIGNAL_FLOOR * np.where(s0_mean > 0, s0_mean, 1.0)
    y = np.log(np.maximum(signals, floor[:, None]))
    coef = np.linalg.lstsq(X, y.T, rcond=None)[0].T
    w = np.exp(2.0 * (coef @ X.T))  # squared predicted signals
    w /= w.max(axis=1, keepdims=True)
    A = np.einsum("ni,vn,nj->vij", X, w, X)
    rhs = np.einsum("ni,vn,vn->vi", X, w, y)
    return np.linalg.solve(A, rhs[..., None])[..., 0], s0_mean > 0


def fit_dti_wls(dwi: Volume, proto: DWIProtocol, shell=None, chunk=65536) -> TensorVolume:
    """Weighted least-squares tensor fit with one reweighting pass.

    OLS on log signals gives the first estimate; the weights of the second
    solve are the squared predicted signals. Voxels whose mean b=0 signal is
    not positive get a zero tensor.
    """
    if dwi.channels != proto.n_channels:
        raise ProtocolError(f"DWI has {dwi.channels} channels but the protocol lists {proto.n_channels}")
    chans = proto.shell_channels(shell)
    sub = proto.select(chans) if shell is not None else proto
    X = design_matrix(sub.bvals, sub.bvecs)
    if np.linalg.matrix_rank(X) < 7:
        raise ProtocolError("rank-deficient tensor design (collinear gradient directions)")
    signals = dwi.flat()[:, chans].astype(float)
    out = np.zeros((signals.shape[0], 6))
    for start in range(0, signals.shape[0], chunk):
        part = signals[start:start + chunk]
        coef, ok = _fit_signals(part, X)
        out[start:start + chunk] = np.where(ok[:, None], coef[:, 1:], 0.0)
    return TensorVolume(dwi.grid, out.reshape(dwi.grid.dims + (6,)))


def fractional_anisotropy(evals):
    """FA from eigenvalues on the last axis; zero for the zero tensor."""
    lam = np.asarray(evals, float)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    den = np.sum(lam * lam, axis=-1)
    fa = np.sqrt(0.5 * num / np.where(den > 0, den, 1.0))
    return np.where(den > 0, np.clip(fa, 0.0, 1.0), 0.0)


def sign_convention(vecs):
    """Flip each row so its first nonzero component is positive."""
    vecs = np.array(vecs, dtype=float)
    nz = np.abs(vecs) > 1e-12
    first = np.argmax(nz, axis=-1)
    lead = np.take_along_axis(vecs, first[..., None], axis=-1)[..., 0]
    return np.where((lead < 0)[..., None], -vecs, vecs)


def tensor_features(T: TensorVolume):
    """FA and principal eigenvector, returned as DiffusionFeatures."""
    from .gem import DiffusionFeatures

    mats = T.matrices().reshape(-1, 3, 3)
    mats = 0.5 * (mats + np.swapaxes(mats, 1, 2))
    evals, evecs = np.linalg.eigh(mats)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    phi = sign_convention(evecs[:, :, -1])
    fa = fractional_anisotropy(evals)
    zero = ~np.any(mats.reshape(-1, 9) != 0, axis=1) | (evals[:, 0] <= 0)
    fa[zero] = 0.0
    phi[zero] = (1.0, 0.0, 0.0)
    grid = T.grid
    return DiffusionFeatures(Volume(grid, fa.reshape(grid.dims)), Volume(grid, phi.reshape(grid.dims + (3,))))


def tensor_from_features(fa, axis, md=0.7e-3):
    """An axially symmetric tensor with the given FA, principal axis and mean diffusivity.

    Eigenvalues (l1, l2, l2) with l1 >= l2 >= 0 solved in closed form.
    """
    fa = float(fa)
    if not 0.0 <= fa < 1.0 + 1e-12:
        raise ValueError("FA must lie in [0, 1]")
    # with l1 = md (1 + 2x), l2 = md (1 - x): FA^2 = 3 x^2 / (1 + 2 x^2)
    x = min(np.sqrt(fa * fa / (3.0 - 2.0 * fa * fa)), 1.0)
    l1, l2 = md * (1.0 + 2.0 * x), md * (1.0 - x)
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    return l2 * np.eye(3) + (l1 - l2) * np.outer(a, a)


__all__ = [
    "DWIProtocol", "design_matrix", "fit_dti_wls", "fractional_anisotropy",
    "sign_convention", "synthesize_dwi", "tensor_features", "tensor_from_features",
]
