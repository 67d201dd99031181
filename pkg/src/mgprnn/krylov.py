"""Structured linear algebra for the Gaussian-process layer.

OU kernel matrices, Kronecker and masked-Kronecker matrix-vector products,
conjugate gradients, and the Lanczos approximation of ``Sigma^{1/2} xi``.

The solvers are written against :mod:`mgprnn.autodiff` primitives so that the
same code runs on plain arrays or records every iteration on a tape. Vectors
have shape ``(..., n)``; leading axes index independent systems that share the
matvec closure, each with its own step sizes and stopping decision.

Flattening convention is variable-major: an ``M x T`` matrix ``V`` maps to a
vector with ``flat[m * T + t] = V[m, t]`` (numpy row-major ``reshape``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidHyperparameterError, InvalidInputError, NumericalError, ShapeError

DEFAULT_JITTER = 1e-6
DEFAULT_CG_TOL = 1e-8
DEFAULT_CG_MAX_ITER = 200
DEFAULT_KRYLOV_DIM = 32
BREAKDOWN_TOL = 1e-10


def ou_kernel_matrix(times_a, times_b, length_scale):
    """OU correlation ``exp(-|a_i - b_j| / length_scale)`` between two time lists."""
    a = np.asarray(times_a, dtype=float).reshape(-1)
    b = np.asarray(times_b, dtype=float).reshape(-1)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("kernel times must be finite")
    ls = ad.value(length_scale)
    if not np.all(np.asarray(ls) > 0):
        raise InvalidHyperparameterError(f"length_scale must be positive, got {ls}")
    dist = np.abs(a[:, None] - b[None, :])
    return ad.exp(-dist / length_scale)


def flatten(V):
    """Variable-major vec of an ``M x T`` array (or a stack of them)."""
    V = np.asarray(V)
    return V.reshape(V.shape[:-2] + (V.shape[-2] * V.shape[-1],))


def unflatten(v, M, T):
    v = np.asarray(v)
    if v.shape[-1] != M * T:
        raise ShapeError(f"cannot unflatten length {v.shape[-1]} into {M}x{T}")
    return v.reshape(v.shape[:-1] + (M, T))


def kron_matvec(A, B, v):
    """``(A kron B) v`` via ``vec(A V B^T)`` without forming the Kronecker product.

    ``v`` may carry leading batch axes; its last axis has length ``p * q``.
    """
    p, q = np.shape(ad.value(A))[-1], np.shape(ad.value(B))[-1]
    n = np.shape(ad.value(v))[-1]
    if n != p * q:
        raise ShapeError(f"kron_matvec: vector length {n} != {p}*{q}")
    lead = np.shape(ad.value(v))[:-1]
    V = ad.reshape(v, lead + (p, q))
    W = ad.matmul(ad.matmul(A, V), ad.swapaxes(B, -1, -2))
    return ad.reshape(W, lead + (n,))


@dataclass
class MaskedKroneckerCov:
    """Observed-entry block of ``task_cov kron time_corr + diag(noise) kron I``.

    ``mask`` lists observed ``(variable, time_index)`` pairs; the matrix rows
    follow that order.
    """

    task_cov: np.ndarray
    time_corr: np.ndarray
    noise_vars: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=int).reshape(-1, 2)
        M = np.shape(ad.value(self.task_cov))[0]
        T = np.shape(ad.value(self.time_corr))[0]
        if len(self.mask) and (self.mask.min() < 0 or self.mask[:, 0].max() >= M
                               or self.mask[:, 1].max() >= T):
            raise ShapeError("mask index out of range")
        self.M, self.T = M, T

    @property
    def flat_index(self):
        return self.mask[:, 0] * self.T + self.mask[:, 1]

    def dense(self):
        """Materialized ``|mask| x |mask|`` matrix (for checks and small problems)."""
        K = np.kron(ad.value(self.task_cov), ad.value(self.time_corr))
        idx = self.flat_index
        S = K[np.ix_(idx, idx)]
        S[np.diag_indices_from(S)] += np.asarray(ad.value(self.noise_vars))[self.mask[:, 0]]
        return S


def masked_cov_matvec(cov: MaskedKroneckerCov, v):
    """Scatter to the full grid, apply the Kronecker product, gather, add noise."""
    n = np.shape(ad.value(v))[-1]
    if n != len(cov.mask):
        raise ShapeError(f"vector length {n} != mask length {len(cov.mask)}")
    idx = cov.flat_index
    full = np.zeros((cov.M * cov.T, n))
    full[idx, np.arange(n)] = 1.0
    # scatter as a matmul with a constant selection matrix keeps it on the tape
    scattered = ad.matmul(v, full.T)
    Kv = kron_matvec(cov.task_cov, cov.time_corr, scattered)
    gathered = ad.matmul(Kv, full)
    noise = ad.getitem(cov.noise_vars, cov.mask[:, 0])
    return gathered + noise * v


@dataclass
class CGInfo:
    converged: bool
    iterations: int
    residual: float


def _rowdot(a, b):
    return ad.sum(a * b, axis=-1, keepdims=True)


def cg_solve(apply_A, b, tol=DEFAULT_CG_TOL, max_iter=DEFAULT_CG_MAX_ITER):
    """Conjugate gradients for SPD ``A`` given only ``apply_A``.

    Returns ``(x, info)``. Each system along the leading axes stops once its
    relative residual ``||Ax - b|| / ||b||`` drops to ``tol``; systems with
    ``b = 0`` return zero without iterating. No preconditioner.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    bv = np.asarray(ad.value(b))
    bb = np.sum(bv * bv, axis=-1, keepdims=True)
    thresh = tol * tol * bb
    x = np.zeros_like(bv)
    r = b
    p = b
    rr = _rowdot(b, b)
    active = np.asarray(ad.value(rr)) > thresh
    it = 0
    while active.any() and it < max_iter:
        Ap = apply_A(p)
        pAp = _rowdot(p, Ap)
        curv = np.asarray(ad.value(pAp))
        bad = active & ~(curv > 0)
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0][:-1])
            raise NumericalError(
                f"conjugate gradient hit non-positive curvature {curv[bad][0]:.3e} "
                f"at iteration {it + 1}", index=where)
        a = active.astype(float)
        alpha = rr / ad.where(active, pAp, 1.0) * a
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = _rowdot(r, r)
        beta = rr_new / ad.where(active, rr, 1.0) * a
        p = r + beta * p
        rr = rr_new
        active = active & (np.asarray(ad.value(rr)) > thresh)
        it += 1
    rrv = np.asarray(ad.value(rr))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(bb > 0, np.sqrt(rrv / np.where(bb > 0, bb, 1.0)), 0.0)
    # recursive residual can drift from the true one; judge convergence on both
    info = CGInfo(converged=not active.any(), iterations=it, residual=float(np.max(rel, initial=0.0)))
    return x, info


def lanczos_sqrt_vec(apply_Sigma, xi, k=DEFAULT_KRYLOV_DIM, breakdown_tol=BREAKDOWN_TOL):
    """Approximate ``Sigma^{1/2} xi`` from a ``k``-step Lanczos decomposition.

    Builds orthonormal ``D = [d_1..d_k]`` and tridiagonal ``H`` with
    ``d_1 = xi / ||xi||`` and returns ``||xi|| D H^{1/2} e_1``. Each new
    direction is reorthogonalized against all previous ones (Gram-Schmidt,
    two passes). If ``beta_{j+1}`` falls below ``breakdown_tol`` the Krylov
    space is invariant and the remaining directions are zeroed, which is the
    same as stopping at ``k = j``.
    """
    if k < 1:
        raise InvalidInputError("Krylov dimension k must be >= 1")
    xv = np.asarray(ad.value(xi))
    n = xv.shape[-1]
    k = min(int(k), n)
    norm2 = np.sum(xv * xv, axis=-1, keepdims=True)
    if np.any(norm2 == 0):
        raise InvalidInputError("xi must be nonzero")
    xnorm = ad.sqrt(_rowdot(xi, xi))
    d = xi / xnorm
    ds = [d]
    alphas, betas = [], []
    d_prev, beta = None, None
    active = np.ones(norm2.shape, dtype=bool)
    for j in range(k):
        w = apply_Sigma(d)
        if d_prev is not None:
            w = w - beta * d_prev
        alpha = _rowdot(d, w)
        w = w - alpha * d
        alphas.append(alpha)
        if j == k - 1:
            break
        Q = ad.stack(ds, axis=-2)
        for _ in range(2):
            coef = ad.matmul(Q, ad.reshape(w, np.shape(ad.value(w)) + (1,)))
            w = w - ad.sum(coef * Q, axis=-2)
        ss = _rowdot(w, w)
        active = active & (np.sqrt(np.asarray(ad.value(ss))) >= breakdown_tol)
        a = active.astype(float)
        beta = ad.sqrt(ad.where(active, ss, 1.0)) * a
        d_prev, d = d, w / ad.where(active, beta, 1.0) * a
        betas.append(beta)
        ds.append(d)
    alpha = ad.concat(alphas, axis=-1)
    beta_vec = ad.concat(betas, axis=-1) if betas else np.zeros(norm2.shape[:-1] + (0,))
    y = ad.tridiag_sqrt_e1(alpha, beta_vec)
    D = ad.stack(ds, axis=-1)
    lead = np.shape(ad.value(y))
    out = ad.reshape(ad.matmul(D, ad.reshape(y, lead + (1,))), lead[:-1] + (n,))
    return xnorm * out


def dense_sqrt(Sigma):
    """Symmetric PSD square root by eigendecomposition (reference path)."""
    lam, U = np.linalg.eigh(np.asarray(Sigma))
    return (U * np.sqrt(np.maximum(lam, 0.0))) @ U.T
