"""Multitask Gaussian process layer.

Hyperparameters, posterior moments of the latent values on an hourly reference
grid, and reparameterized posterior samples drawn with the Lanczos square-root
action. The batched routines here are what training differentiates through;
:func:`posterior_moments` and friends wrap them for single encounters.

Covariance model: ``cov(f_m(t), f_m'(t')) = K[m, m'] * exp(-|t - t'| / l)``
with per-variable Gaussian noise ``sigma_m^2`` on the observations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import InvalidHyperparameterError, NumericalError, ShapeError
from .krylov import (
    DEFAULT_CG_MAX_ITER,
    DEFAULT_CG_TOL,
    DEFAULT_JITTER,
    DEFAULT_KRYLOV_DIM,
    cg_solve,
    lanczos_sqrt_vec,
)

MODES = ("multitask", "independent-shared", "independent-per-variable")
_SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))


def hourly_grid(duration):
    """Reference times ``0, 1, ..., floor(duration)`` in hours."""
    return np.arange(int(np.floor(duration)) + 1, dtype=float)


def task_cov_from_factor(raw):
    """``L L^T`` where ``L`` is the lower triangle of ``raw`` with a softplus diagonal."""
    M = np.shape(ad.value(raw))[0]
    i = np.arange(M)
    diag = ad.softplus(ad.getitem(raw, (i, i)))
    L = raw * np.tril(np.ones((M, M)), -1) + np.eye(M) * diag
    return ad.matmul(L, ad.swapaxes(L, 0, 1))


@dataclass
class MgpHyperparams:
    """Unconstrained MGP parameters.

    ``task_factor`` is ignored in the two independent modes, where the task
    covariance is the identity. ``log_lengthscale`` is a scalar except in
    ``independent-per-variable`` mode, where it has one entry per variable.
    """

    task_factor: np.ndarray
    log_noise: np.ndarray
    log_lengthscale: np.ndarray
    mode: str = "multitask"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidHyperparameterError(f"unknown MGP mode {self.mode!r}")
        self.task_factor = np.asarray(self.task_factor, dtype=float)
        self.log_noise = np.asarray(self.log_noise, dtype=float).reshape(-1)
        self.log_lengthscale = np.asarray(self.log_lengthscale, dtype=float)
        M = len(self.log_noise)
        if self.task_factor.shape != (M, M):
            raise ShapeError(f"task_factor must be {M}x{M}")
        want = (M,) if self.mode == "independent-per-variable" else ()
        if self.log_lengthscale.shape != want:
            raise ShapeError(f"log_lengthscale must have shape {want} in {self.mode} mode")
        for name in ("task_factor", "log_noise", "log_lengthscale"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidHyperparameterError(f"{name} must be finite")

    @classmethod
    def initial(cls, M, mode="multitask", noise_var=0.1, length_scale=4.0):
        """Default start: ``K = I``, ``sigma^2 = 0.1``, ``l = 4`` hours."""
        ls_shape = (M,) if mode == "independent-per-variable" else ()
        return cls(
            task_factor=np.eye(M) * _SOFTPLUS_INV_ONE,
            log_noise=np.full(M, np.log(noise_var)),
            log_lengthscale=np.full(ls_shape, np.log(length_scale)),
            mode=mode,
        )

    @classmethod
    def from_values(cls, task_cov=None, noise_vars=None, length_scales=None, mode="multitask"):
        """Build from constrained values; ``task_cov`` must be positive definite."""
        noise_vars = np.asarray(noise_vars, dtype=float).reshape(-1)
        M = len(noise_vars)
        if task_cov is None or mode != "multitask":
            raw = np.eye(M) * _SOFTPLUS_INV_ONE
        else:
            L = np.linalg.cholesky(np.asarray(task_cov, dtype=float))
            raw = np.tril(L, -1) + np.diag(np.log(np.expm1(np.diag(L))))
        ls = np.asarray(length_scales, dtype=float)
        if mode == "independent-per-variable":
            ls = np.broadcast_to(ls, (M,)).copy()
        return cls(raw, np.log(noise_vars), np.log(ls), mode)

    @property
    def M(self):
        return len(self.log_noise)

    @property
    def task_cov(self):
        if self.mode != "multitask":
            return np.eye(self.M)
        return task_cov_from_factor(self.task_factor)

    @property
    def noise_vars(self):
        return np.exp(self.log_noise)

    @property
    def length_scales(self):
        """Per-variable length-scales (hours)."""
        return np.broadcast_to(np.exp(self.log_lengthscale), (self.M,)).copy()

    def tensors(self) -> dict:
        """Trainable tensors, keyed by name."""
        out = {"log_noise": self.log_noise, "log_lengthscale": self.log_lengthscale}
        if self.mode == "multitask":
            out["task_factor"] = self.task_factor
        return out

    def replace(self, **tensors) -> "MgpHyperparams":
        kw = {"task_factor": self.task_factor, "log_noise": self.log_noise,
              "log_lengthscale": self.log_lengthscale, "mode": self.mode}
        kw.update(tensors)
        return MgpHyperparams(**kw)


def resolve(tensors: dict, mode: str, M: int):
    """Constrained ``(K, noise_vars, length_scales)`` from (possibly taped) tensors.

    Length-scales come back with shape ``(1,)`` in the shared modes and
    ``(M,)`` per variable otherwise.
    """
    if mode == "multitask":
        K = task_cov_from_factor(tensors["task_factor"])
    else:
        K = np.eye(M)
    noise = ad.exp(tensors["log_noise"])
    ls = ad.exp(ad.reshape(tensors["log_lengthscale"], (-1,)))
    return K, noise, ls


# ---------------------------------------------------------------------------
# batched posterior


@dataclass
class ObservationBatch:
    """Padded observations and reference grids for ``E`` encounters."""

    ids: list
    M: int
    t: np.ndarray            # (E, N) observation times
    var: np.ndarray          # (E, N) variable index
    y: np.ndarray            # (E, N) centred values
    obs_mask: np.ndarray     # (E, N) bool
    grid: np.ndarray         # (E, X) reference times
    grid_mask: np.ndarray    # (E, X) bool
    onehot: np.ndarray = field(init=False)

    def __post_init__(self):
        self.onehot = (self.var[..., None] == np.arange(self.M)).astype(float)
        self.onehot *= self.obs_mask[..., None]

    @property
    def E(self):
        return self.t.shape[0]

    @property
    def X(self):
        return self.grid.shape[1]

    @property
    def n_grid(self):
        return self.grid_mask.sum(axis=1)

    def latent_mask(self):
        """(E, M*X) mask of real (non-padding) latent coordinates, variable-major."""
        return np.repeat(self.grid_mask[:, None, :], self.M, axis=1).reshape(self.E, -1)


def observation_batch(encounters, grids, M) -> ObservationBatch:
    """Pad observation triplets and grids of several encounters to common sizes.

    ``encounters`` need ``times``, ``variables``, ``values`` arrays and an ``id``.
    """
    E = len(encounters)
    N = max([1] + [len(e.times) for e in encounters])
    X = max([1] + [len(g) for g in grids])
    t = np.zeros((E, N))
    var = np.zeros((E, N), dtype=int)
    y = np.zeros((E, N))
    om = np.zeros((E, N), dtype=bool)
    grid = np.zeros((E, X))
    gm = np.zeros((E, X), dtype=bool)
    for i, (enc, g) in enumerate(zip(encounters, grids)):
        n = len(enc.times)
        if n and (np.min(enc.variables) < 0 or np.max(enc.variables) >= M):
            raise ShapeError(f"encounter {enc.id}: variable index outside 0..{M - 1}")
        t[i, :n] = enc.times
        var[i, :n] = enc.variables
        y[i, :n] = enc.values
        om[i, :n] = True
        grid[i, :len(g)] = g
        gm[i, :len(g)] = True
    return ObservationBatch([e.id for e in encounters], M, t, var, y, om, grid, gm)


class BatchedPosterior:
    """Posterior of the grid latents for a batch, built from (taped) hyperparameters.

    ``mean`` has shape ``(E, 1, M*X)``; :meth:`cov_action` maps ``(E, S, M*X)``
    to ``(E, S, M*X)``. Every inverse of the observation covariance is applied
    with conjugate gradients.
    """

    def __init__(self, batch: ObservationBatch, K, noise, ls, jitter=DEFAULT_JITTER,
                 cg_tol=DEFAULT_CG_TOL, cg_max_iter=DEFAULT_CG_MAX_ITER):
        self.batch = batch
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        E, N, M, X = batch.E, batch.t.shape[1], batch.M, batch.X
        O = batch.onehot
        om = batch.obs_mask.astype(float)
        gm = batch.grid_mask.astype(float)
        per_var = np.shape(ad.value(ls))[0] > 1

        # observation covariance (padding rows are identity)
        dt = np.abs(batch.t[:, :, None] - batch.t[:, None, :])
        if per_var:
            # padding rows have no variable; give them a unit length-scale
            l_obs = ad.matmul(O, ls) + (1.0 - om)
            Kt = ad.exp(-dt / ad.reshape(l_obs, (E, N, 1)))
        else:
            Kt = ad.exp(-dt / ls)
        KO = ad.matmul(K, ad.swapaxes(O, -1, -2))            # (E, M, N)
        Kg = ad.matmul(O, KO)                                # (E, N, N)
        noise_obs = ad.matmul(O, noise)                      # (E, N)
        diag = noise_obs * om + (1.0 - om)
        self.Sigma = Kg * Kt * (om[:, :, None] * om[:, None, :]) + \
            np.eye(N) * ad.reshape(diag, (E, N, 1))

        # cross covariance between grid latents and observations
        dxt = np.abs(batch.grid[:, :, None] - batch.t[:, None, :])   # (E, X, N)
        if per_var:
            Kxt = ad.exp(-dxt / ad.reshape(l_obs, (E, 1, N)))
        else:
            Kxt = ad.exp(-dxt / ls)
        Kxt = Kxt * (gm[:, :, None] * om[:, None, :])
        C = ad.reshape(KO, (E, M, 1, N)) * ad.reshape(Kxt, (E, 1, X, N))
        self.C = ad.reshape(C, (E, M * X, N))

        # prior grid correlation, one block per variable when length-scales differ
        dxx = np.abs(batch.grid[:, :, None] - batch.grid[:, None, :])
        gpair = gm[:, :, None] * gm[:, None, :]
        jit = jitter * np.eye(X) * gm[:, :, None]
        if per_var:
            KX = ad.exp(-dxx[:, None] / ad.reshape(ls, (1, M, 1, 1))) * gpair[:, None] + jit[:, None]
        else:
            KX = ad.exp(-dxx[:, None] / ls) * gpair[:, None] + jit[:, None]
        self.KX = KX                                         # (E, M or 1, X, X)
        self.K = K
        self.mean = self._mean()

    def _solve(self, rhs):
        try:
            x, _ = cg_solve(lambda z: ad.matmul(z, self.Sigma), rhs, self.cg_tol, self.cg_max_iter)
        except NumericalError as exc:
            if exc.index:
                exc.encounter_id = self.batch.ids[exc.index[0]]
                exc.args = (f"encounter {exc.encounter_id}: {exc.args[0]}",)
            raise
        return x

    def _mean(self):
        E = self.batch.E
        a = self._solve(self.batch.y.reshape(E, 1, -1))
        return ad.matmul(a, ad.swapaxes(self.C, -1, -2))

    def prior_action(self, v):
        b = self.batch
        E, M, X = b.E, b.M, b.X
        S = np.shape(ad.value(v))[1]
        V = ad.reshape(v, (E, S, M, X, 1))
        U = ad.matmul(ad.reshape(self.KX, (E, 1) + np.shape(ad.value(self.KX))[1:]), V)
        W = ad.matmul(self.K, ad.reshape(U, (E, S, M, X)))
        return ad.reshape(W, (E, S, M * X))

    def cov_action(self, v):
        w = ad.matmul(v, self.C)
        u = self._solve(w)
        return self.prior_action(v) - ad.matmul(u, ad.swapaxes(self.C, -1, -2))

    def sample(self, xi, k=DEFAULT_KRYLOV_DIM):
        """``mean + Sigma_z^{1/2} xi`` via Lanczos; ``xi`` is ``(E, S, M*X)``.

        Padding coordinates of ``xi`` are zeroed so the Krylov space stays in
        each encounter's own latent space.
        """
        xi = np.asarray(xi) * self.batch.latent_mask()[:, None, :]
        return self.mean + lanczos_sqrt_vec(self.cov_action, xi, k)


def draw_xi(batch: ObservationBatch, S, rng):
    """Standard normal draws, ``(S, M*X_e)`` per encounter in order, scattered
    into the padded ``(E, S, M*X)`` layout."""
    E, M, X = batch.E, batch.M, batch.X
    xi = np.zeros((E, S, M, X))
    for e, n in enumerate(batch.n_grid):
        xi[e, :, :, :n] = rng.standard_normal((S, M * n)).reshape(S, M, n)
    return xi.reshape(E, S, M * X)


# ---------------------------------------------------------------------------
# single-encounter interface


@dataclass
class PosteriorGaussian:
    """Posterior over ``vec(Z)`` for one encounter (variable-major, length ``M*X``)."""

    mean: np.ndarray
    cov_action: Callable
    grid_times: np.ndarray
    M: int
    X: int

    def mean_matrix(self):
        return self.mean.reshape(self.M, self.X)

    def dense_cov(self):
        """Materialize ``Sigma_z`` by applying the action to the identity."""
        n = self.M * self.X
        S = np.asarray(self.cov_action(np.eye(n)))
        return 0.5 * (S + S.T)


def _check_hp(hp: MgpHyperparams):
    if not isinstance(hp, MgpHyperparams):
        raise InvalidHyperparameterError("expected MgpHyperparams")


def _single(enc, grid_times, K, noise, ls, jitter, cg_tol, cg_max_iter):
    grid = np.asarray(grid_times, dtype=float)
    M = len(noise)
    batch = observation_batch([enc], [grid], M)
    post = BatchedPosterior(batch, K, noise, ls, jitter, cg_tol, cg_max_iter)
    n = M * len(grid)

    def cov_action(v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != n:
            raise ShapeError(f"cov_action expects length {n}, got {v.shape[-1]}")
        flat = v.reshape(1, -1, n)
        return np.asarray(post.cov_action(flat)).reshape(v.shape)

    return PosteriorGaussian(np.asarray(post.mean).reshape(n), cov_action, grid, M, len(grid))


class _VariableView:
    def __init__(self, enc, m):
        sel = np.asarray(enc.variables) == m
        self.id = enc.id
        self.times = np.asarray(enc.times)[sel]
        self.values = np.asarray(enc.values)[sel]
        self.variables = np.zeros(int(sel.sum()), dtype=int)


def posterior_moments(enc, grid_times, hp: MgpHyperparams, jitter=DEFAULT_JITTER,
                      cg_tol=DEFAULT_CG_TOL, cg_max_iter=DEFAULT_CG_MAX_ITER) -> PosteriorGaussian:
    """Posterior mean and covariance action of the latents at ``grid_times``.

    In the independent modes the computation factorizes into one univariate
    GP per variable.
    """
    _check_hp(hp)
    M = hp.M
    if hp.mode == "multitask":
        return _single(enc, grid_times, hp.task_cov, hp.noise_vars, np.exp(hp.log_lengthscale).reshape(-1),
                       jitter, cg_tol, cg_max_iter)

    ls = hp.length_scales
    noise = hp.noise_vars
    parts = [_single(_VariableView(enc, m), grid_times, np.eye(1), noise[m:m + 1], ls[m:m + 1],
                     jitter, cg_tol, cg_max_iter) for m in range(M)]
    X = parts[0].X

    def cov_action(v):
        v = np.asarray(v, dtype=float)
        return np.concatenate([p.cov_action(v[..., m * X:(m + 1) * X]) for m, p in enumerate(parts)],
                              axis=-1)

    mean = np.concatenate([p.mean for p in parts])
    return PosteriorGaussian(mean, cov_action, parts[0].grid_times, M, X)


def posterior_mean_only(enc, grid_times, hp: MgpHyperparams, **kw):
    """Posterior mean reshaped to ``M x X``."""
    return posterior_moments(enc, grid_times, hp, **kw).mean_matrix()


def sample_latents(post: PosteriorGaussian, num_samples, k=DEFAULT_KRYLOV_DIM, rng_seed=0):
    """``num_samples`` draws of ``Z`` (shape ``(S, M, X)``) via ``mu + Lanczos(Sigma, xi)``."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    n = post.M * post.X
    xi = rng.standard_normal((num_samples, n))
    z = post.mean + np.asarray(lanczos_sqrt_vec(post.cov_action, xi, k))
    return z.reshape(num_samples, post.M, post.X)
