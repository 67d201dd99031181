import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgprnn import autodiff as ad
from mgprnn.data import make_record
from mgprnn.errors import InvalidHyperparameterError, ShapeError
from mgprnn.krylov import ou_kernel_matrix
from mgprnn.mgp import (
    BatchedPosterior,
    MgpHyperparams,
    hourly_grid,
    observation_batch,
    posterior_mean_only,
    posterior_moments,
    resolve,
    sample_latents,
    task_cov_from_factor,
)

from conftest import dense_posterior, toy_encounter


def rec(obs, duration=5.0, enc_id="e"):
    return make_record(enc_id, [], obs, [], 0, duration, n_meds=0)


def random_hp(r, M, mode="multitask"):
    L = np.tril(r.standard_normal((M, M))) + 1.5 * np.eye(M)
    K = L @ L.T if mode == "multitask" else None
    ls = r.uniform(1.0, 5.0, M) if mode == "independent-per-variable" else r.uniform(1.0, 5.0)
    return MgpHyperparams.from_values(K, r.uniform(0.05, 0.5, M), ls, mode)


def test_hourly_grid():
    np.testing.assert_array_equal(hourly_grid(3.7), [0.0, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(hourly_grid(0.2), [0.0])


def test_task_cov_factor_is_psd(rng):
    raw = rng.standard_normal((4, 4)) * 3
    K = task_cov_from_factor(raw)
    np.testing.assert_allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-12


def test_initial_hyperparameters():
    hp = MgpHyperparams.initial(3)
    np.testing.assert_allclose(hp.task_cov, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(hp.noise_vars, 0.1)
    np.testing.assert_allclose(hp.length_scales, 4.0)
    assert set(hp.tensors()) == {"task_factor", "log_noise", "log_lengthscale"}
    ind = MgpHyperparams.initial(3, "independent-per-variable")
    assert ind.log_lengthscale.shape == (3,) and "task_factor" not in ind.tensors()


def test_from_values_round_trip(rng):
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    hp = MgpHyperparams.from_values(K, [0.2, 0.3], 3.0)
    np.testing.assert_allclose(hp.task_cov, K, atol=1e-12)
    np.testing.assert_allclose(hp.noise_vars, [0.2, 0.3])
    np.testing.assert_allclose(hp.length_scales, [3.0, 3.0])


def test_hyperparameter_validation():
    with pytest.raises(InvalidHyperparameterError):
        MgpHyperparams(np.eye(2), np.zeros(2), np.zeros(()), mode="bogus")
    with pytest.raises(ShapeError):
        MgpHyperparams(np.eye(3), np.zeros(2), np.zeros(()))
    with pytest.raises(ShapeError):
        MgpHyperparams(np.eye(2), np.zeros(2), np.zeros(2), mode="independent-shared")
    with pytest.raises(InvalidHyperparameterError):
        MgpHyperparams(np.eye(2), np.array([0.0, np.nan]), np.zeros(()))


def test_independent_modes_ignore_factor():
    hp = MgpHyperparams(np.ones((2, 2)) * 5, np.zeros(2), np.zeros(()), "independent-shared")
    np.testing.assert_array_equal(hp.task_cov, np.eye(2))


def test_prior_recovery_without_observations(rng):
    K = np.array([[1.0, 0.6], [0.6, 2.0]])
    hp = MgpHyperparams.from_values(K, [0.1, 0.1], 2.0)
    grid = np.arange(3.0)
    post = posterior_moments(rec([]), grid, hp)
    np.testing.assert_array_equal(post.mean, np.zeros(6))
    prior = np.kron(K, ou_kernel_matrix(grid, grid, 2.0) + 1e-6 * np.eye(3))
    v = rng.standard_normal(6)
    np.testing.assert_allclose(post.cov_action(v), prior @ v, atol=1e-12)
    np.testing.assert_allclose(post.dense_cov(), prior, atol=1e-12)


def test_noiseless_interpolation_at_observed_point():
    hp = MgpHyperparams.from_values([[1.0]], [1e-10], 1.0)
    post = posterior_moments(rec([[1.0, 0, 2.0]]), [1.0], hp)
    np.testing.assert_allclose(post.mean, [2.0], atol=1e-6)
    assert post.dense_cov()[0, 0] <= 1e-6 + 1e-6


def test_small_instance_matches_dense_oracle(rng):
    enc = rec([[0.3, 0, 0.5], [1.2, 1, -1.0], [2.5, 0, 0.7]], duration=3.0)
    K = np.array([[1.2, 0.4], [0.4, 0.8]])
    hp = MgpHyperparams.from_values(K, [0.2, 0.1], 1.7)
    grid = np.array([0.0, 2.0])
    post = posterior_moments(enc, grid, hp, cg_tol=1e-12)
    mean, cov = dense_posterior(enc.times, enc.variables, enc.values, grid, K, [0.2, 0.1], [1.7, 1.7])
    np.testing.assert_allclose(post.mean, mean, atol=1e-8)
    np.testing.assert_allclose(post.dense_cov(), cov, atol=1e-8)
    np.testing.assert_allclose(posterior_mean_only(enc, grid, hp, cg_tol=1e-12), mean.reshape(2, 2), atol=1e-8)


@pytest.mark.parametrize("mode", ["multitask", "independent-shared", "independent-per-variable"])
def test_modes_match_dense_oracle(mode, rng):
    for _ in range(5):
        M = int(rng.integers(1, 4))
        enc = toy_encounter(rng, M, int(rng.integers(0, 7)), 4.5)
        hp = random_hp(rng, M, mode)
        grid = hourly_grid(enc.event_time)
        post = posterior_moments(enc, grid, hp, cg_tol=1e-12)
        mean, cov = dense_posterior(enc.times, enc.variables, enc.values, grid, hp.task_cov,
                                    hp.noise_vars, hp.length_scales)
        np.testing.assert_allclose(post.mean, mean, atol=1e-8)
        np.testing.assert_allclose(post.dense_cov(), cov, atol=1e-8)


def test_mean_only_equals_moments_mean(rng):
    enc = toy_encounter(rng, 2, 5, 3.0)
    hp = random_hp(rng, 2)
    grid = hourly_grid(3.0)
    np.testing.assert_array_equal(posterior_mean_only(enc, grid, hp),
                                  posterior_moments(enc, grid, hp).mean_matrix())
    assert not posterior_mean_only(rec([]), grid, hp).any()


def test_independence_consistency(rng):
    enc = toy_encounter(rng, 3, 8, 6.0)
    grid = hourly_grid(6.0)
    noise = [0.2, 0.1, 0.3]
    a = posterior_moments(enc, grid, MgpHyperparams.from_values(np.eye(3), noise, 2.5), cg_tol=1e-12)
    b = posterior_moments(enc, grid, MgpHyperparams.from_values(None, noise, [2.5] * 3,
                                                                "independent-per-variable"), cg_tol=1e-12)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-8)
    np.testing.assert_allclose(a.dense_cov(), b.dense_cov(), atol=1e-8)


def test_cross_variable_information_flow():
    enc = rec([[1.0, 0, 1.5], [2.0, 0, 1.2]], duration=3.0)
    grid = hourly_grid(3.0)
    K = np.array([[1.0, 0.8], [0.8, 1.0]])
    multi = posterior_mean_only(enc, grid, MgpHyperparams.from_values(K, [0.1, 0.1], 2.0))
    assert np.abs(multi[1]).min() > 1e-3
    for mode, ls in (("independent-shared", 2.0), ("independent-per-variable", [2.0, 3.0])):
        ind = posterior_mean_only(enc, grid, MgpHyperparams.from_values(None, [0.1, 0.1], ls, mode))
        np.testing.assert_array_equal(ind[1], np.zeros(4))


def test_posterior_variance_never_exceeds_prior(rng):
    for _ in range(5):
        M = 2
        enc = toy_encounter(rng, M, 6, 5.0)
        hp = random_hp(rng, M)
        grid = hourly_grid(5.0)
        post = posterior_moments(enc, grid, hp)
        prior = np.kron(hp.task_cov, ou_kernel_matrix(grid, grid, hp.length_scales[0]) + 1e-6 * np.eye(len(grid)))
        for i in range(M * len(grid)):
            e = np.zeros(M * len(grid))
            e[i] = 1.0
            assert e @ post.cov_action(e) <= prior[i, i] + 1e-8


def test_variance_far_from_data_returns_to_prior():
    hp = MgpHyperparams.from_values([[1.0]], [0.1], 1.0)
    post = posterior_moments(rec([[0.0, 0, 1.0]], duration=20.0), [0.0, 15.0], hp)
    assert abs(post.dense_cov()[1, 1] - (1.0 + 1e-6)) < 1e-3
    assert post.dense_cov()[0, 0] < 0.2


def test_cov_action_is_symmetric_psd(rng):
    enc = toy_encounter(rng, 3, 9, 5.0)
    post = posterior_moments(enc, hourly_grid(5.0), random_hp(rng, 3), cg_tol=1e-12)
    S = np.asarray(post.cov_action(np.eye(18)))
    np.testing.assert_allclose(S, S.T, atol=1e-10)
    for _ in range(20):
        x = rng.standard_normal(18)
        assert x @ post.cov_action(x) >= -1e-8


def test_batched_posterior_matches_single_encounters(rng):
    encs = [toy_encounter(rng, 2, n, d, enc_id=f"e{n}") for n, d in ((0, 2.0), (4, 5.0), (7, 3.5))]
    hp = random_hp(rng, 2)
    grids = [hourly_grid(e.event_time) for e in encs]
    batch = observation_batch(encs, grids, 2)
    K, noise, ls = resolve({k: v for k, v in hp.tensors().items()}, "multitask", 2)
    post = BatchedPosterior(batch, K, noise, ls, cg_tol=1e-12)
    X = batch.X
    for e, (enc, g) in enumerate(zip(encs, grids)):
        single = posterior_moments(enc, g, hp, cg_tol=1e-12)
        got = np.asarray(post.mean)[e, 0].reshape(2, X)[:, :len(g)]
        np.testing.assert_allclose(got, single.mean_matrix(), atol=1e-10)


def test_sample_latents_degenerate_covariance_returns_mean():
    times = np.arange(4.0)
    obs = [[t, m, float(m + t)] for t in times for m in range(2)]
    hp = MgpHyperparams.from_values(np.eye(2), [1e-12, 1e-12], 2.0)
    post = posterior_moments(rec(obs, 3.0), times, hp, jitter=0.0, cg_tol=1e-14, cg_max_iter=500)
    Z = sample_latents(post, 5, k=8, rng_seed=3)
    for z in Z:
        np.testing.assert_allclose(z, post.mean_matrix(), atol=1e-4)


def test_sample_latents_deterministic(rng):
    enc = toy_encounter(rng, 2, 5, 4.0)
    post = posterior_moments(enc, hourly_grid(4.0), random_hp(rng, 2))
    a = sample_latents(post, 4, k=5, rng_seed=11)
    b = sample_latents(post, 4, k=5, rng_seed=11)
    assert a.shape == (4, 2, 5)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_latents(post, 0)


def test_sample_moments_match_dense_posterior():
    r = np.random.default_rng(5)
    enc = rec([[0.5, 0, 1.0], [1.5, 1, -0.5]], duration=2.0)
    hp = MgpHyperparams.from_values([[1.0, 0.5], [0.5, 1.0]], [0.1, 0.2], 1.5)
    post = posterior_moments(enc, hourly_grid(2.0), hp)
    n = 6000
    Z = sample_latents(post, n, k=6, rng_seed=int(r.integers(1 << 30))).reshape(n, -1)
    mu, S = post.mean, post.dense_cov()
    se_mean = np.sqrt(np.diag(S) / n)
    assert np.all(np.abs(Z.mean(0) - mu) <= 4 * se_mean + 1e-12)
    C = np.cov(Z, rowvar=False)
    se_cov = np.sqrt((S ** 2 + np.outer(np.diag(S), np.diag(S))) / n)
    assert np.all(np.abs(C - S) <= 4 * se_cov + 1e-12)


def test_gradients_flow_to_hyperparameters(rng):
    enc = toy_encounter(rng, 2, 4, 3.0)
    hp = random_hp(rng, 2)
    grid = hourly_grid(3.0)
    batch = observation_batch([enc], [grid], 2)
    xi = rng.standard_normal((1, 1, 2 * len(grid)))

    def loss(t):
        K, noise, ls = resolve(t, "multitask", 2)
        z = BatchedPosterior(batch, K, noise, ls, cg_tol=1e-13).sample(xi, k=8)
        return ad.sum(ad.tanh(z))

    base = hp.tensors()
    tape = ad.Tape()
    leaves = {k: tape.var(v, name=k) for k, v in base.items()}
    g = ad.backward(tape, loss(leaves))
    h = 1e-6
    for name, v in base.items():
        for idx in np.ndindex(np.shape(v)):
            up, dn = dict(base), dict(base)
            up[name] = np.array(v, dtype=float)
            dn[name] = np.array(v, dtype=float)
            up[name][idx] += h
            dn[name][idx] -= h
            fd = (loss(up) - loss(dn)) / (2 * h)
            np.testing.assert_allclose(g[leaves[name]][idx], fd, rtol=1e-4, atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_obs=st.integers(0, 6))
def test_posterior_oracle_property(seed, n_obs):
    r = np.random.default_rng(seed)
    M = int(r.integers(1, 4))
    enc = toy_encounter(r, M, n_obs, float(r.uniform(0.5, 4.5)))
    hp = random_hp(r, M)
    grid = hourly_grid(enc.event_time)
    post = posterior_moments(enc, grid, hp, cg_tol=1e-12)
    mean, cov = dense_posterior(enc.times, enc.variables, enc.values, grid, hp.task_cov,
                                hp.noise_vars, hp.length_scales)
    np.testing.assert_allclose(post.mean, mean, atol=1e-8)
    np.testing.assert_allclose(post.dense_cov(), cov, atol=1e-8)
