import numpy as np
import pytest

from mgprnn.data import make_record


def random_spd(rng, n, cond=100.0):
    """SPD matrix with eigenvalues spread log-uniformly over [1, cond]."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), n))
    return (Q * lam) @ Q.T


def toy_encounter(rng, M, n_obs, duration, B=2, P=1, label=None, enc_id="toy", n_meds=2):
    times = np.sort(rng.uniform(0.0, duration, n_obs))
    variables = rng.integers(0, M, n_obs)
    values = rng.standard_normal(n_obs)
    obs = np.column_stack([times, variables, values]) if n_obs else np.zeros((0, 3))
    meds = [(float(t), rng.integers(0, 2, P).tolist()) for t in np.sort(rng.uniform(0, duration, n_meds))]
    label = int(rng.integers(0, 2)) if label is None else label
    return make_record(enc_id, rng.standard_normal(B), obs, meds, label, duration, n_meds=P)


def dense_posterior(times, variables, values, grid, K, noise, ls, jitter=1e-6):
    """Textbook GP regression with explicitly inverted matrices.

    Latent index is ``m * X + j``. ``ls`` is one length-scale per variable;
    cross-variable correlations use the OU kernel of the first variable when
    they are shared (the only case with nonzero cross terms here).
    """
    times = np.asarray(times, dtype=float)
    variables = np.asarray(variables, dtype=int)
    grid = np.asarray(grid, dtype=float)
    M, X, n = len(noise), len(grid), len(times)
    ls = np.broadcast_to(np.asarray(ls, dtype=float), (M,))

    def k(m1, t1, m2, t2):
        if m1 != m2 and ls[m1] != ls[m2]:
            assert K[m1, m2] == 0.0
            return 0.0
        return K[m1, m2] * np.exp(-abs(t1 - t2) / ls[m1])

    Kzz = np.zeros((M * X, M * X))
    for a in range(M * X):
        for b in range(M * X):
            Kzz[a, b] = k(a // X, grid[a % X], b // X, grid[b % X])
            # jitter sits on the time correlation, so it is scaled by K[m, m']
            if a % X == b % X:
                Kzz[a, b] += jitter * K[a // X, b // X] * (ls[a // X] == ls[b // X])
    Kzy = np.zeros((M * X, n))
    for a in range(M * X):
        for i in range(n):
            Kzy[a, i] = k(a // X, grid[a % X], variables[i], times[i])
    Kyy = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            Kyy[i, j] = k(variables[i], times[i], variables[j], times[j])
    Kyy += np.diag(np.asarray(noise)[variables]) if n else 0.0
    if n == 0:
        return np.zeros(M * X), Kzz
    inv = np.linalg.inv(Kyy)
    mean = Kzy @ inv @ np.asarray(values, dtype=float)
    cov = Kzz - Kzy @ inv @ Kzy.T
    return mean, cov


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
