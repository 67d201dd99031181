"""Drawing posterior-shaped Gaussian samples without a Cholesky factor.

Builds the covariance of a 2-variable GP on an hourly grid, then compares the
Lanczos approximation of ``Sigma^{1/2} xi`` with the exact symmetric square
root as the Krylov dimension grows. Also solves one system with CG.
"""
import time

import numpy as np

from mgprnn.krylov import cg_solve, dense_sqrt, kron_matvec, lanczos_sqrt_vec, ou_kernel_matrix

M, X = 2, 200
K = np.array([[1.0, 0.6], [0.6, 1.0]])
KX = ou_kernel_matrix(np.arange(X), np.arange(X), 4.0)
noise = 0.1


def apply(v):
    return kron_matvec(K, KX, v) + noise * v


Sigma = np.kron(K, KX) + noise * np.eye(M * X)
xi = np.random.default_rng(0).standard_normal(M * X)

t0 = time.perf_counter()
exact = dense_sqrt(Sigma) @ xi
print(f"dense square root, n={M * X}: {time.perf_counter() - t0:.3f}s")
for k in (4, 8, 16, 32, 64):
    t0 = time.perf_counter()
    approx = lanczos_sqrt_vec(apply, xi, k)
    print(f"  k={k:3d}  max |error| = {np.max(np.abs(approx - exact)):.2e}   ({time.perf_counter() - t0:.4f}s)")

b = np.random.default_rng(1).standard_normal(M * X)
x, info = cg_solve(apply, b, tol=1e-10)
print(f"CG: {info.iterations} iterations, residual {info.residual:.1e}, "
      f"error vs dense solve {np.max(np.abs(x - np.linalg.solve(Sigma, b))):.1e}")
