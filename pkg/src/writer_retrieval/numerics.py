"""Dense linear algebra and seeded random streams shared by the pipeline.

Matrices are plain ``float64`` numpy arrays. Random streams come from
``numpy.random.Generator`` on the PCG64 bit generator, which produces the same
stream for the same seed on every platform numpy supports.
"""

from functools import lru_cache

import numpy as np

from . import kernels
from .errors import NonFinite, NotSymmetric

SYMMETRY_TOL = 1e-9
MIN_RIDGE = 1e-12
MAX_SWEEPS = 100
# components below this magnitude are skipped when fixing eigenvector signs
SIGN_TOL = 1e-10


def make_rng(seed):
    """Seeded generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_rng(seed, *keys):
    """Independent stream for one work item, e.g. ``derive_rng(seed, page_index)``.

    Lets per-item work run in any order or thread count with identical results.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFinite("input contains NaN or Inf")


def _check_symmetric(m):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if m.size and np.max(np.abs(m - m.T)) > SYMMETRY_TOL * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")


def ridge_solve(gram, rhs, lam):
    """Solve ``(gram + lam*I) a = rhs`` by Cholesky factorization."""
    gram = np.asarray(gram, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64).reshape(-1)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    _check_finite(gram, rhs, np.array([lam]))
    _check_symmetric(gram)
    if rhs.shape[0] != gram.shape[0]:
        raise ValueError(f"rhs length {rhs.shape[0]} does not match gram {gram.shape}")
    system = 0.5 * (gram + gram.T)
    system[np.diag_indices_from(system)] += max(float(lam), MIN_RIDGE)
    return kernels.cholesky_solve(system, rhs)


@lru_cache(maxsize=64)
def round_robin_schedule(n):
    """Disjoint (p, q) pairs per round covering every p < q once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(sorted(pairs))
        players = [players[0]] + [players[-1]] + players[1:-1]
    sched = np.array(rounds, dtype=np.int64).reshape(len(rounds), -1, 2)
    sched.setflags(write=False)
    return sched


def sym_eig(m):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and column eigenvectors. Each
    eigenvector is signed so its first non-negligible component is positive.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_finite(m)
    _check_symmetric(m)
    n = m.shape[0]
    sym = 0.5 * (m + m.T)
    if n < 2:
        return np.diag(sym).copy(), np.eye(n)
    vals, vecs, _ = kernels.jacobi_eigh(sym, round_robin_schedule(n), MAX_SWEEPS)
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    for j in range(n):
        col = vecs[:, j]
        idx = np.flatnonzero(np.abs(col) > SIGN_TOL)
        if idx.size and col[idx[0]] < 0:
            vecs[:, j] = -col
    return vals, vecs
