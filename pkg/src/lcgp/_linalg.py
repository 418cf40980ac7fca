"""Internal dense linear algebra helpers.

Cholesky with jitter escalation (1e-8 * mean diag, escalating x10 up to
1e-4 * mean diag) and block operations for Kronecker-with-identity
priors K (x) I_Q, which are never formed densely.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .core import NumericsError

JITTER_REL = 1e-8
JITTER_MAX_REL = 1e-4


def chol_jitter(mat: np.ndarray, base_rel: float = JITTER_REL) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a symmetric matrix, adding base_rel *
    mean(diag) to the diagonal and escalating x10 up to 1e-4 * mean(diag).

    Returns (L, jitter_added). Raises NumericsError when escalation fails.
    """
    if not np.all(np.isfinite(mat)):
        raise NumericsError("matrix contains non-finite entries")
    scale = float(np.mean(np.diag(mat)))
    if scale <= 0.0:
        scale = 1.0
    jit = base_rel * scale
    last_err = None
    while jit <= JITTER_MAX_REL * scale * (1.0 + 1e-12):
        try:
            L = cholesky(mat + jit * np.eye(mat.shape[0]), lower=True)
            return L, jit
        except np.linalg.LinAlgError as err:  # pragma: no cover - rare
            last_err = err
            jit *= 10.0
    raise NumericsError(f"Cholesky failed up to jitter {jit / 10.0:.3e}: {last_err}")


def chol_raw(mat: np.ndarray) -> np.ndarray:
    """Plain lower Cholesky, escalating to jittered factorization only on
    failure. For matrices that are PD by construction (ridged kernels,
    precision matrices)."""
    try:
        return cholesky(mat, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        # ValueError covers non-finite input; chol_jitter converts it to
        # NumericsError so callers see a single failure type.
        return chol_jitter(mat)[0]


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the lower Cholesky factor of A."""
    return cho_solve((L, True), b)


def chol_logdet(L: np.ndarray) -> float:
    """log det A from its lower Cholesky factor."""
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def inv_from_chol(L: np.ndarray) -> np.ndarray:
    """Symmetric inverse from a lower Cholesky factor."""
    inv = cho_solve((L, True), np.eye(L.shape[0]))
    return 0.5 * (inv + inv.T)


def solve_psd(mat: np.ndarray, b: np.ndarray) -> np.ndarray:
    return chol_solve(chol_raw(mat), b)


# -- block ops for M_blk = M (x) I_Q acting on (NQ, k) arrays ------------
#
# Row (i, p) of an (NQ, k) array holds values for input i, signal p; the
# Kronecker structure means each N-level operation applies independently
# across the Q signal slots, so we reshape to (N, Q*k) and act at the
# N level.


def _fold(z: np.ndarray, n: int) -> np.ndarray:
    nq, k = z.shape
    return z.reshape(n, (nq // n) * k)


def _unfold(z2: np.ndarray, nq: int, k: int) -> np.ndarray:
    return z2.reshape(nq, k)


def block_tri_solve(L: np.ndarray, z: np.ndarray, trans: bool = False) -> np.ndarray:
    """Solve (L (x) I_Q) v = z (or its transpose) given N x N lower L."""
    n = L.shape[0]
    out = solve_triangular(L, _fold(z, n), lower=True, trans="T" if trans else "N")
    return _unfold(out, *z.shape)


def block_tri_mul(L: np.ndarray, z: np.ndarray, trans: bool = False) -> np.ndarray:
    """(L (x) I_Q) z or (L^T (x) I_Q) z given N x N lower L."""
    n = L.shape[0]
    mat = L.T if trans else L
    return _unfold(mat @ _fold(z, n), *z.shape)


def block_solve(L: np.ndarray, z: np.ndarray) -> np.ndarray:
    """(K (x) I_Q)^{-1} z given the N x N lower Cholesky factor of K."""
    n = L.shape[0]
    out = cho_solve((L, True), _fold(z, n))
    return _unfold(out, *z.shape)
