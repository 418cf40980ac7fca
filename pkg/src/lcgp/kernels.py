"""Covariance functions.

The joint kernel over latent signals couples a non-stationary Gibbs
input kernel with a low-rank Wishart cross-covariance:

    K[(i,p),(j,q)] = z_p(x_i)^T z_q(x_j) * K_pq(x_i, x_j),

where K_pq is the Gibbs kernel with per-signal lengthscales

    K_pq(x,x') = sqrt(2 l_p l_q / (l_p^2 + l_q^2))
                 * exp(-(x-x')^2 / (l_p^2 + l_q^2)),

and the factor rows z_p(x) are GP-distributed with variance 1/nu so the
prior expectation of each diagonal block A(x) = Z_x Z_x^T is the
identity. Matrices are laid out input-major (N x N grids of Q x Q
blocks); multi-dimensional inputs use squared Euclidean distance with a
shared lengthscale per signal.
"""

from __future__ import annotations

import numpy as np


def sq_dists(x1: np.ndarray, x2: np.ndarray | None = None) -> np.ndarray:
    """Pairwise squared Euclidean distances, (N1, N2)."""
    a = np.asarray(x1, dtype=float)
    b = a if x2 is None else np.asarray(x2, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"input dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def _check_lengthscales(ls: np.ndarray) -> np.ndarray:
    ls = np.asarray(ls, dtype=float).ravel()
    if np.any(ls <= 0.0) or not np.all(np.isfinite(ls)):
        raise ValueError("lengthscales must be positive and finite")
    return ls


def prefactor(lengthscales: np.ndarray) -> np.ndarray:
    """Q x Q matrix P_pq = sqrt(2 l_p l_q / (l_p^2 + l_q^2)); unit diagonal."""
    ls = _check_lengthscales(lengthscales)
    denom = ls[:, None] ** 2 + ls[None, :] ** 2
    return np.sqrt(2.0 * ls[:, None] * ls[None, :] / denom)


def gibbs(x, xp, ell_p: float, ell_q: float) -> float:
    """Cross-lengthscale Gibbs kernel between two inputs."""
    if ell_p <= 0.0 or ell_q <= 0.0:
        raise ValueError("lengthscales must be positive")
    d2 = float(np.sum((np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)) ** 2))
    denom = ell_p**2 + ell_q**2
    return float(np.sqrt(2.0 * ell_p * ell_q / denom) * np.exp(-d2 / denom))


def gibbs_block_matrix(x: np.ndarray, lengthscales: np.ndarray,
                       x2: np.ndarray | None = None) -> np.ndarray:
    """Gibbs kernel over all (input, signal) pairs, (N1*Q, N2*Q) input-major.

    Entry at flat ((i,p),(j,q)) is gibbs(x_i, x_j, l_p, l_q). With a
    second input set, returns the rectangular cross matrix.
    """
    ls = _check_lengthscales(lengthscales)
    d2 = sq_dists(x, x2)  # (N1, N2)
    denom = ls[:, None] ** 2 + ls[None, :] ** 2  # (Q, Q)
    pref = np.sqrt(2.0 * ls[:, None] * ls[None, :] / denom)
    blocks = pref[None, :, None, :] * np.exp(-d2[:, None, :, None] / denom[None, :, None, :])
    n1, n2 = d2.shape
    q = ls.size
    return blocks.reshape(n1 * q, n2 * q)


def se_kernel_matrix(x: np.ndarray, ell: float, var: float = 1.0,
                     x2: np.ndarray | None = None) -> np.ndarray:
    """Squared-exponential kernel var * exp(-d^2 / (2 ell^2)), (N1, N2)."""
    if ell <= 0.0 or var <= 0.0:
        raise ValueError("lengthscale and variance must be positive")
    return var * np.exp(-sq_dists(x, x2) / (2.0 * ell**2))


def wishart_block(z: np.ndarray, i: int, j: int, q: int) -> np.ndarray:
    """Q x Q cross-covariance block Z_i Z_j^T for inputs i, j."""
    nq = z.shape[0]
    n = nq // q
    if nq % q != 0:
        raise ValueError(f"Z has {nq} rows, not divisible by Q={q}")
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"input indices ({i},{j}) out of range [0, {n})")
    zi = z[i * q:(i + 1) * q]
    zj = z[j * q:(j + 1) * q]
    return zi @ zj.T


def wishart_full(z: np.ndarray) -> np.ndarray:
    """NQ x NQ cross-covariance Z Z^T."""
    return z @ z.T


def joint_kernel(z: np.ndarray, k_q: np.ndarray, omega_u: float) -> np.ndarray:
    """Hadamard joint kernel (Z Z^T) o K_Q + omega_u^{-1} I, NQ x NQ."""
    if omega_u <= 0.0:
        raise ValueError("omega_u must be positive")
    if z.shape[0] != k_q.shape[0] or k_q.shape[0] != k_q.shape[1]:
        raise ValueError(f"shape mismatch: Z {z.shape}, K_Q {k_q.shape}")
    k = (z @ z.T) * k_q
    k[np.diag_indices_from(k)] += 1.0 / omega_u
    return k


def kronecker_kernel(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable baseline kernel with (i,j) block A * K_ij, NQ x NQ
    input-major (np.kron(K, A) under this layout)."""
    a = np.asarray(a, dtype=float)
    k = np.asarray(k, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"A must be square, got {a.shape}")
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"K must be square, got {k.shape}")
    return np.kron(k, a)
