"""Posterior predictions from a fitted model.

New-input predictions follow standard GP conditionals: the Wishart
factor is extended to x* by its prior conditional mean column-by-column,
the Gibbs cross blocks are assembled from the extended factor, and the
latent conditional is taken given the training-u posterior mean. Points
exactly coinciding with training inputs keep the omega_u^{-1} ridge in
their cross blocks, so predicting at the training grid reproduces the
posterior moments.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import ndtr

from ._linalg import chol_raw, inv_from_chol
from .core import NumericsError, destandardize
from .kernels import gibbs_block_matrix, se_kernel_matrix, sq_dists
from .vb import (FittedModel, _block_diag_embed, expected_bt_y,
                 expected_btb_blocks)


def _prep_inputs(model: FittedModel, x_star: np.ndarray) -> np.ndarray:
    x = np.asarray(x_star, dtype=float)
    if x.size == 0:
        raise ValueError("empty prediction inputs")
    if model.scaler is not None:
        x = model.scaler.transform(x)
    return x


def _extend_columns(l_chol: np.ndarray, cross: np.ndarray, values: np.ndarray,
                    q: int) -> np.ndarray:
    """GP conditional mean of per-input column stacks: values is (NQ, k)
    input-major; cross is the N* x N kernel slab; returns (N*Q, k)."""
    n = l_chol.shape[0]
    k = values.shape[1]
    folded = values.reshape(n, q * k)
    out = cross @ cho_solve((l_chol, True), folded)
    return out.reshape(cross.shape[0] * q, k)


def extend_z(model: FittedModel, x_star: np.ndarray) -> np.ndarray:
    """Prior conditional mean of the Wishart factor at new inputs, (N*Q, nu)."""
    x = _prep_inputs(model, x_star)
    d = model.dims
    kzs = se_kernel_matrix(x, ell=model.hyper.ell_z, var=1.0 / d.nu, x2=model.x)
    return _extend_columns(model.lz, kzs, model.state.z, d.q)


def predict_latent(model: FittedModel, x_star: np.ndarray, s: int = 0):
    """Latent conditional at x* for sample s: (mean (N*Q,), cov (N*Q, N*Q))."""
    d = model.dims
    if not (0 <= s < d.s):
        raise IndexError(f"sample index {s} out of range [0, {d.s})")
    x = _prep_inputs(model, x_star)
    z_star = extend_z(model, x_star)
    ls = model.hyper.lengthscales
    cross = (z_star @ model.state.z.T) * gibbs_block_matrix(x, ls, x2=model.x)
    coincident = sq_dists(x, model.x) == 0.0
    if np.any(coincident):
        cross += np.kron(coincident, np.eye(d.q)) / model.state.omega_u
    prior = (z_star @ z_star.T) * gibbs_block_matrix(x, ls)
    prior[np.diag_indices_from(prior)] += 1.0 / model.state.omega_u
    alpha = cho_solve((model.lk, True), model.state.mu_u[s])
    mean = cross @ alpha
    cov = prior - cross @ cho_solve((model.lk, True), cross.T)
    return mean, 0.5 * (cov + cov.T)


def predict_mixing(model: FittedModel, x_star: np.ndarray) -> np.ndarray:
    """Posterior-mean mixing matrix rows at x*, (M, N*Q)."""
    x = _prep_inputs(model, x_star)
    kbs = se_kernel_matrix(x, ell=model.hyper.ell_b, var=1.0, x2=model.x)
    return _extend_columns(model.lb, kbs, model.state.mu_b.T, model.dims.q).T


def predict_outputs(model: FittedModel, x_star: np.ndarray, s: int = 0) -> np.ndarray:
    """Mean output prediction <B(x*)> <u^(s)(x*)>, de-standardized, (M, N*)."""
    mean_u, _ = predict_latent(model, x_star, s)
    b_star = predict_mixing(model, x_star)
    n_star = b_star.shape[1] // model.dims.q
    b3 = b_star.reshape(model.dims.m, n_star, model.dims.q)
    u3 = mean_u.reshape(n_star, model.dims.q)
    y_std = np.einsum("miq,iq->mi", b3, u3)
    return destandardize(y_std, model.stats)


def predict_label(model: FittedModel, y_new: np.ndarray) -> float:
    """Probability of class +1 for a new unlabeled sample observed at the
    training inputs; y_new is (M, N) in original units."""
    if model.state.mu_wb is None:
        raise NumericsError("model was fitted without classification")
    d = model.dims
    y_new = np.asarray(y_new, dtype=float)
    if y_new.shape != (d.m, d.n):
        raise ValueError(f"y_new must be ({d.m}, {d.n}), got {y_new.shape}")
    y_std = ((y_new - model.stats.mean[:, None]) / model.stats.scale[:, None])[None]
    ef = model.state.omega_f_mean
    kinv = inv_from_chol(model.lk)
    prec = kinv + ef * _block_diag_embed(expected_btb_blocks(model.state, d))
    lp = chol_raw(prec)
    sigma_u = inv_from_chol(lp)
    mu_u = cho_solve((lp, True), ef * expected_bt_y(model.state, y_std, d)[0])
    mu_w = model.state.mu_wb[:-1]
    score = float(mu_w @ mu_u + model.state.mu_wb[-1])
    denom = float(np.sqrt(1.0 + mu_w @ sigma_u @ mu_w))
    return float(ndtr(score / denom))


def latent_covariance(model: FittedModel, p: int, q: int) -> np.ndarray:
    """Combined covariance C_pq(x_i, x_j) = (Z_i Z_j^T)_pq K_pq(x_i, x_j)
    over the training grid, (N, N)."""
    d = model.dims
    if not (0 <= p < d.q and 0 <= q < d.q):
        raise IndexError(f"signal indices ({p},{q}) out of range [0, {d.q})")
    rows_p = np.arange(d.n) * d.q + p
    rows_q = np.arange(d.n) * d.q + q
    block = model.state.z[rows_p] @ model.state.z[rows_q].T
    ls = model.hyper.lengthscales
    denom = ls[p] ** 2 + ls[q] ** 2
    kin = np.sqrt(2.0 * ls[p] * ls[q] / denom) * np.exp(-sq_dists(model.x) / denom)
    return block * kin
