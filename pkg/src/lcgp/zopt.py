"""Point estimation of the Wishart factor Z by bound maximization.

The relevant part of the variational bound, with S_u = sum_s <u u^T>,

    L(Z, w_u) = -1/2 ( S log|K| + tr(K^{-1} S_u) + tr(Z^T Kz^{-1} Z) )
                + (a_u - 1) log w_u - b_u w_u,
    K = Z Z^T o K_Q + w_u^{-1} I,

is maximized with L-BFGS in the whitened domain Zhat = L^{-1} Z, where
L is the prior Cholesky (the gradient maps as dL/dZhat = L^T dL/dZ).
The noise precision is co-optimized as theta = log w_u. The gradient of
the data terms reduces, via dK/dZ_ij = (Z 1_ij^T + 1_ij Z^T) o K_Q, to

    dL/dZ = (W o K_Q) Z - Kz^{-1} Z,   W = K^{-1} S_u K^{-1} - S K^{-1}.

The prior Kz = K_z (x) I_Q is never formed densely; all prior products
use the N x N Cholesky of K_z applied blockwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from ._linalg import (block_solve, block_tri_mul, block_tri_solve,
                      chol_logdet, chol_raw, inv_from_chol)
from .core import NumericsError
from .kernels import gibbs_block_matrix


@dataclass(frozen=True)
class ZObjectiveContext:
    """Frozen sufficient statistics for one inner optimization.

    s_u : NQ x NQ statistic sum_s <u^(s) u^(s)T>; n_sets : S; k_q :
    Gibbs block matrix; lz : N x N lower Cholesky of the (jittered)
    prior K_z; alpha_u, beta_u : Gamma prior on omega_u.
    """

    s_u: np.ndarray
    n_sets: int
    k_q: np.ndarray
    lz: np.ndarray
    alpha_u: float
    beta_u: float

    @property
    def nq(self) -> int:
        return self.s_u.shape[0]


def _omega_prior(omega_u: float, ctx: ZObjectiveContext) -> float:
    return (ctx.alpha_u - 1.0) * np.log(omega_u) - ctx.beta_u * omega_u


def z_objective(z: np.ndarray, omega_u: float, ctx: ZObjectiveContext,
                with_omega_prior: bool = True) -> float:
    """Bound terms depending on (Z, omega_u); see module docstring."""
    k = (z @ z.T) * ctx.k_q
    k[np.diag_indices_from(k)] += 1.0 / omega_u
    lk = chol_raw(k)
    quad = float(np.sum(block_solve(ctx.lz, z) * z))
    tr_data = float(np.trace(cho_solve((lk, True), ctx.s_u)))
    val = -0.5 * (ctx.n_sets * chol_logdet(lk) + tr_data + quad)
    if with_omega_prior:
        val += _omega_prior(omega_u, ctx)
    return val


def z_objective_grad(z: np.ndarray, omega_u: float, ctx: ZObjectiveContext,
                     with_omega_prior: bool = True):
    """Objective with gradients; returns (value, dZ, dtheta) where
    theta = log omega_u."""
    k = (z @ z.T) * ctx.k_q
    k[np.diag_indices_from(k)] += 1.0 / omega_u
    lk = chol_raw(k)
    kinv = inv_from_chol(lk)
    t = kinv @ ctx.s_u
    kz_inv_z = block_solve(ctx.lz, z)
    quad = float(np.sum(kz_inv_z * z))
    val = -0.5 * (ctx.n_sets * chol_logdet(lk) + float(np.trace(t)) + quad)

    w = t @ kinv - ctx.n_sets * kinv
    w = 0.5 * (w + w.T)
    dz = (w * ctx.k_q) @ z - kz_inv_z
    dtheta = -0.5 * float(np.trace(w)) / omega_u  # dK/dtheta = -w_u^{-1} I
    if with_omega_prior:
        val += _omega_prior(omega_u, ctx)
        dtheta += (ctx.alpha_u - 1.0) - ctx.beta_u * omega_u
    return val, dz, dtheta


def z_gradient(z: np.ndarray, omega_u: float, ctx: ZObjectiveContext) -> np.ndarray:
    """Gradient of z_objective with respect to Z."""
    return z_objective_grad(z, omega_u, ctx)[1]


def whiten(z: np.ndarray, lz: np.ndarray) -> np.ndarray:
    """Zhat = (L (x) I_Q)^{-1} Z via blockwise triangular solve."""
    return block_tri_solve(lz, z)


def unwhiten(zhat: np.ndarray, lz: np.ndarray) -> np.ndarray:
    """Z = (L (x) I_Q) Zhat."""
    return block_tri_mul(lz, zhat)


def whiten_gradient(grad_z: np.ndarray, lz: np.ndarray) -> np.ndarray:
    """Map dL/dZ to the whitened domain: dL/dZhat = L^T dL/dZ."""
    return block_tri_mul(lz, grad_z, trans=True)


# -- L-BFGS (memory 10, strong Wolfe) ------------------------------------


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    n_iters: int
    converged: bool
    warning: str | None = None


def lbfgs_minimize(fun, x0: np.ndarray, max_iters: int = 100, memory: int = 10,
                   c1: float = 1e-4, c2: float = 0.9, gtol: float = 1e-9) -> LbfgsResult:
    """Minimize fun(x) -> (f, g) by L-BFGS with a strong-Wolfe line search.

    Keeps the best point seen across all function evaluations, so the
    returned value never exceeds the entry value even when the line
    search fails.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    best = [x.copy(), f]

    def eval_at(xe):
        fe, ge = fun(xe)
        if np.isfinite(fe) and fe < best[1]:
            best[0], best[1] = xe.copy(), fe
        return fe, ge

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    warning = None
    n_done = 0
    converged = False
    for it in range(max_iters):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= gtol:
            converged = True
            break
        d = _two_loop_direction(g, s_hist, y_hist)
        dg = float(d @ g)
        if dg >= 0.0:  # not a descent direction; reset memory
            s_hist.clear()
            y_hist.clear()
            d = -g
            dg = float(d @ g)
        step = _wolfe_search(eval_at, x, f, g, d, dg, c1, c2)
        if step is None:
            warning = "line search failed; returning best point seen"
            break
        alpha, f_new, g_new = step
        x_new = x + alpha * d
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        n_done = it + 1
    if best[1] < f:
        x, f = best[0], best[1]
        _, g = fun(x)
    return LbfgsResult(x=x, f=f, grad_norm=float(np.max(np.abs(g))) if g.size else 0.0,
                       n_iters=n_done, converged=converged, warning=warning)


def _two_loop_direction(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    rhos = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float(y @ s)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
        rhos.append(rho)
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        gamma = float(s @ y) / float(y @ y)
        q *= gamma
    for (s, y), a, rho in zip(zip(s_hist, y_hist), reversed(alphas), reversed(rhos)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def _wolfe_search(eval_at, x, f0, g0, d, dg0, c1, c2, max_evals=25):
    """Strong-Wolfe line search (bracket then zoom). Returns
    (alpha, f, g) or None."""
    alpha_prev, f_prev, dg_prev = 0.0, f0, dg0
    alpha = 1.0
    alpha_max = 1e10
    for i in range(max_evals):
        f_a, g_a = eval_at(x + alpha * d)
        dg_a = float(g_a @ d)
        if not np.isfinite(f_a):
            return _zoom(eval_at, x, f0, dg0, d, alpha_prev, f_prev, dg_prev,
                         alpha, f_a, c1, c2, max_evals)
        if f_a > f0 + c1 * alpha * dg0 or (i > 0 and f_a >= f_prev):
            return _zoom(eval_at, x, f0, dg0, d, alpha_prev, f_prev, dg_prev,
                         alpha, f_a, c1, c2, max_evals)
        if abs(dg_a) <= -c2 * dg0:
            return alpha, f_a, g_a
        if dg_a >= 0.0:
            return _zoom(eval_at, x, f0, dg0, d, alpha, f_a, dg_a,
                         alpha_prev, f_prev, c1, c2, max_evals)
        alpha_prev, f_prev, dg_prev = alpha, f_a, dg_a
        alpha = min(2.0 * alpha, alpha_max)
    return None


def _zoom(eval_at, x, f0, dg0, d, alpha_lo, f_lo, dg_lo, alpha_hi, f_hi,
          c1, c2, max_evals):
    """Refine a bracketing interval until strong Wolfe holds."""
    for _ in range(max_evals):
        if not np.isfinite(f_hi):
            alpha = 0.5 * (alpha_lo + alpha_hi)
        else:
            # quadratic interpolation using (f_lo, dg_lo, f_hi); fall back
            # to bisection when the fit is degenerate or out of bounds
            denom = 2.0 * (f_hi - f_lo - dg_lo * (alpha_hi - alpha_lo))
            if denom != 0.0:
                alpha = alpha_lo - dg_lo * (alpha_hi - alpha_lo) ** 2 / denom
            else:
                alpha = 0.5 * (alpha_lo + alpha_hi)
            lo, hi = min(alpha_lo, alpha_hi), max(alpha_lo, alpha_hi)
            margin = 0.1 * (hi - lo)
            if not (lo + margin <= alpha <= hi - margin):
                alpha = 0.5 * (alpha_lo + alpha_hi)
        f_a, g_a = eval_at(x + alpha * d)
        dg_a = float(g_a @ d)
        if not np.isfinite(f_a) or f_a > f0 + c1 * alpha * dg0 or f_a >= f_lo:
            alpha_hi, f_hi = alpha, f_a
        else:
            if abs(dg_a) <= -c2 * dg0:
                return alpha, f_a, g_a
            if dg_a * (alpha_hi - alpha_lo) >= 0.0:
                alpha_hi, f_hi = alpha_lo, f_lo
            alpha_lo, f_lo, dg_lo = alpha, f_a, dg_a
        if abs(alpha_hi - alpha_lo) < 1e-16 * max(1.0, abs(alpha_lo)):
            break
    return None


# -- joint (Zhat, theta) optimization ------------------------------------


def optimize_z(z: np.ndarray, omega_u: float, ctx: ZObjectiveContext,
               max_iters: int = 20) -> tuple[np.ndarray, float, dict]:
    """Maximize the bound over (Z, omega_u) in whitened coordinates.

    Returns (Z, omega_u, info); the returned objective is never below
    the entry objective.
    """
    nq, nu = z.shape
    zhat0 = whiten(z, ctx.lz)
    v0 = np.concatenate([zhat0.ravel(), [np.log(omega_u)]])

    def negobj(v):
        zhat = v[:-1].reshape(nq, nu)
        theta = v[-1]
        # trial steps from the line search can push log omega_u far enough
        # that exp under/overflows; report +inf and let the search backtrack
        if not np.all(np.isfinite(v)) or abs(theta) > 46.0:
            return np.inf, np.zeros_like(v)
        zz = unwhiten(zhat, ctx.lz)
        try:
            val, dz, dtheta = z_objective_grad(zz, np.exp(theta), ctx)
        except NumericsError:
            return np.inf, np.zeros_like(v)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(v)
        # prior quadratic in whitened coords is -1/2 |Zhat|^2; its raw
        # gradient -Kz^{-1}Z is already inside dz, and L^T maps it back
        gzhat = whiten_gradient(dz, ctx.lz)
        return -val, -np.concatenate([gzhat.ravel(), [dtheta]])

    f0 = -negobj(v0)[0]
    res = lbfgs_minimize(negobj, v0, max_iters=max_iters)
    if -res.f < f0:  # defensive; best-so-far makes this unreachable
        return z, omega_u, {"objective0": f0, "objective": f0, "n_iters": 0,
                            "warning": res.warning, "converged": False}
    zhat = res.x[:-1].reshape(nq, nu)
    z_new = unwhiten(zhat, ctx.lz)
    omega_new = float(np.exp(res.x[-1]))
    info = {"objective0": f0, "objective": -res.f, "n_iters": res.n_iters,
            "warning": res.warning, "converged": res.converged}
    return z_new, omega_new, info


def optimize_lengthscales(lengthscales: np.ndarray, x: np.ndarray, z: np.ndarray,
                          omega_u: float, ctx: ZObjectiveContext,
                          enabled: bool = False, n_steps: int = 40) -> np.ndarray:
    """Golden-section search per signal lengthscale on the data terms of
    the bound, over log ell in [log 1e-3, log 1e3]. Disabled by default
    (returns the input unchanged); never returns a worse objective."""
    ls = np.asarray(lengthscales, dtype=float).copy()
    if not enabled:
        return ls

    def data_obj(ls_try):
        k_q = gibbs_block_matrix(x, ls_try)
        k = (z @ z.T) * k_q
        k[np.diag_indices_from(k)] += 1.0 / omega_u
        try:
            lk = chol_raw(k)
        except NumericsError:
            return -np.inf
        return -0.5 * (ctx.n_sets * chol_logdet(lk)
                       + float(np.trace(cho_solve((lk, True), ctx.s_u))))

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    for p in range(ls.size):
        base = data_obj(ls)

        def f_log(t):
            trial = ls.copy()
            trial[p] = np.exp(t)
            return data_obj(trial)

        a, b = np.log(1e-3), np.log(1e3)
        c, d = b - invphi * (b - a), a + invphi * (b - a)
        fc, fd = f_log(c), f_log(d)
        for _ in range(n_steps):
            if fc > fd:
                b, d, fd = d, c, fc
                c = b - invphi * (b - a)
                fc = f_log(c)
            else:
                a, c, fc = c, d, fd
                d = a + invphi * (b - a)
                fd = f_log(d)
        t_best = c if fc > fd else d
        if max(fc, fd) > base:
            ls[p] = np.exp(t_best)
    return ls
