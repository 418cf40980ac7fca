"""Mean-field variational Bayes engine.

The posterior is factorized as q(Z) q(w_u) prod_s q(u^(s)) q(h^(s))
prod_m q(B_m) q(w,b) q(lambda_w) q(lambda_b) q(omega_f), with Z and
omega_u kept as point estimates. Every closed-form factor update below
is the exact conditional maximizer of the bound given the other factors'
current moments, so the ELBO is non-decreasing along a sweep; (Z,
omega_u) are handled by the zopt module, whose objective equals the
(Z, omega_u)-dependent ELBO terms up to constants.

One outer sweep updates, in order: q(u^(s)) for all s; (Z, omega_u); if
classifying: q(h^(s)) for all s, q(w,b), q(lambda_w), q(lambda_b); then
q(B_m) for all m; then q(omega_f).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import brentq
from scipy.special import digamma, gammaln, log_ndtr
from scipy.stats import norm

from ._linalg import (block_solve, chol_jitter, chol_logdet, chol_raw,
                      inv_from_chol)
from .core import (Dataset, Dims, HyperParams, InputScaler, NormStats,
                   NumericsError, standardize)
from .kernels import gibbs_block_matrix, joint_kernel, se_kernel_matrix
from .zopt import ZObjectiveContext, optimize_lengthscales, optimize_z

LOG2PI = float(np.log(2.0 * np.pi))
LOG2PIE = float(np.log(2.0 * np.pi * np.e))
_INIT_VAR = 1e-10  # near-degenerate but valid covariances before sweep 1


@dataclass
class FitConfig:
    """Outer-loop controls. tol is the relative ELBO change declaring
    convergence; inner_iters caps each (Z, omega_u) L-BFGS run."""

    max_iters: int = 200
    tol: float = 1e-6
    classify: bool = False
    inner_iters: int = 20
    seed: int = 0
    nu: int | None = None
    scale_inputs: bool = False
    learn_lengthscales: bool = False

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1 or self.inner_iters < 1:
            raise ValueError("iteration caps must be >= 1")


@dataclass
class VariationalState:
    """Moments of every q(.) factor plus the (Z, omega_u) point estimates.

    Covariances are shared where the updates imply sharing: sigma_u
    across samples, sigma_b across output rows.
    """

    mu_u: np.ndarray          # (S, NQ)
    sigma_u: np.ndarray       # (NQ, NQ)
    mu_b: np.ndarray          # (M, NQ)
    sigma_b: np.ndarray       # (NQ, NQ)
    z: np.ndarray             # (NQ, nu)
    omega_u: float
    omf_a: float              # q(omega_f) = Gamma(omf_a, omf_b)
    omf_b: float
    mu_wb: np.ndarray | None = None       # (NQ+1,)
    sigma_wb: np.ndarray | None = None    # (NQ+1, NQ+1)
    lam_w_a: float | None = None
    lam_w_b: float | None = None
    lam_b_a: float | None = None
    lam_b_b: float | None = None
    g: np.ndarray | None = None           # (S,) truncated-normal locations
    h_mean: np.ndarray | None = None      # (S,)
    h_sq: np.ndarray | None = None        # (S,) second moments

    @property
    def omega_f_mean(self) -> float:
        return self.omf_a / self.omf_b


class Problem:
    """Fixed per-fit quantities: standardized data and prior matrices."""

    def __init__(self, x: np.ndarray, y: np.ndarray, r: np.ndarray | None,
                 dims: Dims, hyper: HyperParams):
        self.x = x
        self.y = y  # (S, M, N) standardized
        self.r = r
        self.dims = dims
        self.hyper = hyper
        self.k_q = gibbs_block_matrix(x, hyper.lengthscales)
        kz = se_kernel_matrix(x, ell=hyper.ell_z, var=1.0 / dims.nu)
        self.lz, _ = chol_jitter(kz, hyper.jitter)  # N x N
        kb = se_kernel_matrix(x, ell=hyper.ell_b, var=1.0)
        self.lb, _ = chol_jitter(kb, hyper.jitter)  # N x N
        self.kb_inv = np.kron(inv_from_chol(self.lb), np.eye(dims.q))  # NQ x NQ
        self.kb_logdet = dims.q * chol_logdet(self.lb)   # log|K_b (x) I_Q|
        self.kz_logdet = dims.q * chol_logdet(self.lz)   # log|K_z (x) I_Q|


# -- expected-moment helpers ----------------------------------------------


def _diag_blocks(mat: np.ndarray, n: int, q: int) -> np.ndarray:
    """(N, Q, Q) diagonal blocks of an NQ x NQ matrix."""
    m4 = mat.reshape(n, q, n, q)
    return m4[np.arange(n), :, np.arange(n), :]


def _block_diag_embed(blocks: np.ndarray) -> np.ndarray:
    """Dense NQ x NQ matrix with the given (N, Q, Q) diagonal blocks."""
    n, q, _ = blocks.shape
    out = np.zeros((n * q, n * q))
    m4 = out.reshape(n, q, n, q)
    m4[np.arange(n), :, np.arange(n), :] = blocks
    return out


def expected_btb_blocks(state: VariationalState, dims: Dims) -> np.ndarray:
    """(N, Q, Q) blocks of <B(x_i)^T B(x_i)> = sum_m mu_m,i mu_m,i^T
    + M * Sigma_b[ii]."""
    mu3 = state.mu_b.reshape(dims.m, dims.n, dims.q)
    blocks = np.einsum("miq,mir->iqr", mu3, mu3)
    blocks += dims.m * _diag_blocks(state.sigma_b, dims.n, dims.q)
    return blocks


def expected_uut_blocks(state: VariationalState, dims: Dims) -> np.ndarray:
    """(N, Q, Q) blocks of sum_s <u(x_i) u(x_i)^T>."""
    mu3 = state.mu_u.reshape(dims.s, dims.n, dims.q)
    blocks = np.einsum("siq,sir->iqr", mu3, mu3)
    blocks += dims.s * _diag_blocks(state.sigma_u, dims.n, dims.q)
    return blocks


def expected_bt_y(state: VariationalState, y: np.ndarray, dims: Dims) -> np.ndarray:
    """(S, NQ) stacked segments <B(x_i)>^T y^(s)(x_i)."""
    mu3 = state.mu_b.reshape(dims.m, dims.n, dims.q)
    return np.einsum("miq,smi->siq", mu3, y).reshape(y.shape[0], dims.nq)


def expected_residual(prob: Problem, state: VariationalState) -> float:
    """<|y - B u|^2> summed over samples, channels, inputs."""
    d = prob.dims
    mu_b3 = state.mu_b.reshape(d.m, d.n, d.q)
    mu_u3 = state.mu_u.reshape(d.s, d.n, d.q)
    pred = np.einsum("miq,siq->smi", mu_b3, mu_u3)
    btb = expected_btb_blocks(state, d)
    uut = expected_uut_blocks(state, d)  # already summed over s
    resid = float(np.sum(prob.y**2)) - 2.0 * float(np.sum(prob.y * pred)) \
        + float(np.sum(btb * uut))
    return resid


def _s_u_matrix(state: VariationalState, dims: Dims) -> np.ndarray:
    """NQ x NQ statistic sum_s <u^(s) u^(s)T> = sum mu mu^T + S Sigma_u."""
    return state.mu_u.T @ state.mu_u + dims.s * state.sigma_u


def _w_second_moment(state: VariationalState):
    """(m2_w, m2_wb_cross, m2_b): blocks of <(w;b)(w;b)^T>."""
    m2 = np.outer(state.mu_wb, state.mu_wb) + state.sigma_wb
    return m2[:-1, :-1], m2[:-1, -1], m2[-1, -1]


def make_z_context(prob: Problem, state: VariationalState) -> ZObjectiveContext:
    return ZObjectiveContext(s_u=_s_u_matrix(state, prob.dims),
                             n_sets=prob.dims.s, k_q=prob.k_q, lz=prob.lz,
                             alpha_u=prob.hyper.alpha_u, beta_u=prob.hyper.beta_u)


# -- closed-form factor updates ------------------------------------------


def update_q_u(prob: Problem, state: VariationalState):
    """Exact q(u^(s)) update for all samples; returns (mu_u, sigma_u).

    Precision = K^{-1} + <omega_f> <B^T B> + <w w^T>; the per-sample mean
    solves it against <omega_f> <B>^T y^(s) plus, when classifying,
    <h^(s)> <w> - <w b> (the w-b cross moment comes from the joint
    q(w,b) factor).
    """
    d = prob.dims
    kmat = joint_kernel(state.z, prob.k_q, state.omega_u)
    kinv = inv_from_chol(chol_raw(kmat))
    ef = state.omega_f_mean
    prec = kinv + ef * _block_diag_embed(expected_btb_blocks(state, d))
    rhs = ef * expected_bt_y(state, prob.y, d)  # (S, NQ)
    if state.mu_wb is not None:
        m2_w, m2_cross, _ = _w_second_moment(state)
        prec = prec + m2_w
        mu_w = state.mu_wb[:-1]
        rhs = rhs + state.h_mean[:, None] * mu_w[None, :] - m2_cross[None, :]
    lp = chol_raw(prec)
    sigma_u = inv_from_chol(lp)
    mu_u = cho_solve((lp, True), rhs.T).T
    return mu_u, sigma_u


def update_q_b(prob: Problem, state: VariationalState):
    """Exact q(B_m) update for all rows; returns (mu_b, sigma_b)."""
    d = prob.dims
    ef = state.omega_f_mean
    prec = prob.kb_inv + ef * _block_diag_embed(expected_uut_blocks(state, d))
    lp = chol_raw(prec)
    sigma_b = inv_from_chol(lp)
    mu_u3 = state.mu_u.reshape(d.s, d.n, d.q)
    rhs = ef * np.einsum("smi,siq->miq", prob.y, mu_u3).reshape(d.m, d.nq)
    mu_b = cho_solve((lp, True), rhs.T).T
    return mu_b, sigma_b


def update_q_wb(prob: Problem, state: VariationalState):
    """Exact joint q(w,b) update; returns (mu_wb, sigma_wb)."""
    d = prob.dims
    if state.h_mean is None:
        raise NumericsError("classifier update requires auxiliary h moments")
    s_uu = _s_u_matrix(state, d)
    su = state.mu_u.sum(axis=0)
    prec = np.empty((d.nq + 1, d.nq + 1))
    prec[:-1, :-1] = s_uu + (state.lam_w_a / state.lam_w_b) * np.eye(d.nq)
    prec[:-1, -1] = su
    prec[-1, :-1] = su
    prec[-1, -1] = d.s + state.lam_b_a / state.lam_b_b
    rhs = np.concatenate([state.mu_u.T @ state.h_mean, [float(np.sum(state.h_mean))]])
    lp = chol_raw(prec)
    sigma_wb = inv_from_chol(lp)
    mu_wb = cho_solve((lp, True), rhs)
    return mu_wb, sigma_wb


def update_q_h(prob: Problem, state: VariationalState):
    """Exact q(h^(s)) update: N(g_s, 1) truncated to the side of r^(s),
    g_s = <w>^T mu_u^(s) + <b>. Returns (g, h_mean, h_sq)."""
    mu_w = state.mu_wb[:-1]
    g = state.mu_u @ mu_w + state.mu_wb[-1]
    h_mean, h_sq = tn_moments(g, prob.r)
    return g, h_mean, h_sq


def update_q_lambda(state: VariationalState, hyper: HyperParams, dims: Dims,
                    which: str):
    """Gamma update for the ARD precision of w (dimension NQ) or of the
    intercept b (dimension 1). Returns (a, b)."""
    if which == "w":
        if dims.nq < 1:
            raise ValueError("w has dimension NQ >= 1")
        mu_w = state.mu_wb[:-1]
        norm2 = float(mu_w @ mu_w) + float(np.trace(state.sigma_wb[:-1, :-1]))
        return hyper.alpha_w + 0.5 * dims.nq, hyper.beta_w + 0.5 * norm2
    if which == "b":
        b2 = float(state.mu_wb[-1] ** 2) + float(state.sigma_wb[-1, -1])
        return hyper.alpha_b + 0.5, hyper.beta_b + 0.5 * b2
    raise ValueError(f"unknown precision factor {which!r}")


def update_q_omega_f(prob: Problem, state: VariationalState):
    """Gamma update of the observation precision; returns (a, b)."""
    d = prob.dims
    resid = expected_residual(prob, state)
    if resid < 0.0:
        raise NumericsError(f"negative residual second moment {resid:.3e}")
    return prob.hyper.alpha_f + 0.5 * d.n * d.m * d.s, prob.hyper.beta_f + 0.5 * resid


def tn_moments(g, r):
    """Mean and second moment of N(g, 1) truncated to r*h > 0.

    mean = g + r phi(g) / Phi(r g); var = 1 - r g phi(g)/Phi(r g)
    - (phi(g)/Phi(r g))^2; evaluated through log densities so the Mills
    ratio stays finite for |g| up to ~30.
    """
    g = np.asarray(g, dtype=float)
    r = np.asarray(r, dtype=float)
    mills = np.exp(norm.logpdf(g) - log_ndtr(r * g))  # phi(g)/Phi(rg)
    mean = g + r * mills
    var = 1.0 - r * g * mills - mills**2
    return mean, var + mean**2


# -- evidence lower bound -------------------------------------------------


def _gamma_entropy(a: float, b: float) -> float:
    return a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a)


def _gamma_cross(alpha: float, beta: float, a: float, b: float) -> float:
    """E_q[log p(x)] for p = Gamma(alpha, beta), q = Gamma(a, b)."""
    elog = digamma(a) - np.log(b)
    return alpha * np.log(beta) - gammaln(alpha) + (alpha - 1.0) * elog - beta * (a / b)


def _logdet_psd(mat: np.ndarray) -> float:
    return chol_logdet(chol_raw(mat))


def elbo(prob: Problem, state: VariationalState, return_terms: bool = False):
    """Evidence lower bound; raises NumericsError naming any non-finite
    term. Z and omega_u enter as point estimates (no entropy)."""
    d = prob.dims
    h = prob.hyper
    terms: dict[str, float] = {}

    ef = state.omega_f_mean
    elogf = digamma(state.omf_a) - np.log(state.omf_b)
    resid = expected_residual(prob, state)
    nms = d.n * d.m * d.s
    terms["lik_y"] = -0.5 * nms * LOG2PI + 0.5 * nms * elogf - 0.5 * ef * resid

    kmat = joint_kernel(state.z, prob.k_q, state.omega_u)
    lk = chol_raw(kmat)
    s_u = _s_u_matrix(state, d)
    terms["prior_u"] = -0.5 * (d.s * d.nq * LOG2PI + d.s * chol_logdet(lk)
                               + float(np.trace(cho_solve((lk, True), s_u))))

    quad_b = float(np.einsum("mi,ij,mj->", state.mu_b, prob.kb_inv, state.mu_b))
    quad_b += d.m * float(np.sum(prob.kb_inv * state.sigma_b))
    terms["prior_b"] = -0.5 * (d.m * d.nq * LOG2PI + d.m * prob.kb_logdet + quad_b)

    quad_z = float(np.sum(block_solve(prob.lz, state.z) * state.z))
    terms["prior_z"] = -0.5 * (d.nu * d.nq * LOG2PI + d.nu * prob.kz_logdet + quad_z)

    terms["prior_omega_u"] = (h.alpha_u * np.log(h.beta_u) - gammaln(h.alpha_u)
                              + (h.alpha_u - 1.0) * np.log(state.omega_u)
                              - h.beta_u * state.omega_u)
    terms["prior_omega_f"] = _gamma_cross(h.alpha_f, h.beta_f, state.omf_a, state.omf_b)

    terms["ent_u"] = d.s * 0.5 * (d.nq * LOG2PIE + _logdet_psd(state.sigma_u))
    terms["ent_b"] = d.m * 0.5 * (d.nq * LOG2PIE + _logdet_psd(state.sigma_b))
    terms["ent_omega_f"] = _gamma_entropy(state.omf_a, state.omf_b)

    if state.mu_wb is not None:
        m2_w, m2_cross, m2_b = _w_second_moment(state)
        mu_w = state.mu_wb[:-1]
        mu_b0 = state.mu_wb[-1]
        lin = state.mu_u @ mu_w + mu_b0  # (S,) <w^T u + b>
        quad = (np.einsum("si,ij,sj->s", state.mu_u, m2_w, state.mu_u)
                + float(np.sum(m2_w * state.sigma_u))
                + 2.0 * state.mu_u @ m2_cross + m2_b)
        sq = state.h_sq - 2.0 * state.h_mean * lin + quad
        terms["lik_h"] = float(np.sum(-0.5 * (LOG2PI + sq)))

        elog_lw = digamma(state.lam_w_a) - np.log(state.lam_w_b)
        elw = state.lam_w_a / state.lam_w_b
        w2 = float(mu_w @ mu_w) + float(np.trace(state.sigma_wb[:-1, :-1]))
        terms["prior_w"] = -0.5 * d.nq * LOG2PI + 0.5 * d.nq * elog_lw - 0.5 * elw * w2

        elog_lb = digamma(state.lam_b_a) - np.log(state.lam_b_b)
        elb = state.lam_b_a / state.lam_b_b
        b2 = float(mu_b0**2) + float(state.sigma_wb[-1, -1])
        terms["prior_intercept"] = -0.5 * LOG2PI + 0.5 * elog_lb - 0.5 * elb * b2

        terms["prior_lambda_w"] = _gamma_cross(h.alpha_w, h.beta_w,
                                               state.lam_w_a, state.lam_w_b)
        terms["prior_lambda_b"] = _gamma_cross(h.alpha_b, h.beta_b,
                                               state.lam_b_a, state.lam_b_b)

        terms["ent_wb"] = 0.5 * ((d.nq + 1) * LOG2PIE + _logdet_psd(state.sigma_wb))
        hg = state.h_sq - 2.0 * state.g * state.h_mean + state.g**2
        terms["ent_h"] = float(np.sum(0.5 * LOG2PI + 0.5 * hg
                                      + log_ndtr(prob.r * state.g)))
        terms["ent_lambda_w"] = _gamma_entropy(state.lam_w_a, state.lam_w_b)
        terms["ent_lambda_b"] = _gamma_entropy(state.lam_b_a, state.lam_b_b)

    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericsError(f"ELBO term {name!r} is not finite ({value})")
    total = float(sum(terms.values()))
    return (total, terms) if return_terms else total


# -- initialization and the outer loop ------------------------------------


def _tn_location_matching_unit_mean() -> float:
    """Location c with E[h | h ~ N(c,1), h > 0] = 1, so initializing
    g = c * r gives <h> = r exactly."""
    return float(brentq(lambda c: tn_moments(c, 1.0)[0] - 1.0, 0.0, 2.0))


def init_state(prob: Problem, config: FitConfig) -> VariationalState:
    """Initial factors: B rows drawn N(0, 0.1^2); Z as stacked identity
    slabs plus N(0, 0.01^2) noise so A(x_i) is approximately I; mu_u by
    per-input least squares against the initial B; <h> = r."""
    d = prob.dims
    rng = np.random.default_rng(config.seed)
    mu_b = rng.normal(0.0, 0.1, size=(d.m, d.nq))
    z = np.zeros((d.nq, d.nu))
    for p in range(min(d.q, d.nu)):
        z[np.arange(d.n) * d.q + p, p] = 1.0
    z += rng.normal(0.0, 0.01, size=z.shape)

    mu_b3 = mu_b.reshape(d.m, d.n, d.q)
    btb = np.einsum("miq,mir->iqr", mu_b3, mu_b3)  # (N, Q, Q)
    delta = 1e-6 * float(np.mean(np.trace(btb, axis1=1, axis2=2))) / d.q + 1e-12
    bty = np.einsum("miq,smi->siq", mu_b3, prob.y)  # (S, N, Q)
    mu_u = np.linalg.solve(btb[None] + delta * np.eye(d.q), bty[..., None])
    mu_u = mu_u[..., 0].reshape(d.s, d.nq)

    state = VariationalState(
        mu_u=mu_u, sigma_u=_INIT_VAR * np.eye(d.nq),
        mu_b=mu_b, sigma_b=_INIT_VAR * np.eye(d.nq),
        z=z, omega_u=1.0,
        omf_a=prob.hyper.alpha_f, omf_b=prob.hyper.beta_f,
    )
    if config.classify:
        c = _tn_location_matching_unit_mean()
        state.g = c * prob.r
        state.h_mean, state.h_sq = tn_moments(state.g, prob.r)
        state.mu_wb = np.zeros(d.nq + 1)
        state.sigma_wb = _INIT_VAR * np.eye(d.nq + 1)
        state.lam_w_a, state.lam_w_b = prob.hyper.alpha_w, prob.hyper.beta_w
        state.lam_b_a, state.lam_b_b = prob.hyper.alpha_b, prob.hyper.beta_b
    return state


@dataclass
class FittedModel:
    """Everything prediction needs: posterior moments, kernel caches,
    and normalization statistics."""

    dims: Dims
    hyper: HyperParams
    config: FitConfig
    x: np.ndarray                 # training inputs (scaled when requested)
    scaler: InputScaler | None
    stats: NormStats
    state: VariationalState
    k_q: np.ndarray               # Gibbs block matrix at final lengthscales
    lz: np.ndarray                # N x N chol of prior K_z (with jitter)
    lb: np.ndarray                # N x N chol of prior K_b (with jitter)
    kmat: np.ndarray              # joint kernel at final (Z, omega_u)
    lk: np.ndarray                # its Cholesky factor
    elbo_trace: list
    converged: bool
    n_iters: int

    @property
    def wgcc(self) -> np.ndarray:
        """Fitted cross-covariance (Z Z^T) o K_Q without the noise ridge."""
        return (self.state.z @ self.state.z.T) * self.k_q


def fit(dataset: Dataset, hyper: HyperParams, config: FitConfig | None = None) -> FittedModel:
    """Fit by coordinate ascent until the relative ELBO change drops
    below config.tol or config.max_iters sweeps elapse."""
    config = config or FitConfig()
    if config.classify and dataset.r is None:
        raise ValueError("classification requires labels")
    ds_std, stats = standardize(dataset)
    scaler = None
    x = ds_std.x
    if config.scale_inputs:
        scaler = InputScaler.fit(x)
        x = scaler.transform(x)
    nu = config.nu if config.nu is not None else hyper.q
    dims = Dims(n=dataset.n_inputs, m=dataset.n_outputs, q=hyper.q,
                s=dataset.n_samples, nu=nu)
    prob = Problem(x, ds_std.y, ds_std.r, dims, hyper)
    state = init_state(prob, config)

    trace = []
    prev = -np.inf
    converged = False
    n_iters = 0
    for sweep in range(1, config.max_iters + 1):
        try:
            state.mu_u, state.sigma_u = update_q_u(prob, state)
            zctx = make_z_context(prob, state)
            state.z, state.omega_u, zinfo = optimize_z(
                state.z, state.omega_u, zctx, max_iters=config.inner_iters)
            if config.learn_lengthscales:
                new_ls = optimize_lengthscales(
                    prob.hyper.lengthscales, prob.x, state.z, state.omega_u,
                    zctx, enabled=True)
                if not np.array_equal(new_ls, prob.hyper.lengthscales):
                    prob.hyper = HyperParams(
                        lengthscales=new_ls,
                        **{f: getattr(prob.hyper, f) for f in (
                            "ell_z", "ell_b", "alpha_f", "beta_f", "alpha_u",
                            "beta_u", "alpha_w", "beta_w", "alpha_b", "beta_b",
                            "jitter")})
                    prob.k_q = gibbs_block_matrix(prob.x, new_ls)
            if config.classify:
                state.g, state.h_mean, state.h_sq = update_q_h(prob, state)
                state.mu_wb, state.sigma_wb = update_q_wb(prob, state)
                state.lam_w_a, state.lam_w_b = update_q_lambda(
                    state, prob.hyper, dims, "w")
                state.lam_b_a, state.lam_b_b = update_q_lambda(
                    state, prob.hyper, dims, "b")
            state.mu_b, state.sigma_b = update_q_b(prob, state)
            state.omf_a, state.omf_b = update_q_omega_f(prob, state)
            value = elbo(prob, state)
        except NumericsError as err:
            raise NumericsError(f"sweep {sweep}: {err}") from err
        delta = value - prev
        trace.append({"iter": sweep, "elbo": value, "delta": delta,
                      "z_objective": zinfo["objective"],
                      "z_iters": zinfo["n_iters"]})
        n_iters = sweep
        if np.isfinite(prev) and abs(delta) <= config.tol * max(1.0, abs(value)):
            converged = True
            break
        prev = value

    kmat = joint_kernel(state.z, prob.k_q, state.omega_u)
    return FittedModel(dims=dims, hyper=prob.hyper, config=config, x=x,
                       scaler=scaler, stats=stats, state=state, k_q=prob.k_q,
                       lz=prob.lz, lb=prob.lb, kmat=kmat, lk=chol_raw(kmat),
                       elbo_trace=trace, converged=converged, n_iters=n_iters)
