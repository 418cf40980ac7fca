"""Synthetic data generators and evaluation metrics.

Two generators: a coupling-switch dataset (three outputs whose
correlation structure changes abruptly at the origin) and a toy
latent-factor dataset (Q latent GPs with a fixed correlation matrix,
binary one-to-one mixing). Both are bit-reproducible per seed.

The recovery score between two NQ x NQ covariances is the Pearson
correlation of their upper-triangular elements, maximized over all Q!
signal-block permutations of the estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.special import ndtr
from scipy.stats import chi2, rankdata

from ._linalg import block_tri_mul, chol_jitter
from .core import Dataset
from .kernels import se_kernel_matrix
from .vb import FittedModel


def _default_couplings() -> tuple[np.ndarray, np.ndarray]:
    c_pre = np.full((3, 3), 0.9)
    np.fill_diagonal(c_pre, 1.0)
    flip = np.diag([1.0, 1.0, -1.0])
    return c_pre, flip @ c_pre @ flip


@dataclass(frozen=True)
class SwitchSpec:
    """Three coupled outputs on [-1, 1] whose correlation matrix switches
    at the origin. signal_sd calibrates the zero-predictor MSE near 1.9."""

    n: int = 100
    switch: float = 0.0
    c_pre: np.ndarray = field(default_factory=lambda: _default_couplings()[0])
    c_post: np.ndarray = field(default_factory=lambda: _default_couplings()[1])
    noise_sd: float = 1.0
    signal_sd: float = 1.4
    ell: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("c_pre", "c_post"):
            c = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, c)
            if c.shape != (3, 3) or not np.allclose(c, c.T):
                raise ValueError(f"{name} must be a symmetric 3x3 matrix")
            if not np.allclose(np.diag(c), 1.0):
                raise ValueError(f"{name} must have unit diagonal")
            if np.min(np.linalg.eigvalsh(c)) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")


def gen_switch(spec: SwitchSpec) -> tuple[Dataset, np.ndarray]:
    """Returns (dataset, f_true) with f_true the (3, N) noiseless signal."""
    rng = np.random.default_rng(spec.seed)
    x = np.linspace(-1.0, 1.0, spec.n)
    lk, _ = chol_jitter(se_kernel_matrix(x, ell=spec.ell, var=1.0))
    g = lk @ rng.standard_normal((spec.n, 3))  # (N, 3) iid smooth curves
    a_pre = np.linalg.cholesky(spec.c_pre + 1e-12 * np.eye(3))
    a_post = np.linalg.cholesky(spec.c_post + 1e-12 * np.eye(3))
    f = np.where(x[:, None] < spec.switch, g @ a_pre.T, g @ a_post.T)
    f = spec.signal_sd * f.T  # (3, N)
    y = f + spec.noise_sd * rng.standard_normal(f.shape)
    return Dataset(x=x, y=y[None]), f


@dataclass(frozen=True)
class ToySpec:
    """Q correlated latent GPs observed through binary one-to-one mixing
    (output m reads latent m mod Q); sigma_true defaults to a seeded
    normalized-Wishart correlation matrix."""

    q: int = 2
    n_samples: int = 10
    n: int = 50
    m: int | None = None
    ell: float = 0.3
    noise_sd: float = 0.25
    sigma_true: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.q < 1 or self.n < 1 or self.n_samples < 1:
            raise ValueError("q, n, n_samples must be positive")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be positive")
        if self.sigma_true is not None:
            c = np.asarray(self.sigma_true, dtype=float)
            object.__setattr__(self, "sigma_true", c)
            if c.shape != (self.q, self.q) or not np.allclose(c, c.T):
                raise ValueError("sigma_true must be a symmetric Q x Q matrix")
            if not np.allclose(np.diag(c), 1.0):
                raise ValueError("sigma_true must have unit diagonal")
            if np.min(np.linalg.eigvalsh(c)) < -1e-12:
                raise ValueError("sigma_true must be positive semidefinite")


def random_correlation(q: int, rng: np.random.Generator, dof: int | None = None) -> np.ndarray:
    """Normalized Wishart draw: C = D (W W^T) D with W (q x dof) standard
    normal and D the inverse root of the diagonal."""
    dof = dof if dof is not None else q + 2
    w = rng.standard_normal((q, dof))
    s = w @ w.T
    d = 1.0 / np.sqrt(np.diag(s))
    return d[:, None] * s * d[None, :]


def gen_toy(spec: ToySpec) -> tuple[Dataset, np.ndarray]:
    """Returns (dataset, sigma_true)."""
    rng = np.random.default_rng(spec.seed)
    sigma = spec.sigma_true if spec.sigma_true is not None \
        else random_correlation(spec.q, rng)
    m = spec.m if spec.m is not None else spec.q
    x = np.linspace(-1.0, 1.0, spec.n)
    lk, _ = chol_jitter(se_kernel_matrix(x, ell=spec.ell, var=1.0))
    lsig = np.linalg.cholesky(sigma + 1e-12 * np.eye(spec.q))
    # u[s] = L_K G L_sig^T has cov[(i,p),(j,q)] = K_ij Sigma_pq
    g = rng.standard_normal((spec.n_samples, spec.n, spec.q))
    u = np.einsum("ni,siq,pq->snp", lk, g, lsig)
    y = u[:, :, np.arange(m) % spec.q].transpose(0, 2, 1)  # (S, M, N)
    y = y + spec.noise_sd * rng.standard_normal(y.shape)
    return Dataset(x=x, y=y), sigma


def toy_true_covariance(x: np.ndarray, sigma_true: np.ndarray, ell: float) -> np.ndarray:
    """The generator's latent covariance Sigma_true (x) K in input-major
    layout, NQ x NQ."""
    return np.kron(se_kernel_matrix(x, ell=ell, var=1.0), sigma_true)


def resample_from_model(model: FittedModel, seed: int = 0,
                        n_samples: int | None = None) -> Dataset:
    """Draw a new dataset from the fitted generative chain: u from
    N(0, ZZ^T o K_Q + Omega_u), y = <B> u + noise at precision <omega_f>,
    labels from the fitted Probit when classification is present."""
    rng = np.random.default_rng(seed)
    d = model.dims
    s = n_samples if n_samples is not None else d.s
    u = (model.lk @ rng.standard_normal((d.nq, s))).T  # (S, NQ)
    mu_b3 = model.state.mu_b.reshape(d.m, d.n, d.q)
    u3 = u.reshape(s, d.n, d.q)
    y_std = np.einsum("miq,siq->smi", mu_b3, u3)
    noise_sd = 1.0 / np.sqrt(model.state.omega_f_mean)
    y_std = y_std + noise_sd * rng.standard_normal(y_std.shape)
    y = y_std * model.stats.scale[None, :, None] + model.stats.mean[None, :, None]
    r = None
    if model.state.mu_wb is not None:
        probs = ndtr(u @ model.state.mu_wb[:-1] + model.state.mu_wb[-1])
        r = np.where(rng.uniform(size=s) < probs, 1.0, -1.0)
    return Dataset(x=model.x, y=y, r=r)


@dataclass(frozen=True)
class RecoveryScore:
    """Best permutation-matched correlation between covariance elements."""

    score: float
    permutation: tuple[int, ...]


def recovery_score(c_true: np.ndarray, c_est: np.ndarray, q: int) -> RecoveryScore:
    """Maximum over signal permutations of the Pearson correlation between
    upper-triangular elements of the two NQ x NQ covariances."""
    c_true = np.asarray(c_true, dtype=float)
    c_est = np.asarray(c_est, dtype=float)
    if c_true.shape != c_est.shape or c_true.shape[0] != c_true.shape[1]:
        raise ValueError(f"covariances must share a square shape, got "
                         f"{c_true.shape} vs {c_est.shape}")
    nq = c_true.shape[0]
    if nq % q != 0:
        raise ValueError(f"matrix size {nq} not divisible by Q={q}")
    if q > 6:
        raise ValueError("exhaustive permutation search supports Q <= 6")
    n = nq // q
    iu = np.triu_indices(nq)
    t = c_true[iu]
    if np.std(t) == 0.0:
        raise ValueError("true covariance is constant; score undefined")
    best, best_perm = -np.inf, None
    base = np.arange(n) * q
    for perm in permutations(range(q)):
        idx = (base[:, None] + np.asarray(perm)[None, :]).ravel()
        e = c_est[np.ix_(idx, idx)][iu]
        if np.std(e) == 0.0:
            raise ValueError("estimated covariance is constant; score undefined")
        score = float(np.corrcoef(t, e)[0, 1])
        if score > best:
            best, best_perm = score, perm
    return RecoveryScore(score=best, permutation=best_perm)


def regression_metrics(y_pred: np.ndarray, y_true: np.ndarray) -> tuple[float, float]:
    """(MAE, MSE) over all entries."""
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape or y_pred.size == 0:
        raise ValueError(f"conformable nonempty arrays required, got "
                         f"{y_pred.shape} vs {y_true.shape}")
    err = y_pred - y_true
    return float(np.mean(np.abs(err))), float(np.mean(err**2))


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic with tie midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    pos = labels > 0
    n_pos, n_neg = int(np.sum(pos)), int(np.sum(~pos))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined with a single class")
    ranks = rankdata(scores)
    u = float(np.sum(ranks[pos])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def fisher_combine(pvals) -> tuple[float, float]:
    """Fisher's method: statistic -2 sum log p_i against chi^2 with 2k
    degrees of freedom. Returns (statistic, combined p)."""
    p = np.asarray(pvals, dtype=float).ravel()
    if p.size == 0 or np.any(p <= 0.0) or np.any(p > 1.0):
        raise ValueError("p-values must lie in (0, 1]")
    stat = -2.0 * float(np.sum(np.log(p)))
    return stat, float(chi2.sf(stat, 2 * p.size))


def empirical_pvalue(observed_score: float, model: FittedModel,
                     c_true: np.ndarray, n_draws: int = 200,
                     seed: int = 0) -> float:
    """Permutation-free null: draws Z from its prior, scores the induced
    covariance (Z Z^T) o K_Q against c_true, and returns
    (1 + #{null >= observed}) / (n_draws + 1)."""
    if n_draws < 100:
        raise ValueError("need at least 100 null draws")
    rng = np.random.default_rng(seed)
    d = model.dims
    n_ge = 0
    for _ in range(n_draws):
        z = block_tri_mul(model.lz, rng.standard_normal((d.nq, d.nu)))
        null_cov = (z @ z.T) * model.k_q
        if recovery_score(c_true, null_cov, d.q).score >= observed_score:
            n_ge += 1
    return (1 + n_ge) / (n_draws + 1)
