"""Shared containers and index conventions.

Joint covariances over latent function values are laid out input-major:
the flat index of (input i, signal p) is i*Q + p, so an NQ x NQ matrix
is an N x N grid of Q x Q signal blocks. Every module uses this single
convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class NumericsError(RuntimeError):
    """A linear-algebra step failed beyond repair (e.g. non-PSD kernel)."""


@dataclass(frozen=True)
class Dims:
    """Problem dimensions.

    n : input points, m : output channels, q : latent signals,
    s : observation sets, nu : Wishart degrees of freedom.
    """

    n: int
    m: int
    q: int
    s: int
    nu: int

    def __post_init__(self):
        for name in ("n", "m", "q", "s", "nu"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"dimension {name} must be a positive integer, got {v!r}")

    @property
    def nq(self) -> int:
        return self.n * self.q


def flatten(i: int, p: int, dims: Dims) -> int:
    """Flat index of (input i, signal p) in input-major order."""
    if not (0 <= i < dims.n):
        raise IndexError(f"input index {i} out of range [0, {dims.n})")
    if not (0 <= p < dims.q):
        raise IndexError(f"signal index {p} out of range [0, {dims.q})")
    return i * dims.q + p


def unflatten(k: int, dims: Dims) -> tuple[int, int]:
    """Inverse of flatten."""
    if not (0 <= k < dims.nq):
        raise IndexError(f"flat index {k} out of range [0, {dims.nq})")
    return k // dims.q, k % dims.q


@dataclass(frozen=True)
class Dataset:
    """Observations on a shared input grid.

    x : (N,) scalar inputs or (N, D) points; y : (S, M, N) output
    matrices in original units; r : optional (S,) labels in {-1, +1}.
    """

    x: np.ndarray
    y: np.ndarray
    r: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim not in (1, 2):
            raise ValueError(f"x must be (N,) or (N, D), got shape {x.shape}")
        if y.ndim != 3:
            raise ValueError(f"y must be (S, M, N), got shape {y.shape}")
        if y.shape[0] < 1:
            raise ValueError("need at least one sample")
        if y.shape[2] != x.shape[0]:
            raise ValueError(f"y has {y.shape[2]} input points but x has {x.shape[0]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if self.r is not None:
            r = np.asarray(self.r, dtype=float)
            if r.shape != (y.shape[0],):
                raise ValueError(f"labels must have shape ({y.shape[0]},), got {r.shape}")
            if not np.all(np.isin(r, (-1.0, 1.0))):
                raise ValueError("labels must be -1 or +1")
            object.__setattr__(self, "r", r)

    @property
    def n_samples(self) -> int:
        return self.y.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.y.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.y.shape[2]


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and scale used to standardize outputs."""

    mean: np.ndarray  # (M,)
    scale: np.ndarray  # (M,), strictly positive


def standardize(dataset: Dataset) -> tuple[Dataset, NormStats]:
    """Standardize each output channel to mean 0, variance 1 (ddof=0),
    pooled over samples and inputs. Returns the transformed dataset and
    the statistics needed to invert the map."""
    y = dataset.y
    mean = y.mean(axis=(0, 2))
    scale = y.std(axis=(0, 2))
    bad = np.flatnonzero(scale == 0.0)
    if bad.size:
        raise ValueError(f"output channel {bad[0]} is constant; cannot standardize")
    y_std = (y - mean[None, :, None]) / scale[None, :, None]
    return replace(dataset, y=y_std), NormStats(mean=mean, scale=scale)


def destandardize(y_std: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map standardized outputs (..., M, N) back to original units."""
    return y_std * stats.scale[..., :, None] + stats.mean[..., :, None]


@dataclass(frozen=True)
class InputScaler:
    """Optional affine map of inputs onto [-1, 1] per dimension."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "InputScaler":
        x = np.atleast_2d(np.asarray(x, dtype=float).T).T  # (N, D)
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = hi - lo
        if np.any(span == 0.0):
            raise ValueError("cannot scale a degenerate input dimension")
        return cls(lo=lo, hi=hi)

    def transform(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=float).ndim == 1
        xx = np.atleast_2d(np.asarray(x, dtype=float).T).T
        out = 2.0 * (xx - self.lo) / (self.hi - self.lo) - 1.0
        return out[:, 0] if flat else out

    def inverse(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=float).ndim == 1
        xx = np.atleast_2d(np.asarray(x, dtype=float).T).T
        out = self.lo + (xx + 1.0) * (self.hi - self.lo) / 2.0
        return out[:, 0] if flat else out


@dataclass(frozen=True)
class HyperParams:
    """Kernel lengthscales and Gamma prior parameters.

    lengthscales : (Q,) per-signal input lengthscales of the Gibbs kernel;
    ell_z : lengthscale of the Wishart factor GP prior; ell_b : lengthscale
    of the mixing-matrix GP prior. Gamma priors default to 1e-3 everywhere
    (weakly informative).
    """

    lengthscales: np.ndarray
    ell_z: float = 1.0
    ell_b: float = 1.0
    alpha_f: float = 1e-3
    beta_f: float = 1e-3
    alpha_u: float = 1e-3
    beta_u: float = 1e-3
    alpha_w: float = 1e-3
    beta_w: float = 1e-3
    alpha_b: float = 1e-3
    beta_b: float = 1e-3
    jitter: float = 1e-8

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float).ravel()
        object.__setattr__(self, "lengthscales", ls)
        if ls.size < 1 or np.any(ls <= 0.0):
            raise ValueError("lengthscales must be positive")
        for name in ("ell_z", "ell_b", "alpha_f", "beta_f", "alpha_u", "beta_u",
                     "alpha_w", "beta_w", "alpha_b", "beta_b", "jitter"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def q(self) -> int:
        return self.lengthscales.size
