"""Factor-optimization objective, gradients, whitening, and L-BFGS."""

import numpy as np
import pytest
from scipy.linalg import cho_solve

from lcgp._linalg import block_solve, chol_jitter, chol_logdet, chol_raw
from lcgp.core import NumericsError
from lcgp.kernels import gibbs_block_matrix, se_kernel_matrix
from lcgp.zopt import (LbfgsResult, ZObjectiveContext, lbfgs_minimize,
                       optimize_lengthscales, optimize_z, unwhiten, whiten,
                       whiten_gradient, z_gradient, z_objective,
                       z_objective_grad)


def random_instance(rng, n=None, q=None, nu=None, n_sets=None):
    n = n or int(rng.integers(2, 6))
    q = q or int(rng.integers(1, 4))
    nu = nu or int(rng.integers(1, 4))
    n_sets = n_sets or int(rng.integers(1, 4))
    x = np.sort(rng.uniform(-1.0, 1.0, n))
    ls = rng.uniform(0.2, 1.0, q)
    k_q = gibbs_block_matrix(x, ls)
    lz, _ = chol_jitter(se_kernel_matrix(x, ell=0.5, var=1.0 / nu))
    u = rng.normal(size=(n_sets, n * q))
    ctx = ZObjectiveContext(s_u=u.T @ u + 0.1 * np.eye(n * q), n_sets=n_sets,
                            k_q=k_q, lz=lz, alpha_u=1e-3, beta_u=1e-3)
    z = rng.normal(0.0, 0.5, size=(n * q, nu))
    omega_u = float(rng.uniform(0.5, 3.0))
    return ctx, z, omega_u, x, ls


def test_objective_matches_direct_formula():
    rng = np.random.default_rng(3)
    for _ in range(10):
        ctx, z, omega_u, _, _ = random_instance(rng)
        k = (z @ z.T) * ctx.k_q + np.eye(ctx.nq) / omega_u
        lk = chol_raw(k)
        kz = ctx.lz @ ctx.lz.T
        quad = float(np.trace(z.T @ np.kron(
            np.linalg.inv(kz), np.eye(ctx.nq // ctx.lz.shape[0])) @ z))
        expect = -0.5 * (ctx.n_sets * chol_logdet(lk)
                         + float(np.trace(cho_solve((lk, True), ctx.s_u)))
                         + quad)
        expect += (ctx.alpha_u - 1.0) * np.log(omega_u) - ctx.beta_u * omega_u
        assert z_objective(z, omega_u, ctx) == pytest.approx(expect, rel=1e-9)


def test_gradient_finite_differences_raw_and_whitened():
    # 20 randomized instances; max relative error < 1e-4 in both coordinates
    rng = np.random.default_rng(0)
    step = 1e-5
    worst_raw = worst_white = 0.0
    for _ in range(20):
        ctx, z, omega_u, _, _ = random_instance(rng)
        _, dz, _ = z_objective_grad(z, omega_u, ctx)
        fd = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += step
            zm[idx] -= step
            fd[idx] = (z_objective(zp, omega_u, ctx)
                       - z_objective(zm, omega_u, ctx)) / (2 * step)
        scale = np.maximum(np.abs(fd), 1.0)
        worst_raw = max(worst_raw, float(np.max(np.abs(dz - fd) / scale)))

        zhat = whiten(z, ctx.lz)
        gw = whiten_gradient(dz, ctx.lz)
        fdw = np.zeros_like(zhat)
        for idx in np.ndindex(zhat.shape):
            zp, zm = zhat.copy(), zhat.copy()
            zp[idx] += step
            zm[idx] -= step
            fdw[idx] = (z_objective(unwhiten(zp, ctx.lz), omega_u, ctx)
                        - z_objective(unwhiten(zm, ctx.lz), omega_u, ctx)) / (2 * step)
        scale = np.maximum(np.abs(fdw), 1.0)
        worst_white = max(worst_white, float(np.max(np.abs(gw - fdw) / scale)))
    assert worst_raw < 1e-4
    assert worst_white < 1e-4


def test_theta_gradient_finite_difference():
    rng = np.random.default_rng(7)
    for _ in range(10):
        ctx, z, omega_u, _, _ = random_instance(rng)
        _, _, dtheta = z_objective_grad(z, omega_u, ctx)
        eps = 1e-6
        th = np.log(omega_u)
        fd = (z_objective(z, np.exp(th + eps), ctx)
              - z_objective(z, np.exp(th - eps), ctx)) / (2 * eps)
        assert dtheta == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_z_gradient_is_objective_grad_slice():
    rng = np.random.default_rng(11)
    ctx, z, omega_u, _, _ = random_instance(rng)
    np.testing.assert_array_equal(z_gradient(z, omega_u, ctx),
                                  z_objective_grad(z, omega_u, ctx)[1])


def test_prior_gradient_term():
    # with S_u = 0 and n_sets = 0 the Z-dependence reduces to the prior
    # quadratic, whose gradient is the full -Kz^{-1} Z (no factor 1/2)
    rng = np.random.default_rng(5)
    n, q, nu = 4, 2, 3
    x = np.linspace(-1, 1, n)
    k_q = gibbs_block_matrix(x, np.full(q, 0.5))
    lz, _ = chol_jitter(se_kernel_matrix(x, ell=0.5, var=1.0 / nu))
    ctx = ZObjectiveContext(s_u=np.zeros((n * q, n * q)), n_sets=0, k_q=k_q,
                            lz=lz, alpha_u=1e-3, beta_u=1e-3)
    z = rng.normal(size=(n * q, nu))
    _, dz, _ = z_objective_grad(z, 1.0, ctx)
    np.testing.assert_allclose(dz, -block_solve(lz, z), rtol=1e-12, atol=1e-12)


def test_whiten_roundtrip_and_gradient_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, q, k = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        lz, _ = chol_jitter(se_kernel_matrix(np.sort(rng.uniform(-1, 1, n)),
                                             ell=0.7, var=0.5))
        z = rng.normal(size=(n * q, k))
        np.testing.assert_allclose(unwhiten(whiten(z, lz), lz), z,
                                   rtol=1e-10, atol=1e-12)
        # chain rule: d/dZhat = (L^T (x) I) d/dZ equals dense Kronecker form
        g = rng.normal(size=(n * q, k))
        dense = np.kron(lz.T, np.eye(q)) @ g
        np.testing.assert_allclose(whiten_gradient(g, lz), dense,
                                   rtol=1e-12, atol=1e-12)


def test_whitened_prior_is_standard_normal_quadratic():
    # after whitening, the prior quadratic is |Zhat|^2
    rng = np.random.default_rng(9)
    ctx, z, _, _, _ = random_instance(rng)
    zhat = whiten(z, ctx.lz)
    quad = float(np.sum(block_solve(ctx.lz, z) * z))
    assert quad == pytest.approx(float(np.sum(zhat**2)), rel=1e-10)


def test_optimize_z_never_decreases_objective():
    rng = np.random.default_rng(4)
    for _ in range(10):
        ctx, z, omega_u, _, _ = random_instance(rng)
        before = z_objective(z, omega_u, ctx)
        z_new, omega_new, info = optimize_z(z, omega_u, ctx, max_iters=15)
        after = z_objective(z_new, omega_new, ctx)
        assert after >= before - 1e-9 * max(1.0, abs(before))
        assert info["objective"] == pytest.approx(after, rel=1e-8)
        assert omega_new > 0.0


def test_optimize_z_progress_toward_stationarity():
    rng = np.random.default_rng(6)
    ctx, z, omega_u, _, _ = random_instance(rng, n=4, q=2, nu=2)
    g0 = np.linalg.norm(whiten_gradient(z_gradient(z, omega_u, ctx), ctx.lz))
    z1, om1, _ = optimize_z(z, omega_u, ctx, max_iters=200)
    g1 = np.linalg.norm(whiten_gradient(z_gradient(z1, om1, ctx), ctx.lz))
    assert g1 < 0.05 * max(g0, 1.0)


def test_optimize_z_survives_extreme_omega():
    rng = np.random.default_rng(8)
    ctx, z, _, _, _ = random_instance(rng, n=3, q=2, nu=2)
    for omega_u in (1e-8, 1e8):
        z_new, omega_new, info = optimize_z(z, omega_u, ctx, max_iters=10)
        assert np.all(np.isfinite(z_new)) and np.isfinite(omega_new)
        assert info["objective"] >= info["objective0"] - 1e-9


def test_lbfgs_quadratic_exact_minimizer():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 6))
    h = a @ a.T + 6.0 * np.eye(6)
    b = rng.normal(size=6)

    def fun(x):
        return 0.5 * float(x @ h @ x) - float(b @ x), h @ x - b

    res = lbfgs_minimize(fun, np.zeros(6), max_iters=100)
    assert isinstance(res, LbfgsResult)
    assert res.converged
    np.testing.assert_allclose(res.x, np.linalg.solve(h, b), rtol=1e-6, atol=1e-8)


def test_lbfgs_rosenbrock_decreases():
    def rosen(v):
        x, y = v
        f = (1 - x) ** 2 + 100.0 * (y - x * x) ** 2
        g = np.array([-2 * (1 - x) - 400.0 * x * (y - x * x),
                      200.0 * (y - x * x)])
        return f, g

    res = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), max_iters=200)
    assert res.f < 1e-8
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-3)


def test_lbfgs_returns_best_seen_under_nonfinite_region():
    # objective blows up away from the origin; the result must stay finite
    def fun(x):
        if np.linalg.norm(x) > 2.0:
            return np.inf, np.zeros_like(x)
        return float(np.sum(x**2)), 2.0 * x

    res = lbfgs_minimize(fun, np.full(3, 1.0), max_iters=50)
    assert np.isfinite(res.f)
    assert res.f <= 3.0 + 1e-12


def test_optimize_lengthscales_disabled_returns_input():
    rng = np.random.default_rng(12)
    ctx, z, omega_u, x, ls = random_instance(rng)
    out = optimize_lengthscales(ls, x, z, omega_u, ctx, enabled=False)
    np.testing.assert_array_equal(out, ls)


def test_optimize_lengthscales_recovers_generating_scale():
    # single signal, plentiful sets: the data term peaks near the true ell
    rng = np.random.default_rng(13)
    n, q, nu, true_ell = 25, 1, 1, 0.4
    x = np.linspace(-1, 1, n)
    k_true = gibbs_block_matrix(x, np.array([true_ell]))
    lk = chol_raw(k_true + 0.01 * np.eye(n))
    u = (lk @ rng.standard_normal((n, 60))).T
    lz, _ = chol_jitter(se_kernel_matrix(x, ell=0.5, var=1.0))
    ctx = ZObjectiveContext(s_u=u.T @ u, n_sets=60, k_q=k_true, lz=lz,
                            alpha_u=1e-3, beta_u=1e-3)
    z = np.ones((n, 1))
    out = optimize_lengthscales(np.array([1.5]), x, z, 100.0, ctx, enabled=True)
    assert abs(np.log(out[0] / true_ell)) < np.log(1.8)


def test_optimize_lengthscales_never_worse():
    rng = np.random.default_rng(14)
    for _ in range(5):
        ctx, z, omega_u, x, ls = random_instance(rng)

        def data_obj(ls_try):
            k = (z @ z.T) * gibbs_block_matrix(x, ls_try)
            k[np.diag_indices_from(k)] += 1.0 / omega_u
            lk = chol_raw(k)
            return -0.5 * (ctx.n_sets * chol_logdet(lk) + float(
                np.trace(cho_solve((lk, True), ctx.s_u))))

        out = optimize_lengthscales(ls, x, z, omega_u, ctx, enabled=True,
                                    n_steps=20)
        assert data_obj(out) >= data_obj(ls) - 1e-9
