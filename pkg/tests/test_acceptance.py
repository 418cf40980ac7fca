"""End-to-end acceptance suite for the package's shipped guarantees.

Eight checks: (1) the coupled non-stationary kernel beats a separable
baseline on held-out switch data, (2) toy-covariance recovery reaches
0.7 and improves with sample count, (3) survey co-kriging accuracy on
the Jura tables when they are available locally, (4) a resample study
recovers the generating covariance with significant p-values, (5) every
variational fit performed here has a monotone ELBO trace, (6) the
factor-objective gradient passes finite differences raw and whitened,
(7) the closed-form Gaussian updates match dense exact conditionals and
the truncated-normal moments match quadrature, (8) all kernel builders
emit symmetric PSD matrices and the non-stationary kernel collapses to
the stationary one at equal lengthscales.

Each test prints one PASS/FAIL line with its headline numbers. The
studies are module fixtures so the monotonicity audit sees every fit.
"""

import os
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from lcgp.baselines import fit_switch_kron, fit_switch_wgcc, hold_out_random
from lcgp.cli import _fd_errors, _random_z_instance
from lcgp.core import Dims, HyperParams
from lcgp.dataio import read_jura
from lcgp.kernels import (gibbs_block_matrix, joint_kernel, kronecker_kernel,
                          se_kernel_matrix)
from lcgp.predict import predict_outputs
from lcgp.synth import (SwitchSpec, ToySpec, empirical_pvalue, fisher_combine,
                        gen_switch, gen_toy, recovery_score,
                        regression_metrics, resample_from_model,
                        toy_true_covariance)
from lcgp.vb import (FitConfig, Problem, VariationalState, fit, tn_moments,
                     update_q_b, update_q_u, update_q_wb)

TRACES: list = []  # (label, [elbo per sweep]) for every fit run here


def _report(label: str, ok: bool, detail: str):
    print(f"ACCEPTANCE {label}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{label}: {detail}"


def _record(label: str, model):
    TRACES.append((label, [rec["elbo"] for rec in model.elbo_trace]))


# -- studies (module-scoped so the ELBO audit can reuse them) ---------------


@pytest.fixture(scope="module")
def switch_study():
    t0 = time.time()
    mse_w, mse_k, mse_0 = [], [], []
    for seed in range(10):
        data, f_true = gen_switch(SwitchSpec(seed=seed))
        hidden = hold_out_random(data.x, 3, seed=1000 + seed)
        wf = fit_switch_wgcc(data, seed=seed, hidden=hidden)
        kf = fit_switch_kron(data, seed=seed, hidden=hidden)
        mse_w.append(np.mean((wf.f_hat[hidden] - f_true[hidden]) ** 2))
        mse_k.append(np.mean((kf.f_hat[hidden] - f_true[hidden]) ** 2))
        mse_0.append(np.mean(f_true[hidden] ** 2))
    return {"wgcc": float(np.mean(mse_w)), "kron": float(np.mean(mse_k)),
            "zero": float(np.mean(mse_0)), "elapsed": time.time() - t0}


@pytest.fixture(scope="module")
def toy_recovery_study():
    t0 = time.time()
    means = {}
    for q in (2, 3):
        per_s = []
        for s in (1, 5, 10, 20):
            scores = []
            for seed in range(5):
                spec = ToySpec(q=q, n_samples=s, n=50, ell=0.3,
                               noise_sd=0.25, seed=seed)
                data, sigma = gen_toy(spec)
                hyper = HyperParams(lengthscales=np.full(q, 0.3), ell_z=0.5,
                                    ell_b=1.0)
                model = fit(data, hyper, FitConfig(max_iters=120, seed=seed))
                _record(f"recovery q={q} S={s} seed={seed}", model)
                c_true = toy_true_covariance(model.x, sigma, spec.ell)
                scores.append(recovery_score(c_true, model.wgcc, q).score)
            per_s.append(float(np.mean(scores)))
        means[q] = per_s
    return {"means": means, "elapsed": time.time() - t0}


@pytest.fixture(scope="module")
def resample_study():
    t0 = time.time()
    means, pvals = {}, []
    for q in (2, 3, 4):
        scores = []
        for seed in range(10):
            spec = ToySpec(q=q, m=6, n_samples=50, n=40, seed=seed)
            data, _ = gen_toy(spec)
            hyper = HyperParams(lengthscales=np.full(q, spec.ell), ell_z=1.0,
                                ell_b=1.0)
            base = fit(data, hyper, FitConfig(max_iters=40, seed=seed))
            _record(f"resample base q={q} seed={seed}", base)
            res = resample_from_model(base, seed=seed + 1)
            refit = fit(res, hyper, FitConfig(max_iters=40, seed=seed))
            _record(f"resample refit q={q} seed={seed}", refit)
            rec = recovery_score(base.wgcc, refit.wgcc, q)
            scores.append(rec.score)
            pvals.append(empirical_pvalue(rec.score, refit, base.wgcc,
                                          n_draws=200, seed=seed))
        means[q] = float(np.mean(scores))
    return {"means": means, "pvals": pvals, "elapsed": time.time() - t0}


# -- the eight checks -------------------------------------------------------


def test_switch_coupled_kernel_beats_separable(switch_study):
    r = switch_study
    ratio = r["wgcc"] / r["kron"]
    ok = (ratio <= 0.85 and r["wgcc"] < r["zero"] and r["kron"] < r["zero"]
          and r["elapsed"] < 120.0)
    _report("switch comparison", ok,
            f"mse coupled={r['wgcc']:.4f} separable={r['kron']:.4f} "
            f"ratio={ratio:.3f} zero={r['zero']:.2f} "
            f"elapsed={r['elapsed']:.0f}s")


def test_toy_recovery_improves_with_samples(toy_recovery_study):
    r = toy_recovery_study
    ok = r["elapsed"] < 600.0
    detail = []
    for q, per_s in r["means"].items():
        final_ok = per_s[-1] >= 0.7
        mono_ok = bool(np.all(np.diff(per_s) >= -0.05))
        ok = ok and final_ok and mono_ok
        detail.append(f"q={q} means={np.round(per_s, 3).tolist()}")
    _report("sample-count recovery", ok,
            "; ".join(detail) + f"; elapsed={r['elapsed']:.0f}s")


def test_jura_cokriging_accuracy():
    jdir = os.environ.get("LCGP_JURA_DIR")
    if not jdir:
        pytest.skip("Jura tables not bundled and no network access; set "
                    "LCGP_JURA_DIR to a directory holding prediction.dat "
                    "and validation.dat to run this check")
    ppath = os.path.join(jdir, "prediction.dat")
    vpath = os.path.join(jdir, "validation.dat")
    if not (os.path.exists(ppath) and os.path.exists(vpath)):
        pytest.skip(f"missing prediction.dat/validation.dat under {jdir}")
    t0 = time.time()
    train = read_jura(ppath)
    val = read_jura(vpath)
    hyper = HyperParams(lengthscales=np.full(2, 0.5), ell_z=1.0, ell_b=1.0)
    model = fit(train, hyper,
                FitConfig(max_iters=200, seed=0, scale_inputs=True))
    _record("jura fit", model)
    y_pred = predict_outputs(model, val.x, s=0)
    scale = model.stats.scale[:, None]
    mean = model.stats.mean[:, None]
    mae, mse = regression_metrics((y_pred - mean) / scale,
                                  (val.y[0] - mean) / scale)
    elapsed = time.time() - t0
    ok = mae <= 0.75 and mse <= 0.95 and elapsed < 900.0
    _report("survey co-kriging", ok,
            f"NQ={model.dims.nq} std mae={mae:.3f} mse={mse:.3f} "
            f"elapsed={elapsed:.0f}s")


def test_resample_recovery_study(resample_study):
    r = resample_study
    stat, p = fisher_combine(r["pvals"])
    ok = all(m >= 0.8 for m in r["means"].values()) and p < 0.01
    _report("resample recovery", ok,
            f"means={ {q: round(m, 3) for q, m in r['means'].items()} } "
            f"fisher stat={stat:.1f} p={p:.2e} "
            f"elapsed={r['elapsed']:.0f}s")


def test_elbo_monotone_across_acceptance_fits(toy_recovery_study,
                                              resample_study):
    assert TRACES, "no fits were recorded"
    worst, where = -np.inf, None
    for label, elbos in TRACES:
        for a, b in zip(elbos, elbos[1:]):
            viol = (a - b) / max(1.0, abs(a))
            if viol > worst:
                worst, where = viol, label
    ok = worst <= 1e-8
    _report("elbo monotonicity", ok,
            f"{len(TRACES)} fits, worst relative decrease {worst:.2e} "
            f"({where})")


def test_z_gradient_finite_difference_suite():
    rng = np.random.default_rng(0)
    worst_raw = worst_white = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 6))
        q = int(rng.integers(1, 4))
        nu = int(rng.integers(1, 4))
        ctx, z, omega_u = _random_z_instance(rng, n, q, nu)
        raw, white = _fd_errors(ctx, z, omega_u)
        worst_raw = max(worst_raw, raw)
        worst_white = max(worst_white, white)
    ok = worst_raw < 1e-4 and worst_white < 1e-4
    _report("factor gradient", ok,
            f"20 instances, max rel err raw={worst_raw:.2e} "
            f"whitened={worst_white:.2e}")


def _oracle_state(rng, prob, classify):
    d = prob.dims

    def psd(k):
        a = rng.normal(size=(k, k))
        return a @ a.T / k + 0.1 * np.eye(k)

    state = VariationalState(
        mu_u=rng.normal(size=(d.s, d.nq)), sigma_u=psd(d.nq),
        mu_b=rng.normal(size=(d.m, d.nq)), sigma_b=psd(d.nq),
        z=rng.normal(0.0, 0.6, size=(d.nq, d.nu)),
        omega_u=float(rng.uniform(0.5, 2.0)), omf_a=2.0, omf_b=1.5)
    if classify:
        state.mu_wb = rng.normal(size=d.nq + 1)
        state.sigma_wb = psd(d.nq + 1)
        state.lam_w_a, state.lam_w_b = 2.0, 3.0
        state.lam_b_a, state.lam_b_b = 1.5, 2.5
        state.g = rng.normal(size=d.s)
        state.h_mean, state.h_sq = tn_moments(state.g, prob.r)
    return state


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_gaussian_updates_exact_conditional_suite():
    rng = np.random.default_rng(1)
    worst = 0.0
    for n, m, q, s, classify in [(3, 2, 2, 2, False), (2, 2, 2, 3, False),
                                 (3, 2, 1, 2, True), (2, 3, 2, 4, True),
                                 (2, 1, 3, 1, False)]:
        x = np.sort(rng.uniform(-1.0, 1.0, n))
        y = rng.normal(size=(s, m, n))
        r = rng.choice([-1.0, 1.0], size=s) if classify else None
        hyper = HyperParams(lengthscales=rng.uniform(0.3, 0.8, q), ell_z=0.8,
                            ell_b=0.9)
        prob = Problem(x, y, r, Dims(n=n, m=m, q=q, s=s, nu=q), hyper)
        state = _oracle_state(rng, prob, classify)
        nq = n * q
        mask = np.kron(np.eye(n), np.ones((q, q)))
        ef = state.omega_f_mean

        # dense operator applying <B(x_i)> per input segment
        bop = np.zeros((m * n, nq))
        mu_b3 = state.mu_b.reshape(m, n, q)
        for mm in range(m):
            for i in range(n):
                bop[mm * n + i, i * q:(i + 1) * q] = mu_b3[mm, i]
        kmat = joint_kernel(state.z, prob.k_q, state.omega_u)
        prec = np.linalg.inv(kmat) + ef * (bop.T @ bop
                                           + m * (mask * state.sigma_b))
        rhs = ef * np.stack([bop.T @ y[si].reshape(-1) for si in range(s)])
        if classify:
            m2 = np.outer(state.mu_wb, state.mu_wb) + state.sigma_wb
            prec = prec + m2[:-1, :-1]
            rhs = rhs + (state.h_mean[:, None] * state.mu_wb[None, :-1]
                         - m2[:-1, -1][None, :])
        sigma_ref = np.linalg.inv(prec)
        mu_u, sigma_u = update_q_u(prob, state)
        worst = max(worst, _rel(sigma_u, sigma_ref),
                    _rel(mu_u, rhs @ sigma_ref.T))

        uops = []
        mu_u3 = state.mu_u.reshape(s, n, q)
        for si in range(s):
            op = np.zeros((n, nq))
            for i in range(n):
                op[i, i * q:(i + 1) * q] = mu_u3[si, i]
            uops.append(op)
        prec_b = np.kron(np.linalg.inv(prob.lb @ prob.lb.T), np.eye(q)) \
            + ef * (sum(op.T @ op for op in uops) + s * (mask * state.sigma_u))
        sigma_b_ref = np.linalg.inv(prec_b)
        rhs_b = ef * np.stack([sum(uops[si].T @ y[si, mi] for si in range(s))
                               for mi in range(m)])
        mu_b, sigma_b = update_q_b(prob, state)
        worst = max(worst, _rel(sigma_b, sigma_b_ref),
                    _rel(mu_b, rhs_b @ sigma_b_ref.T))

        if classify:
            design = np.hstack([state.mu_u, np.ones((s, 1))])
            prec_w = design.T @ design
            prec_w[:-1, :-1] += s * state.sigma_u \
                + (state.lam_w_a / state.lam_w_b) * np.eye(nq)
            prec_w[-1, -1] += state.lam_b_a / state.lam_b_b
            sigma_wb_ref = np.linalg.inv(prec_w)
            mu_wb, sigma_wb = update_q_wb(prob, state)
            worst = max(worst, _rel(sigma_wb, sigma_wb_ref),
                        _rel(mu_wb, sigma_wb_ref @ (design.T @ state.h_mean)))

    worst_tn = 0.0
    for g in (-10.0, -1.0, 0.0, 1.0, 10.0):
        for r in (-1.0, 1.0):
            lo, hi = (0.0, np.inf) if r > 0 else (-np.inf, 0.0)

            def moment(k):
                return quad(lambda h: h**k * norm.pdf(h - g), lo, hi,
                            epsabs=0.0, epsrel=1e-13, limit=200)[0]

            m0 = moment(0)
            mean, sq = tn_moments(g, r)
            worst_tn = max(worst_tn,
                           abs(mean - moment(1) / m0) / abs(moment(1) / m0),
                           abs(sq - moment(2) / m0) / abs(moment(2) / m0))
    ok = worst < 1e-8 and worst_tn < 1e-8
    _report("conditional updates", ok,
            f"gaussian max rel err={worst:.2e} "
            f"truncated-moment max rel err={worst_tn:.2e}")


def test_kernel_symmetry_psd_suite():
    rng = np.random.default_rng(2)
    worst_sym = 0.0
    worst_eig = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 8))
        q = int(rng.integers(1, 5))
        nu = int(rng.integers(1, 5))
        x = np.sort(rng.uniform(-2.0, 2.0, n))
        ls = rng.uniform(0.1, 2.0, q)
        z = rng.normal(size=(n * q, nu))
        w = rng.normal(size=(q, nu))
        mats = [gibbs_block_matrix(x, ls), z @ z.T,
                joint_kernel(z, gibbs_block_matrix(x, ls),
                             float(rng.uniform(0.2, 5.0))),
                kronecker_kernel(w @ w.T,
                                 se_kernel_matrix(x, ell=float(ls[0]), var=1.0))]
        for mat in mats:
            scale = max(np.max(np.abs(mat)), 1e-300)
            worst_sym = max(worst_sym, float(np.max(np.abs(mat - mat.T))) / scale)
            tr = float(np.trace(mat))
            min_eig = float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())
            if min_eig < 0.0:
                worst_eig = max(worst_eig, -min_eig / max(tr, 1e-300))
    # equal lengthscales collapse the non-stationary blocks to one
    # stationary kernel shared by every signal pair
    worst_eq = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 8))
        q = int(rng.integers(1, 5))
        x = np.sort(rng.uniform(-2.0, 2.0, n))
        ell = float(rng.uniform(0.1, 2.0))
        k_q = gibbs_block_matrix(x, np.full(q, ell))
        ref = np.kron(se_kernel_matrix(x, ell=ell, var=1.0), np.ones((q, q)))
        worst_eq = max(worst_eq, float(np.max(np.abs(k_q - ref))))
    ok = worst_sym <= 1e-12 and worst_eig <= 1e-8 and worst_eq < 1e-12
    _report("kernel structure", ok,
            f"100 instances, sym err={worst_sym:.2e} "
            f"neg-eig/trace={worst_eig:.2e} equal-scale diff={worst_eq:.2e}")
