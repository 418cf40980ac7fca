"""Command-line front end.

Subcommands: fit, predict, simulate, evaluate, gradcheck. Every flag has
a config-file twin (flat key=value lines, given via --config); explicit
flags win over the file. Exit codes: 0 success, 2 usage error, 3 numeric
failure, 4 fit stopped at the iteration cap.
"""

from __future__ import annotations

import os

# Cap BLAS worker pools before numpy loads its backend.
_threads = os.environ.get("LCGP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import glob
import json
import sys

import numpy as np

from . import dataio, predict, synth, vb, zopt
from .core import Dataset, HyperParams, NumericsError, standardize

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_NONCONVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcgp",
        description="Multi-output GP regression/classification with a "
                    "latent-correlation Wishart-Gibbs kernel.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p_fit = sub.add_parser("fit", help="fit a model to CSV data")
    common(p_fit)
    p_fit.add_argument("--data", nargs="+", default=None,
                       help="sample CSVs, a directory, a glob, or a Jura .dat")
    p_fit.add_argument("--labels", default=None, help="labels CSV")
    p_fit.add_argument("--q", type=int, default=None, help="latent signals")
    p_fit.add_argument("--nu", type=int, default=None, help="Wishart degrees")
    p_fit.add_argument("--lu", default=None,
                       help="signal lengthscale(s), scalar or comma list")
    p_fit.add_argument("--lb", type=float, default=None, help="mixing lengthscale")
    p_fit.add_argument("--lz", type=float, default=None, help="factor lengthscale")
    p_fit.add_argument("--classify", action=argparse.BooleanOptionalAction,
                       default=None)
    p_fit.add_argument("--max-iters", type=int, default=None)
    p_fit.add_argument("--tol", type=float, default=None)
    p_fit.add_argument("--val-data", nargs="+", default=None,
                       help="held-out CSVs (or Jura .dat) for metrics")
    p_fit.add_argument("--val-labels", default=None)

    p_pred = sub.add_parser("predict", help="predict from a saved model")
    common(p_pred)
    p_pred.add_argument("--model", default=None, required=False)
    p_pred.add_argument("--data", nargs="+", default=None,
                        help="CSV with prediction inputs (or full samples "
                             "for label prediction)")
    p_pred.add_argument("--sample", type=int, default=None,
                        help="training sample index for latent prediction")

    p_sim = sub.add_parser("simulate", help="emit synthetic datasets")
    common(p_sim)
    p_sim.add_argument("--preset", choices=("switch", "toy", "resample"),
                       default=None)
    p_sim.add_argument("--model", default=None, help="model for resample preset")
    p_sim.add_argument("--q", type=int, default=None)
    p_sim.add_argument("--n", type=int, default=None, help="input points")
    p_sim.add_argument("--samples", type=int, default=None)

    p_eval = sub.add_parser("evaluate", help="metrics from files or models")
    common(p_eval)
    p_eval.add_argument("--pred", nargs="+", default=None)
    p_eval.add_argument("--truth", nargs="+", default=None)
    p_eval.add_argument("--scores", default=None,
                        help="CSV of classifier scores for AUC")
    p_eval.add_argument("--labels", default=None)
    p_eval.add_argument("--model", default=None)
    p_eval.add_argument("--truth-cov", default=None,
                        help=".npy truth covariance for recovery scoring")
    p_eval.add_argument("--null-draws", type=int, default=None)
    p_eval.add_argument("--pvals", default=None,
                        help="comma list of p-values to Fisher-combine")

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference check of the Z gradient")
    common(p_grad)
    p_grad.add_argument("--instances", type=int, default=None)
    return parser


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}


def _opt(args, cfg, key, default=None, cast=str):
    value = getattr(args, key, None)
    if value is None and key in cfg:
        raw = cfg[key]
        if cast is bool:
            value = _BOOLS[raw.lower()]
        elif cast is list:
            value = raw.split()
        else:
            value = cast(raw)
    return default if value is None else value


def _expand_data_args(entries) -> list[str]:
    paths = []
    for entry in entries:
        if os.path.isdir(entry):
            # prefer sample files so metadata CSVs in the directory
            # (sigma_true, truth_signal, labels) are not swept in
            found = sorted(glob.glob(os.path.join(entry, "sample_*.csv"))) \
                or sorted(glob.glob(os.path.join(entry, "*.csv")))
            paths.extend(found)
        elif any(c in entry for c in "*?["):
            paths.extend(sorted(glob.glob(entry)))
        else:
            paths.append(entry)
    if not paths:
        raise ValueError("no dataset files matched --data")
    return paths


def _read_any(entries, labels=None) -> Dataset:
    paths = _expand_data_args(entries)
    if len(paths) == 1 and paths[0].endswith(".dat"):
        return dataio.read_jura(paths[0])
    return dataio.read_dataset(paths, labels)


def _ensure_out(out: str | None) -> str:
    out = out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _standardized_metrics(model, y_pred, y_true):
    scale = model.stats.scale[:, None]
    mean = model.stats.mean[:, None]
    return synth.regression_metrics((y_pred - mean) / scale, (y_true - mean) / scale)


def cmd_fit(args, cfg) -> int:
    data = _opt(args, cfg, "data", cast=list)
    if not data:
        raise ValueError("fit requires --data")
    q = _opt(args, cfg, "q", cast=int)
    if q is None:
        raise ValueError("fit requires --q")
    labels = _opt(args, cfg, "labels")
    dataset = _read_any(data, labels)
    lu_raw = _opt(args, cfg, "lu", default="0.5")
    ls = np.array([float(v) for v in str(lu_raw).split(",")])
    if ls.size == 1:
        ls = np.full(q, ls[0])
    if ls.size != q:
        raise ValueError(f"--lu gives {ls.size} lengthscales for q={q}")
    hyper = HyperParams(lengthscales=ls,
                        ell_z=_opt(args, cfg, "lz", 1.0, float),
                        ell_b=_opt(args, cfg, "lb", 1.0, float))
    config = vb.FitConfig(
        max_iters=_opt(args, cfg, "max_iters", 200, int),
        tol=_opt(args, cfg, "tol", 1e-6, float),
        classify=_opt(args, cfg, "classify", False, bool),
        seed=_opt(args, cfg, "seed", 0, int),
        nu=_opt(args, cfg, "nu", cast=int))
    model = vb.fit(dataset, hyper, config)
    out = _ensure_out(_opt(args, cfg, "out"))
    dataio.save_model(model, os.path.join(out, "model.npz"))
    with open(os.path.join(out, "trace.jsonl"), "w") as fh:
        for rec in model.elbo_trace:
            fh.write(json.dumps(rec) + "\n")
    summary = {"converged": model.converged, "n_iters": model.n_iters,
               "elbo": model.elbo_trace[-1]["elbo"], "omega_u": model.state.omega_u,
               "omega_f_mean": model.state.omega_f_mean}

    val = _opt(args, cfg, "val_data", cast=list)
    if val:
        val_ds = _read_any(val, _opt(args, cfg, "val_labels"))
        y_pred = predict.predict_outputs(model, val_ds.x, s=0)
        mae, mse = synth.regression_metrics(y_pred, val_ds.y[0])
        mae_std, mse_std = _standardized_metrics(model, y_pred, val_ds.y[0])
        summary["val"] = {"mae": mae, "mse": mse,
                          "mae_std": mae_std, "mse_std": mse_std}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"fit: elbo={summary['elbo']:.6f} sweeps={model.n_iters} "
          f"converged={model.converged}")
    if "val" in summary:
        print(f"validation: mae={summary['val']['mae']:.4f} "
              f"mse={summary['val']['mse']:.4f} "
              f"(standardized {summary['val']['mae_std']:.4f} / "
              f"{summary['val']['mse_std']:.4f})")
    return EXIT_OK if model.converged else EXIT_NONCONVERGED


def cmd_predict(args, cfg) -> int:
    model_path = _opt(args, cfg, "model")
    data = _opt(args, cfg, "data", cast=list)
    if not model_path or not data:
        raise ValueError("predict requires --model and --data")
    model = dataio.load_model(model_path)
    out = _ensure_out(_opt(args, cfg, "out"))
    paths = _expand_data_args(data)
    if model.config.classify:
        ds = _read_any(data)
        probs = [predict.predict_label(model, ds.y[s]) for s in range(ds.n_samples)]
        report = os.path.join(out, "probabilities.csv")
        with open(report, "w") as fh:
            fh.write("sample,probability\n")
            for s, p in enumerate(probs):
                fh.write(f"{s},{p!r}\n")
        print(f"wrote {report}")
        return EXIT_OK
    x_star = dataio.read_inputs(paths[0])
    s = _opt(args, cfg, "sample", 0, int)
    y_pred = predict.predict_outputs(model, x_star, s=s)
    pred_ds = Dataset(x=x_star, y=y_pred[None])
    path = dataio.write_dataset(pred_ds, out, prefix="prediction")[0]
    print(f"wrote {path}")
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    preset = _opt(args, cfg, "preset")
    if preset is None:
        raise ValueError("simulate requires --preset")
    seed = _opt(args, cfg, "seed", 0, int)
    out = _ensure_out(_opt(args, cfg, "out"))
    if preset == "switch":
        spec = synth.SwitchSpec(n=_opt(args, cfg, "n", 100, int), seed=seed)
        dataset, f_true = synth.gen_switch(spec)
        dataio.write_dataset(dataset, out)
        dataio.write_dataset(Dataset(x=dataset.x, y=f_true[None]), out,
                             prefix="truth_signal")
        meta = {"preset": "switch", "n": spec.n, "seed": seed,
                "noise_sd": spec.noise_sd, "signal_sd": spec.signal_sd,
                "ell": spec.ell}
    elif preset == "toy":
        q = _opt(args, cfg, "q", 2, int)
        spec = synth.ToySpec(q=q, n_samples=_opt(args, cfg, "samples", 10, int),
                             n=_opt(args, cfg, "n", 50, int), seed=seed)
        dataset, sigma = synth.gen_toy(spec)
        dataio.write_dataset(dataset, out)
        np.savetxt(os.path.join(out, "sigma_true.csv"), sigma, delimiter=",")
        # dense NQ x NQ ground truth in the form `evaluate --truth-cov` takes
        cov = synth.toy_true_covariance(dataset.x, sigma, spec.ell)
        np.savetxt(os.path.join(out, "cov_true.csv"), cov, delimiter=",")
        meta = {"preset": "toy", "q": q, "n": spec.n, "samples": spec.n_samples,
                "seed": seed, "ell": spec.ell, "noise_sd": spec.noise_sd}
    else:
        model_path = _opt(args, cfg, "model")
        if not model_path:
            raise ValueError("resample preset requires --model")
        model = dataio.load_model(model_path)
        n_samples = _opt(args, cfg, "samples", cast=int)
        dataset = synth.resample_from_model(model, seed=seed, n_samples=n_samples)
        dataio.write_dataset(dataset, out)
        meta = {"preset": "resample", "model": model_path, "seed": seed,
                "samples": dataset.n_samples}
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    print(f"wrote {dataset.n_samples} sample file(s) to {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    out = _opt(args, cfg, "out")
    report: dict = {}
    lines = []
    pred = _opt(args, cfg, "pred", cast=list)
    truth = _opt(args, cfg, "truth", cast=list)
    if pred and truth:
        ds_pred = _read_any(pred)
        ds_true = _read_any(truth)
        mae, mse = synth.regression_metrics(ds_pred.y, ds_true.y)
        report["mae"], report["mse"] = mae, mse
        lines.append(f"MAE {mae:.6f}  MSE {mse:.6f}")
    scores_path = _opt(args, cfg, "scores")
    labels_path = _opt(args, cfg, "labels")
    if scores_path and labels_path:
        scores = np.loadtxt(scores_path, delimiter=",", skiprows=1, usecols=-1)
        rows = np.loadtxt(labels_path, delimiter=",", skiprows=1, usecols=-1)
        value = synth.auc(scores, rows)
        report["auc"] = value
        lines.append(f"AUC {value:.6f}")
    model_path = _opt(args, cfg, "model")
    cov_path = _opt(args, cfg, "truth_cov")
    if model_path and cov_path:
        model = dataio.load_model(model_path)
        if cov_path.endswith(".npy"):
            c_true = np.load(cov_path, allow_pickle=False)
        else:
            c_true = np.atleast_2d(np.loadtxt(cov_path, delimiter=","))
        if c_true.shape == (model.dims.q, model.dims.q) != model.wgcc.shape:
            raise ValueError(
                "truth covariance is Q x Q (a generator correlation); "
                "recovery needs the dense NQ x NQ covariance over the "
                "training grid (simulate --preset toy writes cov_true.csv)")
        rec = synth.recovery_score(c_true, model.wgcc, model.dims.q)
        report["recovery_score"] = rec.score
        report["permutation"] = list(rec.permutation)
        lines.append(f"recovery score {rec.score:.6f} "
                     f"(permutation {rec.permutation})")
        draws = _opt(args, cfg, "null_draws", cast=int)
        if draws:
            p = synth.empirical_pvalue(rec.score, model, c_true, n_draws=draws,
                                       seed=_opt(args, cfg, "seed", 0, int))
            report["empirical_p"] = p
            lines.append(f"empirical p {p:.6f} ({draws} null draws)")
    pvals_raw = _opt(args, cfg, "pvals")
    if pvals_raw:
        pvals = [float(v) for v in str(pvals_raw).split(",")]
        stat, p = synth.fisher_combine(pvals)
        report["fisher_statistic"], report["fisher_p"] = stat, p
        lines.append(f"Fisher statistic {stat:.6f}  combined p {p:.6g}")
    if not report:
        raise ValueError("evaluate needs --pred/--truth, --scores/--labels, "
                         "--model/--truth-cov, or --pvals")
    text = "\n".join(lines)
    print(text)
    if out:
        out = _ensure_out(out)
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(text + "\n")
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    n_instances = _opt(args, cfg, "instances", 20, int)
    seed = _opt(args, cfg, "seed", 0, int)
    rng = np.random.default_rng(seed)
    worst_raw = worst_white = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 6))
        q = int(rng.integers(1, 4))
        nu = int(rng.integers(1, 4))
        ctx, z, omega_u = _random_z_instance(rng, n, q, nu)
        raw, white = _fd_errors(ctx, z, omega_u)
        worst_raw = max(worst_raw, raw)
        worst_white = max(worst_white, white)
    print(f"gradcheck over {n_instances} instances: "
          f"max rel err raw={worst_raw:.3e} whitened={worst_white:.3e}")
    return EXIT_OK if max(worst_raw, worst_white) < 1e-4 else EXIT_NUMERIC


def _random_z_instance(rng, n, q, nu):
    from ._linalg import chol_jitter
    from .kernels import gibbs_block_matrix, se_kernel_matrix

    x = np.sort(rng.uniform(-1.0, 1.0, n))
    ls = rng.uniform(0.2, 1.0, q)
    k_q = gibbs_block_matrix(x, ls)
    lz, _ = chol_jitter(se_kernel_matrix(x, ell=0.5, var=1.0 / nu))
    s = int(rng.integers(1, 4))
    u = rng.normal(size=(s, n * q))
    ctx = zopt.ZObjectiveContext(s_u=u.T @ u + 0.1 * np.eye(n * q), n_sets=s,
                                 k_q=k_q, lz=lz, alpha_u=1e-3, beta_u=1e-3)
    z = rng.normal(0.0, 0.5, size=(n * q, nu))
    return ctx, z, float(rng.uniform(0.5, 3.0))


def _fd_errors(ctx, z, omega_u, step=1e-5):
    _, dz, _ = zopt.z_objective_grad(z, omega_u, ctx)
    fd = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += step
        zm[idx] -= step
        fd[idx] = (zopt.z_objective(zp, omega_u, ctx)
                   - zopt.z_objective(zm, omega_u, ctx)) / (2 * step)
    scale = np.maximum(np.abs(fd), 1.0)
    raw = float(np.max(np.abs(dz - fd) / scale))

    zhat = zopt.whiten(z, ctx.lz)
    gw = zopt.whiten_gradient(dz, ctx.lz)
    fdw = np.zeros_like(zhat)
    for idx in np.ndindex(zhat.shape):
        zp, zm = zhat.copy(), zhat.copy()
        zp[idx] += step
        zm[idx] -= step
        fdw[idx] = (zopt.z_objective(zopt.unwhiten(zp, ctx.lz), omega_u, ctx)
                    - zopt.z_objective(zopt.unwhiten(zm, ctx.lz), omega_u, ctx)) / (2 * step)
    scale = np.maximum(np.abs(fdw), 1.0)
    white = float(np.max(np.abs(gw - fdw) / scale))
    return raw, white


_COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate,
             "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(getattr(args, "config", None))
        return _COMMANDS[args.command](args, cfg)
    except NumericsError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
