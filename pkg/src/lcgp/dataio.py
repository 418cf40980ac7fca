"""File formats: per-sample CSV datasets, labels, and model archives.

Dataset format: one CSV per sample; header "x" (or "x1,x2" for spatial
data) followed by channel names; one row per input point. All sample
files of a dataset must share the input grid and channel set. Labels
live in a two-column CSV (sample index, label in {-1, +1}).

The Jura loader accepts the published column layout (whitespace- or
comma-separated, any leading junk before the header line containing
Xloc/Yloc) and selects the Cd, Ni, Zn channels.

Models persist as a single .npz archive tagged "lcgp-model-v1": all
moment arrays as little-endian float64 plus a JSON snapshot of the
dimensions, hyperparameters, and fit configuration. Kernel caches are
rebuilt deterministically on load, so save/load round-trips predict
identically.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from ._linalg import chol_jitter, chol_raw
from .core import Dataset, Dims, HyperParams, InputScaler, NormStats
from .kernels import gibbs_block_matrix, joint_kernel, se_kernel_matrix
from .vb import FitConfig, FittedModel, VariationalState

MODEL_FORMAT = "lcgp-model-v1"


# -- dataset CSV ----------------------------------------------------------


def write_dataset(dataset: Dataset, out_dir: str, prefix: str = "sample") -> list[str]:
    """One CSV per sample plus labels.csv when labels are present;
    returns the sample file paths."""
    os.makedirs(out_dir, exist_ok=True)
    x = dataset.x
    x2 = x[:, None] if x.ndim == 1 else x
    x_names = ["x"] if x.ndim == 1 else [f"x{j + 1}" for j in range(x2.shape[1])]
    ch_names = [f"y{m + 1}" for m in range(dataset.n_outputs)]
    paths = []
    for s in range(dataset.n_samples):
        path = os.path.join(out_dir, f"{prefix}_{s:03d}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(x_names + ch_names)
            for i in range(dataset.n_inputs):
                # repr of a Python float round-trips bit-exactly
                writer.writerow([repr(float(v)) for v in x2[i]]
                                + [repr(float(v)) for v in dataset.y[s, :, i]])
        paths.append(path)
    if dataset.r is not None:
        with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "label"])
            for s, lab in enumerate(dataset.r):
                writer.writerow([s, int(lab)])
    return paths


def _read_sample_csv(path: str):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    header = [c.strip() for c in rows[0]]
    n_x = sum(1 for name in header if name == "x" or
              (name.startswith("x") and name[1:].isdigit()))
    if n_x == 0:
        raise ValueError(f"{path}: header must start with x (or x1, x2, ...)")
    try:
        body = np.array([[float(c) for c in r] for r in rows[1:]])
    except ValueError as err:
        raise ValueError(f"{path}: non-numeric value ({err})") from err
    if body.shape[1] != len(header):
        raise ValueError(f"{path}: row width does not match header")
    x = body[:, :n_x]
    y = body[:, n_x:].T  # (M, N)
    if y.shape[0] == 0:
        raise ValueError(f"{path}: no output channels")
    return x[:, 0] if n_x == 1 else x, y, header[n_x:]


def read_dataset(paths, labels_path: str | None = None) -> Dataset:
    """Read sample CSVs (shared grid enforced) and optional labels."""
    paths = list(paths)
    if not paths:
        raise ValueError("no dataset files given")
    xs, ys, chans = zip(*(_read_sample_csv(p) for p in paths))
    for p, x, ch in zip(paths[1:], xs[1:], chans[1:]):
        if not np.array_equal(x, xs[0]):
            raise ValueError(f"{p}: input grid differs from {paths[0]}")
        if ch != chans[0]:
            raise ValueError(f"{p}: channels differ from {paths[0]}")
    r = None
    if labels_path is not None:
        with open(labels_path, newline="") as fh:
            rows = [row for row in csv.reader(fh)
                    if row and any(c.strip() for c in row)]
        if rows and not rows[0][-1].lstrip("+-").isdigit():
            rows = rows[1:]  # header
        pairs = {int(row[0]): float(row[-1]) for row in rows}
        r = np.array([pairs[s] for s in range(len(paths))])
    return Dataset(x=xs[0], y=np.stack(ys), r=r)


def read_inputs(path: str) -> np.ndarray:
    """Read only the input grid from a CSV (channels optional)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    header = [c.strip() for c in rows[0]]
    n_x = sum(1 for name in header if name == "x" or
              (name.startswith("x") and name[1:].isdigit()))
    if n_x == 0:
        raise ValueError(f"{path}: header must start with x (or x1, x2, ...)")
    body = np.array([[float(c) for c in r[:n_x]] for r in rows[1:]])
    return body[:, 0] if n_x == 1 else body


# -- Jura -----------------------------------------------------------------

JURA_CHANNELS = ("Cd", "Ni", "Zn")


def read_jura(path: str, channels=JURA_CHANNELS) -> Dataset:
    """Parse one Jura table (prediction.dat / validation.dat or a CSV
    export): 2-D locations from Xloc/Yloc, the requested metal channels."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    header_idx = None
    for i, ln in enumerate(lines):
        low = ln.lower().replace(",", " ")
        if "xloc" in low.split() and "yloc" in low.split():
            header_idx = i
            break
    if header_idx is None:
        raise ValueError(f"{path}: no header line containing Xloc and Yloc")
    sep = "," if "," in lines[header_idx] else None
    names = [c.strip() for c in lines[header_idx].split(sep) if c.strip()]
    lower = [c.lower() for c in names]
    try:
        cols = [lower.index("xloc"), lower.index("yloc")]
        cols += [lower.index(ch.lower()) for ch in channels]
    except ValueError as err:
        raise ValueError(f"{path}: missing column ({err})") from err
    body = []
    for ln in lines[header_idx + 1:]:
        if not ln:
            continue
        cells = [c.strip() for c in ln.split(sep) if c.strip()]
        if len(cells) < len(names):
            continue
        try:
            body.append([float(cells[j]) for j in cols])
        except ValueError:
            continue
    if not body:
        raise ValueError(f"{path}: no numeric data rows")
    table = np.asarray(body)
    return Dataset(x=table[:, :2], y=table[:, 2:].T[None])


# -- model persistence ----------------------------------------------------

_STATE_ARRAYS = ("mu_u", "sigma_u", "mu_b", "sigma_b", "z", "mu_wb",
                 "sigma_wb", "g", "h_mean", "h_sq")
_STATE_SCALARS = ("omega_u", "omf_a", "omf_b", "lam_w_a", "lam_w_b",
                  "lam_b_a", "lam_b_b")


def save_model(model: FittedModel, path: str) -> None:
    arrays = {"x": model.x, "stats_mean": model.stats.mean,
              "stats_scale": model.stats.scale}
    if model.scaler is not None:
        arrays["scaler_lo"] = model.scaler.lo
        arrays["scaler_hi"] = model.scaler.hi
    for name in _STATE_ARRAYS:
        value = getattr(model.state, name)
        if value is not None:
            arrays[f"state_{name}"] = value
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in arrays.items()}
    meta = {
        "format": MODEL_FORMAT,
        "dims": {f: getattr(model.dims, f) for f in ("n", "m", "q", "s", "nu")},
        "hyper": {"lengthscales": model.hyper.lengthscales.tolist(),
                  **{f: getattr(model.hyper, f) for f in (
                      "ell_z", "ell_b", "alpha_f", "beta_f", "alpha_u",
                      "beta_u", "alpha_w", "beta_w", "alpha_b", "beta_b",
                      "jitter")}},
        "config": {f: getattr(model.config, f) for f in (
            "max_iters", "tol", "classify", "inner_iters", "seed", "nu",
            "scale_inputs", "learn_lengthscales")},
        "state_scalars": {f: getattr(model.state, f) for f in _STATE_SCALARS},
        "elbo_trace": model.elbo_trace,
        "converged": model.converged,
        "n_iters": model.n_iters,
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, default=float)), **arrays)


def load_model(path: str) -> FittedModel:
    with np.load(path, allow_pickle=False) as arch:
        meta = json.loads(str(arch["__meta__"]))
        if meta.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path}: unknown model format {meta.get('format')!r}")
        arrays = {k: arch[k] for k in arch.files if k != "__meta__"}
    dims = Dims(**meta["dims"])
    hyper = HyperParams(lengthscales=np.array(meta["hyper"].pop("lengthscales")),
                        **meta["hyper"])
    config = FitConfig(**meta["config"])
    state_kwargs = dict(meta["state_scalars"])
    for name in _STATE_ARRAYS:
        key = f"state_{name}"
        state_kwargs[name] = arrays[key] if key in arrays else None
    state = VariationalState(**state_kwargs)
    x = arrays["x"]
    scaler = None
    if "scaler_lo" in arrays:
        scaler = InputScaler(lo=arrays["scaler_lo"], hi=arrays["scaler_hi"])
    stats = NormStats(mean=arrays["stats_mean"], scale=arrays["stats_scale"])
    k_q = gibbs_block_matrix(x, hyper.lengthscales)
    lz, _ = chol_jitter(se_kernel_matrix(x, ell=hyper.ell_z, var=1.0 / dims.nu),
                        hyper.jitter)
    lb, _ = chol_jitter(se_kernel_matrix(x, ell=hyper.ell_b, var=1.0), hyper.jitter)
    kmat = joint_kernel(state.z, k_q, state.omega_u)
    return FittedModel(dims=dims, hyper=hyper, config=config, x=x, scaler=scaler,
                       stats=stats, state=state, k_q=k_q, lz=lz, lb=lb,
                       kmat=kmat, lk=chol_raw(kmat),
                       elbo_trace=meta["elbo_trace"], converged=meta["converged"],
                       n_iters=meta["n_iters"])
