"""Latent-correlation Gaussian processes.

Multi-output GP regression and classification where latent signals share
a mutually dependent Wishart-Gibbs Hadamard kernel, fitted by mean-field
variational Bayes with whitened L-BFGS point estimation of the latent
correlation factor.

Submodules import lazily so the CLI can cap BLAS thread pools before
numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Dataset": "core", "Dims": "core", "HyperParams": "core",
    "NormStats": "core", "NumericsError": "core", "standardize": "core",
    "destandardize": "core",
    "FitConfig": "vb", "FittedModel": "vb", "VariationalState": "vb",
    "fit": "vb", "elbo": "vb", "tn_moments": "vb",
    "predict_latent": "predict", "predict_outputs": "predict",
    "predict_label": "predict", "latent_covariance": "predict",
    "SwitchSpec": "synth", "ToySpec": "synth", "RecoveryScore": "synth",
    "gen_switch": "synth", "gen_toy": "synth", "resample_from_model": "synth",
    "recovery_score": "synth", "regression_metrics": "synth", "auc": "synth",
    "fisher_combine": "synth", "empirical_pvalue": "synth",
    "GpFit": "baselines", "fit_switch_wgcc": "baselines",
    "fit_switch_kron": "baselines", "hold_out_random": "baselines",
    "save_model": "dataio", "load_model": "dataio",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
