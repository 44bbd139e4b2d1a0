"""MCMC fitting, DIC and posterior summaries."""

from .diagnostics import (
    FitSummary,
    compare_models,
    deviance,
    deviance_draws,
    dic,
    posterior_summary,
    split_rhat,
    summarize_fit,
)
from .sampler import PosteriorSamples, SamplerConfig, SamplerDivergence, fit_mcmc, sample_precision
from .storage import load_samples, save_samples

__all__ = [
    "FitSummary",
    "PosteriorSamples",
    "SamplerConfig",
    "SamplerDivergence",
    "compare_models",
    "deviance",
    "deviance_draws",
    "dic",
    "fit_mcmc",
    "load_samples",
    "posterior_summary",
    "sample_precision",
    "save_samples",
    "split_rhat",
    "summarize_fit",
]
