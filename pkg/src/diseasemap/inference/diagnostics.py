"""Deviance, DIC, posterior summaries, split-R-hat and model ranking."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import gammaln

from ..dataprep import Panel
from ..models import ModelSpec, log_likelihood
from .sampler import PosteriorSamples

RHAT_THRESHOLD = 1.1
MIN_DRAWS_DIC = 100


class TooFewDrawsError(ValueError):
    pass


def deviance(spec: ModelSpec, theta, panel: Panel) -> float:
    """D(theta) = -2 log p(y | theta)."""
    return -2.0 * log_likelihood(spec, theta, panel)


def deviance_draws(spec: ModelSpec, draws: np.ndarray, panel: Panel, chunk: int = 256) -> np.ndarray:
    """Deviance of every row of ``draws``, vectorised over chunks of draws."""
    reg = spec.registry
    mask = (panel.expected > 0).ravel()
    X = spec.design_matrix(panel)[mask]
    O = panel.observed.ravel()[mask].astype(float)
    logE = np.log(panel.expected.ravel()[mask])
    idx = [(reg[b.name], b.cell_index.ravel()[mask]) for b in spec.random_blocks]
    const = float(np.sum(gammaln(O + 1.0)))
    out = np.empty(len(draws))
    for start in range(0, len(draws), chunk):
        th = draws[start:start + chunk]
        lin = logE[None, :] + th[:, reg["fixed"]] @ X.T
        for sl, ix in idx:
            lin += th[:, sl][:, ix]
        ll = np.sum(O * lin - np.exp(lin), axis=1) - const
        out[start:start + chunk] = -2.0 * ll
    return out


def posterior_mean_theta(draws: np.ndarray) -> np.ndarray:
    """Componentwise posterior mean; precisions are stored as log tau so they average on the log scale."""
    return draws.mean(axis=0)


@dataclass
class FitSummary:
    model_id: int
    lag: int
    DIC: float
    p_D: float
    mean_deviance: float
    deviance_at_mean: float
    n_draws: int
    max_rhat: float = 1.0
    flags: list[str] = field(default_factory=list)
    table: pd.DataFrame | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("table")
        return d

    @classmethod
    def from_dict(cls, d) -> FitSummary:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "table"})


def dic(samples: PosteriorSamples | np.ndarray, spec: ModelSpec, panel: Panel) -> dict:
    """DIC = Dbar + p_D with p_D = Dbar - D(theta_bar)."""
    draws = samples.pooled if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    if len(draws) < MIN_DRAWS_DIC:
        raise TooFewDrawsError(f"DIC needs at least {MIN_DRAWS_DIC} draws, got {len(draws)}")
    return _dic_from(draws, spec, panel)


def _dic_from(draws, spec, panel) -> dict:
    dbar = float(np.mean(deviance_draws(spec, draws, panel)))
    d_at_mean = deviance(spec, posterior_mean_theta(draws), panel)
    p_d = dbar - d_at_mean
    return {"DIC": dbar + p_d, "p_D": p_d, "mean_deviance": dbar, "deviance_at_mean": d_at_mean,
            "n_draws": len(draws)}


def split_rhat(chains: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Split-chain potential scale reduction per column.

    Returns ``(rhat, degenerate)``; columns with zero within-chain variance
    report 1.0 and are marked degenerate.
    """
    halves = []
    for c in chains:
        h = len(c) // 2
        if h < 2:
            raise ValueError("split-R-hat needs at least 4 draws per chain")
        halves += [c[:h], c[h:2 * h]]
    x = np.stack(halves)  # (m, n, p)
    m, n = x.shape[:2]
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    degenerate = ~(W > 0)
    rhat = np.sqrt(np.divide(var_plus, W, out=np.ones_like(W), where=~degenerate))
    rhat[degenerate] = 1.0
    return rhat, degenerate


def posterior_summary(samples: PosteriorSamples) -> pd.DataFrame:
    """Mean, sd, 2.5/50/97.5% quantiles and split-R-hat for every parameter."""
    if samples.n_chains < 2:
        raise ValueError("posterior_summary needs at least 2 chains")
    draws = samples.pooled
    rhat, degenerate = split_rhat(samples.chains)
    q = np.quantile(draws, [0.025, 0.5, 0.975], axis=0)
    df = pd.DataFrame({
        "parameter": samples.registry.labels,
        "mean": draws.mean(axis=0),
        "sd": draws.std(axis=0, ddof=1),
        "q2.5": q[0],
        "q50": q[1],
        "q97.5": q[2],
        "rhat": rhat,
        "degenerate": degenerate,
    })
    df["credible_nonzero"] = (df["q2.5"] > 0) | (df["q97.5"] < 0)
    return df


def convergence_flags(table: pd.DataFrame, threshold: float = RHAT_THRESHOLD) -> tuple[float, list[str]]:
    """Flag when any fixed effect or log-precision has split-R-hat above ``threshold``."""
    core = table[table["parameter"].str.startswith(("mu", "beta[", "log_tau_"))]
    max_rhat = float(core["rhat"].max()) if len(core) else 1.0
    return max_rhat, ([f"rhat>{threshold}"] if max_rhat > threshold else [])


def summarize_fit(samples: PosteriorSamples, spec: ModelSpec, panel: Panel) -> FitSummary:
    table = posterior_summary(samples)
    d = dic(samples, spec, panel)
    max_rhat, flags = convergence_flags(table)
    if not (np.isfinite(d["DIC"]) and np.isfinite(d["p_D"])):
        flags.append("nonfinite_dic")
    return FitSummary(model_id=spec.model_id, lag=spec.lag_days, max_rhat=max_rhat, flags=flags, table=table, **d)


def compare_models(summaries: list[FitSummary]) -> pd.DataFrame:
    """Rank fits by ascending DIC; flagged fits are listed last, unranked, with their flags."""
    if len(summaries) < 2:
        raise ValueError("need at least two fits to compare")
    rows = [{"model": s.model_id, "lag": s.lag, "DIC": s.DIC, "pD": s.p_D, "flags": ";".join(s.flags)}
            for s in summaries]
    df = pd.DataFrame(rows)
    clean = df[df["flags"] == ""].sort_values("DIC", kind="stable")
    flagged = df[df["flags"] != ""]
    return pd.concat([clean, flagged], ignore_index=True)[["model", "lag", "DIC", "pD", "flags"]]

