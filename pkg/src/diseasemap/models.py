"""Models 1-12: Poisson log-linear disease-mapping models with space-time effects.

Every model has log eta_it = log E_it + mu + sum_j beta_j x_jit + (random
terms), where the random terms grow from none (models 1-2) through a BYM
spatial pair plus RW2/IID temporal pair (3-4) to a Knorr-Held interaction
(5-12). The offset enters once, in log eta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .dataprep import DENSITY, Panel, week_index
from .gmrf import (
    ConstraintSet,
    StructureMatrix,
    constraint_set,
    iid_structure,
    interaction_structure,
    rw2_structure,
)
from .graph import AdjacencyGraph, icar_structure

PRIOR_SHAPE = 1.0
PRIOR_RATE = 5e-5
EFFECTS = ("u", "v", "gamma", "phi", "delta")

# model id -> (uses density, temporal resolution or None, interaction kind or None)
MODEL_TABLE = {
    1: (False, None, None),
    2: (True, None, None),
    3: (True, "weekly", None),
    4: (True, "daily", None),
    5: (True, "weekly", "I"),
    6: (True, "weekly", "II"),
    7: (True, "weekly", "III"),
    8: (True, "weekly", "IV"),
    9: (True, "daily", "I"),
    10: (True, "daily", "II"),
    11: (True, "daily", "III"),
    12: (True, "daily", "IV"),
}


class ModelSpecError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Registry:
    """Ordered partition of the parameter vector into named blocks."""

    def __init__(self, blocks):
        self.slices: dict[str, slice] = {}
        self.labels: list[str] = []
        start = 0
        for name, labels in blocks:
            labels = list(labels)
            self.slices[name] = slice(start, start + len(labels))
            self.labels.extend(labels)
            start += len(labels)
        self.size = start

    def __getitem__(self, name) -> slice:
        return self.slices[name]

    def __contains__(self, name) -> bool:
        return name in self.slices

    @property
    def names(self) -> list[str]:
        return list(self.slices)

    def unpack(self, theta) -> dict[str, np.ndarray]:
        return {name: theta[..., s] for name, s in self.slices.items()}

    def to_json(self) -> dict:
        return {"blocks": [[name, s.start, s.stop] for name, s in self.slices.items()], "labels": self.labels}

    @classmethod
    def from_json(cls, doc) -> Registry:
        labels = doc["labels"]
        return cls([(name, labels[a:b]) for name, a, b in doc["blocks"]])


@dataclass(frozen=True, eq=False)
class RandomEffectBlock:
    name: str
    structure: StructureMatrix
    constraints: ConstraintSet
    cell_index: np.ndarray  # (n_regions, n_days) -> position in the effect vector
    labels: tuple[str, ...]
    prior_shape: float = PRIOR_SHAPE
    prior_rate: float = PRIOR_RATE
    n_units: tuple[int, int] = (0, 0)  # (regions, time units) for interaction blocks

    @property
    def dim(self) -> int:
        return self.structure.dim


@dataclass(frozen=True, eq=False)
class ModelSpec:
    model_id: int
    fixed_effects: tuple[str, ...]
    covariate_columns: tuple[str, ...]
    random_blocks: tuple[RandomEffectBlock, ...]
    temporal_resolution: str | None
    interaction_kind: str | None
    region_ids: tuple[str, ...]
    days: np.ndarray
    week: np.ndarray
    lag_days: int = 0
    poly_degree: int = 1
    weeks_mode: str = "ceil7"
    flat_prior: bool = True
    fixed_prior_sd: float = 1e3
    registry: Registry = field(default=None, repr=False)

    def __post_init__(self):
        blocks = [("fixed", self.fixed_effects)]
        blocks += [(b.name, b.labels) for b in self.random_blocks]
        blocks += [(f"log_tau_{b.name}", (f"log_tau_{b.name}",)) for b in self.random_blocks]
        object.__setattr__(self, "registry", Registry(blocks))

    @property
    def block_names(self) -> list[str]:
        return [b.name for b in self.random_blocks]

    def block(self, name) -> RandomEffectBlock:
        for b in self.random_blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_effects)

    def design_matrix(self, panel: Panel) -> np.ndarray:
        """(n_regions * n_days, n_fixed) design with an intercept column."""
        cols = [np.ones(panel.observed.size)]
        for c in self.covariate_columns:
            try:
                cols.append(panel.covariates[c].ravel())
            except KeyError:
                raise ModelSpecError(f"panel lacks covariate column {c!r}") from None
        return np.column_stack(cols)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.registry.size)

    def constraint_violation(self, theta) -> float:
        worst = 0.0
        for b in self.random_blocks:
            worst = max(worst, b.constraints.violation(theta[self.registry[b.name]]))
        return worst

    def describe(self) -> str:
        return describe_model(self.model_id)


def describe_model(model_id: int) -> str:
    """Plain-text log relative risk of a model, in the notation of its definition table."""
    uses_density, resolution, kind = MODEL_TABLE[model_id]
    k = 4 if uses_density else 3
    terms = ["mu", "log(E_it)", f"sum_{{j=1}}^{{{k}}} beta_j x_jit"]
    if resolution is not None:
        idx = "w(t)" if resolution == "weekly" else "t"
        terms += ["u_i", "v_i", f"gamma_{idx}", f"phi_{idx}"]
        if kind is not None:
            terms.append(f"delta_i{idx} ({kind})")
    return " + ".join(terms)


def _time_units(resolution, week):
    if resolution == "weekly":
        return week - 1, int(week.max())
    return np.arange(len(week)), len(week)


def build_model(
    model_id: int,
    panel: Panel,
    graph: AdjacencyGraph,
    weeks_mode: str | None = None,
    flat_prior: bool = True,
    fixed_prior_sd: float = 1e3,
) -> ModelSpec:
    """Assemble model ``model_id`` on ``panel``.

    Fixed effects get flat priors (or Normal(0, fixed_prior_sd^2) when
    ``flat_prior`` is False); every random-effect precision gets
    Gamma(1, 5e-5).
    """
    if model_id not in MODEL_TABLE:
        raise ModelSpecError(f"model id must be in 1..12, got {model_id}")
    if tuple(graph.ids) != tuple(panel.region_ids):
        raise ModelSpecError("graph and panel region sets differ")
    uses_density, resolution, kind = MODEL_TABLE[model_id]
    mode = panel.meta.get("weeks_mode", "ceil7") if weeks_mode is None else weeks_mode
    week = panel.week
    if weeks_mode is not None and weeks_mode != panel.meta.get("weeks_mode", "ceil7"):
        start = panel.meta.get("start_weekday", 0)
        w = week_index(panel.days, int(panel.days.max()), weeks_mode, start)
        week = w - w.min() + 1

    env = panel.environmental
    if not env:
        raise ModelSpecError("panel has no environmental covariates")
    columns = list(env)
    if uses_density:
        if DENSITY not in panel.covariates:
            raise ModelSpecError("model needs the population density column")
        columns.append(DENSITY)
    fixed = ["mu"] + [f"beta[{c}]" for c in columns]

    n, T = panel.n_regions, panel.n_days
    blocks = []
    if resolution is not None:
        tu, n_t = _time_units(resolution, week)
        regions = np.repeat(np.arange(n)[:, None], T, axis=1)
        times = np.repeat(tu[None, :], n, axis=0)
        R_s = icar_structure(graph)
        R_t = rw2_structure(n_t)
        tlabels = [f"w{k + 1}" for k in range(n_t)] if resolution == "weekly" else [f"d{int(d)}" for d in panel.days]
        rlabels = list(panel.region_ids)
        for name, S, index, labels in (
            ("u", R_s, regions, rlabels),
            ("v", iid_structure(n), regions, rlabels),
            ("gamma", R_t, times, tlabels),
            ("phi", iid_structure(n_t), times, tlabels),
        ):
            blocks.append(RandomEffectBlock(
                name=name, structure=S, constraints=constraint_set(S), cell_index=index,
                labels=tuple(f"{name}[{lab}]" for lab in labels),
            ))
        if kind is not None:
            S = interaction_structure(kind, R_s, R_t)
            index = regions * n_t + times
            labels = tuple(f"delta[{r},{t}]" for r in rlabels for t in tlabels)
            blocks.append(RandomEffectBlock(
                name="delta", structure=S, constraints=constraint_set(S), cell_index=index,
                labels=labels, n_units=(n, n_t),
            ))

    return ModelSpec(
        model_id=model_id,
        fixed_effects=tuple(fixed),
        covariate_columns=tuple(columns),
        random_blocks=tuple(blocks),
        temporal_resolution=resolution,
        interaction_kind=kind,
        region_ids=tuple(panel.region_ids),
        days=np.asarray(panel.days),
        week=np.asarray(week),
        lag_days=int(panel.meta.get("lag", 0)),
        poly_degree=int(panel.meta.get("degree", 1)),
        weeks_mode=mode,
        flat_prior=flat_prior,
        fixed_prior_sd=fixed_prior_sd,
    )


def _check_conform(spec: ModelSpec, theta, panel: Panel):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.registry.size,):
        raise ModelSpecError(f"parameter vector has length {theta.shape}, registry expects {spec.registry.size}")
    if panel.observed.shape != (len(spec.region_ids), len(spec.days)):
        raise ModelSpecError("panel shape does not match the model")
    return theta


def log_relative_risk(spec: ModelSpec, theta, panel: Panel) -> np.ndarray:
    """log r_it = log eta_it - log E_it (n_regions x n_days)."""
    theta = _check_conform(spec, theta, panel)
    X = spec.design_matrix(panel)
    lr = (X @ theta[spec.registry["fixed"]]).reshape(panel.observed.shape)
    for b in spec.random_blocks:
        lr = lr + theta[spec.registry[b.name]][b.cell_index]
    return lr


def linear_predictor(spec: ModelSpec, theta, panel: Panel) -> np.ndarray:
    """Poisson mean eta_it = E_it * r_it; structural-zero cells (E = 0) give 0."""
    return panel.expected * np.exp(log_relative_risk(spec, theta, panel))


def poisson_loglik(observed, expected, log_rr) -> float:
    """Sum over cells with expected > 0 of O log eta - eta - log O!."""
    mask = expected > 0
    O = observed[mask]
    log_eta = np.log(expected[mask]) + log_rr[mask]
    with np.errstate(over="ignore"):
        eta = np.exp(log_eta)
    if not np.all(np.isfinite(eta)):
        bad = np.argwhere(mask)[np.flatnonzero(~np.isfinite(eta))[0]]
        raise NonFiniteError(f"nonfinite Poisson mean at cell (region {bad[0]}, day {bad[1]})")
    return float(np.sum(O * log_eta - eta - gammaln(O + 1.0)))


def log_likelihood(spec: ModelSpec, theta, panel: Panel) -> float:
    return poisson_loglik(panel.observed, panel.expected, log_relative_risk(spec, theta, panel))
