"""Region x day modelling panel: counts, expected counts, covariates, weeks.

Day indices are 1-based and relative to the first case date; covariate
series may extend to day 0 and below (the pre-period used by lags).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .geostat import VARIABLES
from .graph import RegionSet

logger = logging.getLogger(__name__)

DENSITY = "density"
LAGS = (0, 7, 14)


class CoverageError(ValueError):
    """Covariate history does not reach back far enough for the requested lag."""


@dataclass(frozen=True, eq=False)
class Panel:
    region_ids: tuple[str, ...]
    days: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    covariates: dict[str, np.ndarray]
    week: np.ndarray
    dates: np.ndarray | None = None
    flags: np.ndarray | None = None
    history: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    history_days: np.ndarray | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, T = self.observed.shape
        if self.expected.shape != (n, T) or len(self.days) != T or len(self.week) != T:
            raise ValueError("panel arrays disagree on shape")
        if np.any(self.observed < 0) or np.any(self.expected < 0):
            raise ValueError("observed and expected counts must be nonnegative")
        for name, x in self.covariates.items():
            if x.shape != (n, T):
                raise ValueError(f"covariate {name} has shape {x.shape}, expected {(n, T)}")
        if self.flags is None:
            object.__setattr__(self, "flags", np.zeros((n, T), dtype=bool))

    @property
    def n_regions(self) -> int:
        return self.observed.shape[0]

    @property
    def n_days(self) -> int:
        return self.observed.shape[1]

    @property
    def n_weeks(self) -> int:
        return int(self.week.max())

    @property
    def environmental(self) -> list[str]:
        return [c for c in self.covariates if c.split("^")[0] in VARIABLES]

    # --- CSV round trip ---------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        n, T = self.observed.shape
        df = pd.DataFrame({
            "region_id": np.repeat(self.region_ids, T),
            "day": np.tile(self.days, n),
            "date": np.tile(self.dates.astype(str), n) if self.dates is not None else "",
            "week": np.tile(self.week, n),
            "observed": self.observed.ravel(),
            "expected": self.expected.ravel(),
        })
        for name, x in self.covariates.items():
            df[name] = x.ravel()
        df["flag"] = self.flags.ravel().astype(int)
        return df

    def to_csv(self, path) -> None:
        """Write the panel as one long CSV plus a ``.meta.json`` sidecar."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        with open(_meta_path(path), "w") as fh:
            json.dump(self.meta, fh, indent=2, default=_json_default)

    def select_days(self, keep: np.ndarray) -> Panel:
        keep = np.asarray(keep)
        week = self.week[keep]
        return replace(
            self,
            days=self.days[keep],
            observed=self.observed[:, keep],
            expected=self.expected[:, keep],
            covariates={k: v[:, keep] for k, v in self.covariates.items()},
            week=week - week.min() + 1,
            dates=None if self.dates is None else self.dates[keep],
            flags=self.flags[:, keep],
        )


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


def read_panel(path) -> Panel:
    df = pd.read_csv(path, dtype={"region_id": str, "date": str}, keep_default_na=False, float_precision="round_trip")
    base = {"region_id", "day", "date", "week", "observed", "expected", "flag"}
    cov_cols = [c for c in df.columns if c not in base]
    regions = tuple(sorted(df["region_id"].unique()))
    days = np.sort(df["day"].unique())
    n, T = len(regions), len(days)
    df = df.sort_values(["region_id", "day"])
    if len(df) != n * T:
        raise ValueError("panel file is not a complete region x day table")

    def grid(col, dtype=float):
        return df[col].to_numpy(dtype).reshape(n, T)

    first = df[df["region_id"] == regions[0]]
    dates = first["date"].to_numpy()
    dates = None if (dates == "").all() else dates.astype("datetime64[D]")
    meta = {}
    mp = _meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())
    return Panel(
        region_ids=regions,
        days=days,
        observed=grid("observed", np.int64),
        expected=grid("expected"),
        covariates={c: grid(c) for c in cov_cols},
        week=first["week"].to_numpy(int),
        dates=dates,
        flags=grid("flag", int).astype(bool) if "flag" in df.columns else None,
        meta=meta,
    )


# --- operations -------------------------------------------------------------


def expected_cases(observed, population) -> np.ndarray:
    """Allocate each day's total count to regions in proportion to population."""
    observed = np.asarray(observed, dtype=float)
    population = np.asarray(population, dtype=float)
    if np.any(population <= 0):
        raise ValueError("populations must be positive")
    share = population / population.sum()
    return np.outer(share, observed.sum(axis=0))


def week_index(t, n_days: int | None = None, mode: str = "ceil7", start_weekday: int = 0):
    """Week of day ``t`` (1-based).

    ``ceil7`` gives ``ceil(t / 7)``. ``calendar`` counts Monday-started
    calendar weeks, the first (possibly partial) week containing day 1 whose
    weekday is ``start_weekday`` (Monday = 0).
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or (n_days is not None and np.any(t_arr > n_days)):
        raise ValueError(f"day index out of range 1..{n_days}")
    if mode == "ceil7":
        w = (t_arr + 6) // 7
    elif mode == "calendar":
        w = (t_arr - 1 + int(start_weekday)) // 7 + 1
    else:
        raise ValueError(f"unknown weeks mode {mode!r}")
    return int(w) if np.ndim(w) == 0 else w.astype(int)


def lag_covariates(panel: Panel, lag_days: int, trim: bool = True) -> Panel:
    """Replace environmental covariates at day t by their raw value at t - lag.

    Days whose lagged value predates the covariate history are dropped from
    the panel when ``trim`` is set; the trim is recorded in ``meta``.
    """
    if lag_days < 0:
        raise ValueError("lag must be nonnegative")
    if not panel.history:
        if lag_days == 0:
            return replace(panel, meta={**panel.meta, "lag": 0})
        raise CoverageError("panel carries no covariate history to lag from")
    hist_days = panel.history_days
    first_hist = int(hist_days.min())
    source = panel.days - lag_days
    ok = source >= first_hist
    if not ok.all():
        if not trim:
            raise CoverageError(
                f"lag {lag_days} needs covariates from day {int(source.min())}, history starts at day {first_hist}"
            )
        logger.info("lag %d: trimming %d leading days without covariate history", lag_days, int((~ok).sum()))
    pos = np.searchsorted(hist_days, source[ok])
    lagged = {name: series[:, pos] for name, series in panel.history.items()}
    out = panel.select_days(np.flatnonzero(ok)) if not ok.all() else panel
    covs = dict(out.covariates)
    covs.update(lagged)
    meta = {**panel.meta, "lag": int(lag_days), "window": [int(out.days.min()), int(out.days.max())],
            "trimmed_days": int((~ok).sum())}
    return replace(out, covariates=covs, meta=meta)


def standardize(panel: Panel, columns=None) -> Panel:
    """Centre and scale covariates (sample sd, ddof=1) over all region-days."""
    columns = list(panel.covariates) if columns is None else list(columns)
    covs = dict(panel.covariates)
    transforms = dict(panel.meta.get("transforms", {}))
    for name in columns:
        x = covs[name]
        mean = float(x.mean())
        sd = float(x.std(ddof=1))
        if not sd > 0:
            raise ValueError(f"covariate {name!r} has zero variance and cannot be standardized")
        z = (x - mean) / sd
        # one Newton-style correction keeps |mean| and |sd-1| at rounding level
        z = z - z.mean()
        z = z / z.std(ddof=1)
        covs[name] = z
        transforms[name] = {"mean": mean, "sd": sd}
    return replace(panel, covariates=covs, meta={**panel.meta, "transforms": transforms, "standardized": True})


def unstandardize(panel: Panel) -> dict[str, np.ndarray]:
    return {name: panel.covariates[name] * t["sd"] + t["mean"]
            for name, t in panel.meta.get("transforms", {}).items()}


def polynomial_expand(panel: Panel, degree: int) -> Panel:
    """Append powers 2..degree of the three environmental covariates."""
    if degree not in (1, 2, 3):
        raise ValueError("polynomial degree must be 1, 2 or 3")
    covs = dict(panel.covariates)
    base = [v for v in VARIABLES if v in covs]
    for p in range(2, degree + 1):
        for name in base:
            covs[f"{name}^{p}"] = covs[name] ** p
    return replace(panel, covariates=covs, meta={**panel.meta, "degree": degree})


def drop_columns(panel: Panel, names) -> Panel:
    covs = {k: v for k, v in panel.covariates.items() if k not in set(names)}
    return replace(panel, covariates=covs)


# --- ingestion --------------------------------------------------------------


def read_cases(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"region_id": str})
    missing = {"region_id", "date", "cases"} - set(df.columns)
    if missing:
        raise ValueError(f"cases file lacks columns {sorted(missing)}")
    df["date"] = pd.to_datetime(df["date"]).dt.normalize()
    if (df["cases"] < 0).any():
        raise ValueError("negative case counts")
    return df


def read_covariates(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"region_id": str, "variable": str, "flag": str}, keep_default_na=False,
                     na_values={"value": ["", "nan", "NaN"]})
    missing = {"region_id", "day", "variable", "value"} - set(df.columns)
    if missing:
        raise ValueError(f"covariate file lacks columns {sorted(missing)}")
    return df


def _case_matrix(cases: pd.DataFrame, regions: RegionSet):
    unknown = set(cases["region_id"]) - set(regions.ids)
    if unknown:
        raise ValueError(f"cases for unknown regions: {sorted(unknown)}")
    start, end = cases["date"].min(), cases["date"].max()
    dates = pd.date_range(start, end, freq="D")
    table = cases.pivot_table(index="region_id", columns="date", values="cases", aggfunc="sum")
    table = table.reindex(index=list(regions.ids), columns=dates)
    n_missing = int(table.isna().to_numpy().sum())
    if n_missing:
        logger.info("case panel: %d missing region-day cells set to zero", n_missing)
    return table.fillna(0).to_numpy(np.int64), dates.to_numpy().astype("datetime64[D]")


def _history(covariates: pd.DataFrame, regions: RegionSet, last_day: int):
    """Wide raw environmental series (region x day) with LOCF imputation inside regions."""
    cov = covariates[covariates["variable"].isin(VARIABLES)]
    first_day = min(int(cov["day"].min()), 1)
    days = np.arange(first_day, int(cov["day"].max()) + 1)
    hist, flagged = {}, np.zeros((len(regions), len(days)), dtype=bool)
    for var in VARIABLES:
        sub = cov[cov["variable"] == var]
        if sub.empty:
            raise ValueError(f"no covariate values for {var}")
        wide = sub.pivot_table(index="region_id", columns="day", values="value", aggfunc="mean")
        wide = wide.reindex(index=list(regions.ids), columns=days)
        missing = wide.isna().to_numpy()
        if "flag" in sub.columns:
            fl = sub.assign(f=sub["flag"].fillna("").astype(str).str.len() > 0)
            fw = fl.pivot_table(index="region_id", columns="day", values="f", aggfunc="max")
            fw = fw.reindex(index=list(regions.ids), columns=days).astype(float).fillna(0.0).to_numpy(bool)
            flagged |= fw
        flagged |= missing
        wide = wide.ffill(axis=1).bfill(axis=1)
        if wide.isna().to_numpy().any():
            raise ValueError(f"{var}: a region has no covariate values at all")
        hist[var] = wide.to_numpy(float)
    # history starts at the earliest day with data; leading all-missing days are not history
    observed_days = np.sort(cov["day"].unique())
    start = np.searchsorted(days, observed_days.min())
    return {k: v[:, start:] for k, v in hist.items()}, days[start:], flagged[:, start:]


def build_panel(
    regions: RegionSet,
    cases: pd.DataFrame,
    covariates: pd.DataFrame,
    weeks_mode: str = "ceil7",
    density: np.ndarray | None = None,
) -> Panel:
    """Assemble the lag-0 panel with expected counts and covariate history."""
    O, dates = _case_matrix(cases, regions)
    n, T = O.shape
    days = np.arange(1, T + 1)
    E = expected_cases(O, regions.population)
    start_weekday = int(pd.Timestamp(dates[0]).weekday())
    week = week_index(days, T, weeks_mode, start_weekday)
    hist, hist_days, hist_flags = _history(covariates, regions, T)
    if density is None:
        if regions.area_km2 is None:
            raise ValueError("population density needs region areas (area_km2 column or polygons)")
        density = regions.population / regions.area_km2
    covs = {}
    pos = np.searchsorted(hist_days, days)
    if hist_days.max() < T:
        raise CoverageError("covariates do not cover the whole case period")
    valid = days >= hist_days.min()
    for var, series in hist.items():
        x = np.full((n, T), np.nan)
        x[:, valid] = series[:, pos[valid]]
        covs[var] = x
    covs[DENSITY] = np.repeat(np.asarray(density, float)[:, None], T, axis=1)
    flags = np.zeros((n, T), dtype=bool)
    flags[:, valid] = hist_flags[:, pos[valid]]
    panel = Panel(
        region_ids=regions.ids, days=days, observed=O, expected=E, covariates=covs, week=week,
        dates=dates, flags=flags, history=hist, history_days=hist_days,
        meta={"weeks_mode": weeks_mode, "lag": 0, "degree": 1, "start_weekday": start_weekday},
    )
    return panel


def prepare_panel(
    regions: RegionSet,
    cases: pd.DataFrame,
    covariates: pd.DataFrame,
    lag: int = 0,
    degree: int = 1,
    weeks_mode: str = "ceil7",
    density=None,
    trim: bool = True,
    scale: bool = True,
) -> Panel:
    """Full preparation: expected counts, lag, standardization, polynomial terms."""
    if lag not in LAGS:
        logger.warning("lag %d is outside the studied set %s", lag, LAGS)
    panel = build_panel(regions, cases, covariates, weeks_mode, density)
    panel = lag_covariates(panel, lag, trim=trim)
    for name, x in panel.covariates.items():
        if np.isnan(x).any():
            raise CoverageError(f"covariate {name} has gaps inside the likelihood window")
    if scale:
        panel = standardize(panel)
    return polynomial_expand(panel, degree)


def n_weeks_for(n_days: int, mode: str = "ceil7", start_weekday: int = 0) -> int:
    return int(week_index(n_days, n_days, mode, start_weekday)) if n_days else 0
