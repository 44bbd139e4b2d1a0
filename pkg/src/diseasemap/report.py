"""Relative-risk surfaces, LOESS trajectories and their exports.

Every summary exponentiates each posterior draw first and then takes the
mean (or median) and the 2.5%/97.5% quantiles on the RR scale. Because of
Jensen's inequality this differs from exponentiating the posterior mean of
the log-risk; exports state the convention in their header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .inference.sampler import PosteriorSamples

SCOPES = ("temporal", "spatial", "spatio-temporal")
CSV_COLUMNS = ["scope", "region_id", "day", "week", "rr_mean", "rr_lo", "rr_hi"]
CONVENTION = "rr_mean, rr_lo, rr_hi summarize exp(draw) per draw: posterior {stat} and 2.5%/97.5% quantiles"


class UnsupportedModelError(ValueError):
    """The model lacks the effects a surface needs."""


@dataclass(frozen=True, eq=False)
class RelativeRiskSurface:
    scope: str
    region_id: np.ndarray  # object array; None for temporal rows
    day: np.ndarray  # float array, NaN where not applicable
    week: np.ndarray
    rr_mean: np.ndarray
    rr_lo: np.ndarray
    rr_hi: np.ndarray
    component: str = ""
    stat: str = "mean"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")

    def __len__(self):
        return len(self.rr_mean)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "scope": self.scope,
            "region_id": self.region_id,
            "day": pd.array(_as_int_or_na(self.day), dtype="Int64"),
            "week": pd.array(_as_int_or_na(self.week), dtype="Int64"),
            "rr_mean": self.rr_mean,
            "rr_lo": self.rr_lo,
            "rr_hi": self.rr_hi,
        })[CSV_COLUMNS]


@dataclass(frozen=True, eq=False)
class SmoothedSeries:
    index: np.ndarray
    value: np.ndarray
    span: float
    degree: int


def _as_int_or_na(a):
    return [None if (v is None or (isinstance(v, float) and math.isnan(v))) else int(v) for v in a]


# --- layout -------------------------------------------------------------------


@dataclass(frozen=True)
class _Layout:
    region_ids: list
    days: np.ndarray
    week: np.ndarray
    resolution: str | None

    def time_units(self) -> np.ndarray:
        """Time-unit position (0-based) of every day."""
        if self.resolution == "weekly":
            return self.week - 1
        return np.arange(len(self.days))


def _layout(samples: PosteriorSamples, spec=None) -> _Layout:
    if spec is not None:
        return _Layout(list(spec.region_ids), np.asarray(spec.days), np.asarray(spec.week),
                       spec.temporal_resolution)
    m = samples.model
    if not m or "region_ids" not in m:
        raise ValueError("samples carry no model layout; pass the model spec")
    return _Layout(list(m["region_ids"]), np.asarray(m["days"]), np.asarray(m["week"]),
                   m.get("temporal_resolution"))


def _require(samples: PosteriorSamples, names, what):
    missing = [n for n in names if n not in samples.registry]
    if missing:
        raise UnsupportedModelError(f"{what} needs effects {missing}, which this model does not have")


def _summarize(log_draws: np.ndarray, stat: str):
    """Per-column RR summaries of (draws x cells) log-risk draws."""
    if stat not in ("mean", "median"):
        raise ValueError("stat must be 'mean' or 'median'")
    rr = np.exp(log_draws)
    centre = rr.mean(axis=0) if stat == "mean" else np.median(rr, axis=0)
    lo, hi = np.quantile(rr, [0.025, 0.975], axis=0)
    return centre, lo, hi


# --- surfaces -----------------------------------------------------------------


def temporal_rr(samples: PosteriorSamples, spec=None, stat: str = "mean"):
    """(structured exp(gamma), unstructured exp(phi)) per time unit."""
    _require(samples, ("gamma", "phi"), "temporal_rr")
    lay = _layout(samples, spec)
    nt = samples.registry["gamma"].stop - samples.registry["gamma"].start
    if lay.resolution == "weekly":
        week = np.arange(1, nt + 1, dtype=float)
        day = np.full(nt, np.nan)
    else:
        day = lay.days.astype(float)
        week = lay.week.astype(float)
    out = []
    for name, component in (("gamma", "structured"), ("phi", "unstructured")):
        mean, lo, hi = _summarize(samples.block(name), stat)
        out.append(RelativeRiskSurface(
            scope="temporal", region_id=np.array([None] * nt, dtype=object), day=day, week=week,
            rr_mean=mean, rr_lo=lo, rr_hi=hi, component=component, stat=stat,
        ))
    return tuple(out)


def spatial_rr(samples: PosteriorSamples, spec=None, stat: str = "mean") -> RelativeRiskSurface:
    """exp(u_i + v_i) per region."""
    _require(samples, ("u", "v"), "spatial_rr")
    lay = _layout(samples, spec)
    mean, lo, hi = _summarize(samples.block("u") + samples.block("v"), stat)
    n = len(lay.region_ids)
    return RelativeRiskSurface(
        scope="spatial", region_id=np.array(lay.region_ids, dtype=object), day=np.full(n, np.nan),
        week=np.full(n, np.nan), rr_mean=mean, rr_lo=lo, rr_hi=hi, stat=stat,
    )


def default_days(days, every: int = 14) -> np.ndarray:
    days = np.asarray(days)
    return days[::every]


def _st_log_draws(samples: PosteriorSamples, lay: _Layout, day_pos: np.ndarray) -> np.ndarray:
    """(draws, regions, selected days) log-risk draws of u + v + gamma + phi + delta."""
    tu = lay.time_units()[day_pos]
    n = len(lay.region_ids)
    nt = samples.registry["gamma"].stop - samples.registry["gamma"].start
    space = samples.block("u") + samples.block("v")
    time = samples.block("gamma") + samples.block("phi")
    delta = samples.block("delta").reshape(-1, n, nt)
    return space[:, :, None] + time[:, None, tu] + delta[:, :, tu]


def spatiotemporal_rr(samples: PosteriorSamples, spec=None, days=None, stat: str = "mean") -> RelativeRiskSurface:
    """exp(u_i + v_i + gamma_t + phi_t + delta_it) for each region and selected day."""
    _require(samples, ("u", "v", "gamma", "phi", "delta"), "spatiotemporal_rr")
    lay = _layout(samples, spec)
    sel = default_days(lay.days) if days is None else np.asarray(days)
    pos = {int(d): k for k, d in enumerate(lay.days)}
    unknown = [int(d) for d in sel if int(d) not in pos]
    if unknown:
        raise ValueError(f"days not in the fitted panel: {unknown}")
    day_pos = np.array([pos[int(d)] for d in sel], dtype=int)
    logs = _st_log_draws(samples, lay, day_pos)
    n, m = logs.shape[1], logs.shape[2]
    mean, lo, hi = _summarize(logs.reshape(len(logs), n * m), stat)
    return RelativeRiskSurface(
        scope="spatio-temporal",
        region_id=np.repeat(np.array(lay.region_ids, dtype=object), m),
        day=np.tile(lay.days[day_pos].astype(float), n),
        week=np.tile(lay.week[day_pos].astype(float), n),
        rr_mean=mean, rr_lo=lo, rr_hi=hi, stat=stat,
    )


# --- LOESS ----------------------------------------------------------------------


def loess_smooth(series, span: float = 0.75, degree: int = 2, x=None) -> SmoothedSeries:
    """Local polynomial regression with tricube weights and no robustness passes.

    At each point a weighted least-squares polynomial of ``degree`` is fitted
    over the ``ceil(span * n)`` nearest neighbours, with weights
    ``(1 - (d / d_max)^3)^3`` where ``d_max`` is the largest neighbour distance.
    """
    y = np.asarray(series, dtype=float)
    n = y.size
    if degree not in (1, 2):
        raise ValueError("degree must be 1 or 2")
    if n < max(5, degree + 2):
        raise ValueError(f"series too short for LOESS: {n} points")
    if not 0 < span <= 1:
        raise ValueError("span must be in (0, 1]")
    x = np.arange(n, dtype=float) if x is None else np.asarray(x, dtype=float)
    k = max(int(math.ceil(span * n)), degree + 1)
    out = np.empty(n)
    for i in range(n):
        d = np.abs(x - x[i])
        nb = np.argsort(d, kind="stable")[:k]
        dmax = d[nb].max()
        w = (1.0 - (d[nb] / dmax) ** 3) ** 3 if dmax > 0 else np.ones(k)
        # centre on x[i] so the fitted value is the intercept
        V = np.vander(x[nb] - x[i], degree + 1, increasing=True)
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(V * sw[:, None], y[nb] * sw, rcond=None)
        out[i] = coef[0]
    return SmoothedSeries(index=x, value=out, span=span, degree=degree)


def region_trajectories(samples: PosteriorSamples, spec=None, regions=None, top: int = 6,
                        span: float = 0.75, degree: int = 2, stat: str = "mean") -> pd.DataFrame:
    """Daily space-time RR per region with its LOESS-smoothed trajectory.

    Without ``regions`` the ``top`` regions by spatial RR are used.
    """
    _require(samples, ("u", "v", "gamma", "phi", "delta"), "region_trajectories")
    lay = _layout(samples, spec)
    if regions is None:
        sp_rr = spatial_rr(samples, spec, stat)
        order = np.argsort(-sp_rr.rr_mean, kind="stable")[:top]
        regions = [lay.region_ids[i] for i in order]
    rows = []
    day_pos = np.arange(len(lay.days))
    logs = _st_log_draws(samples, lay, day_pos)
    for rid in regions:
        i = lay.region_ids.index(rid)
        mean, lo, hi = _summarize(logs[:, i, :], stat)
        smooth = loess_smooth(mean, span=span, degree=degree, x=lay.days)
        rows.append(pd.DataFrame({
            "region_id": rid, "day": lay.days, "week": lay.week, "rr_mean": mean, "rr_lo": lo, "rr_hi": hi,
            "rr_smooth": smooth.value, "span": span, "degree": degree,
        }))
    return pd.concat(rows, ignore_index=True)


# --- export -------------------------------------------------------------------


def export_surface(surface: RelativeRiskSurface, path, fmt: str = "csv", polygons=None) -> Path:
    """Write a surface as CSV or GeoJSON (spatial and space-time scopes only)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = surface.to_frame()
    header = {"convention": CONVENTION.format(stat=surface.stat), "component": surface.component}
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(f"# {header['convention']}\n")
            if surface.component:
                fh.write(f"# component: {surface.component}\n")
            frame.to_csv(fh, index=False, float_format="%.17g")
        return path
    if fmt == "geojson":
        if polygons is None:
            raise ValueError("GeoJSON export needs region polygons")
        if surface.scope == "temporal":
            raise ValueError("temporal surfaces have no regions; export them as CSV")
        from shapely.geometry import mapping

        missing = sorted(set(frame["region_id"]) - set(polygons))
        if missing:
            raise ValueError(f"no polygons for regions {missing}")
        features = []
        for rec in frame.to_dict("records"):
            props = {k: (None if pd.isna(v) else (int(v) if k in ("day", "week") else v)) for k, v in rec.items()}
            features.append({"type": "Feature", "properties": props,
                             "geometry": mapping(polygons[rec["region_id"]])})
        doc = {"type": "FeatureCollection", "features": features, "properties": header}
        path.write_text(json.dumps(doc))
        return path
    raise ValueError("format must be 'csv' or 'geojson'")


def read_surface(path) -> RelativeRiskSurface:
    """Read a surface written by :func:`export_surface`."""
    path = Path(path)
    component, stat = "", "mean"
    if path.suffix.lower() in (".geojson", ".json"):
        doc = json.loads(path.read_text())
        frame = pd.DataFrame([f["properties"] for f in doc["features"]], columns=CSV_COLUMNS)
        component = doc.get("properties", {}).get("component", "")
        conv = doc.get("properties", {}).get("convention", "")
    else:
        conv = ""
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                text = line[1:].strip()
                if text.startswith("component:"):
                    component = text.split(":", 1)[1].strip()
                else:
                    conv = text
        frame = pd.read_csv(path, comment="#", dtype={"region_id": object}, float_precision="round_trip")
    if "posterior median" in conv:
        stat = "median"
    if list(frame.columns) != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {list(frame.columns)}")
    scopes = frame["scope"].unique()
    if len(scopes) != 1:
        raise ValueError("a surface file holds exactly one scope")
    rid = frame["region_id"].astype(object).where(frame["region_id"].notna(), None).to_numpy(dtype=object)
    return RelativeRiskSurface(
        scope=str(scopes[0]), region_id=rid,
        day=pd.to_numeric(frame["day"], errors="coerce").to_numpy(float),
        week=pd.to_numeric(frame["week"], errors="coerce").to_numpy(float),
        rr_mean=frame["rr_mean"].to_numpy(float), rr_lo=frame["rr_lo"].to_numpy(float),
        rr_hi=frame["rr_hi"].to_numpy(float), component=component, stat=stat,
    )


def validate_surface_frame(frame: pd.DataFrame) -> list[str]:
    """Schema problems of an exported surface table; empty when valid."""
    problems = []
    if list(frame.columns) != CSV_COLUMNS:
        return [f"columns {list(frame.columns)} != {CSV_COLUMNS}"]
    if not frame["scope"].isin(SCOPES).all():
        problems.append("unknown scope")
    for col in ("rr_mean", "rr_lo", "rr_hi"):
        v = pd.to_numeric(frame[col], errors="coerce")
        if not (np.isfinite(v).all() and (v > 0).all()):
            problems.append(f"{col} must be finite and positive")
    if not (frame["rr_lo"] <= frame["rr_hi"]).all():
        problems.append("rr_lo > rr_hi")
    temporal = frame["scope"] == "temporal"
    if frame.loc[temporal, "region_id"].notna().any():
        problems.append("temporal rows must have an empty region_id")
    if frame.loc[~temporal, "region_id"].isna().any():
        problems.append("spatial rows need a region_id")
    return problems
