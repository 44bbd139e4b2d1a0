"""Ordinary kriging of daily station data onto a grid and areal aggregation.

Coordinates are planar kilometres throughout. Projection from geographic
coordinates is the caller's job.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist, pdist

logger = logging.getLogger(__name__)

VARIABLES = ("solar_exposure", "mean_temperature", "wind_speed")
FAMILIES = ("exponential", "spherical", "gaussian")
MIN_STATIONS_UNFLAGGED = 5


class InsufficientDataError(ValueError):
    pass


class VariogramFitError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class KrigingError(RuntimeError):
    pass


# --- variograms -------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalVariogram:
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    variance: float = np.nan
    max_dist: float = np.nan

    def __len__(self):
        return len(self.lags)


def empirical_variogram(coords, values, n_bins: int = 15, max_dist: float | None = None) -> EmpiricalVariogram:
    """Classical (Matheron) estimator, binned on pair distance.

    Pairs with distance in ``(edge_k, edge_k+1]`` fall in bin ``k``; the bin
    lag is the mean distance of its pairs. Empty bins are dropped.
    """
    coords = np.asarray(coords, dtype=float).reshape(len(values), -1)
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise InsufficientDataError("need at least 2 observations for a variogram")
    d = pdist(coords)
    sq = pdist(values[:, None], metric="sqeuclidean")
    if max_dist is None:
        max_dist = default_max_dist(coords)
    if not max_dist > 0:
        raise ValueError("max_dist must be positive")
    edges = np.linspace(0.0, max_dist, n_bins + 1)
    inside = (d > 0) & (d <= max_dist)
    idx = np.clip(np.searchsorted(edges, d[inside], side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    dsum = np.bincount(idx, weights=d[inside], minlength=n_bins)
    gsum = np.bincount(idx, weights=sq[inside], minlength=n_bins)
    keep = counts > 0
    return EmpiricalVariogram(
        lags=dsum[keep] / counts[keep],
        gamma=gsum[keep] / (2.0 * counts[keep]),
        counts=counts[keep],
        variance=float(np.var(values, ddof=1)),
        max_dist=float(max_dist),
    )


def default_max_dist(coords) -> float:
    """One third of the bounding-box diagonal."""
    coords = np.asarray(coords, float)
    span = coords.max(axis=0) - coords.min(axis=0)
    return float(np.hypot(*span[:2]) / 3.0) if coords.shape[1] >= 2 else float(span[0] / 3.0)


@dataclass(frozen=True)
class VariogramModel:
    family: str
    nugget: float
    partial_sill: float
    range: float
    objective: float = field(default=np.nan, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown variogram family {self.family!r}")
        if self.nugget < 0 or self.partial_sill < 0 or not self.range > 0:
            raise ValueError("variogram needs nugget >= 0, partial_sill >= 0, range > 0")

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        return np.where(h > 0, self.nugget + self.partial_sill * _shape(self.family, h, self.range), 0.0)


def _shape(family, h, a):
    r = h / a
    if family == "exponential":
        return 1.0 - np.exp(-r)
    if family == "gaussian":
        return 1.0 - np.exp(-(r**2))
    return np.where(r < 1.0, 1.5 * r - 0.5 * r**3, 1.0)


def fit_variogram(emp: EmpiricalVariogram, families=FAMILIES, n_starts: int = 3) -> VariogramModel:
    """Weighted least squares fit, weights ``count / h**2``, best family by objective.

    Each family is fitted by bounded trust-region least squares from a small
    set of data-driven starting points.
    """
    if len(emp) < 3:
        raise InsufficientDataError(f"need at least 3 nonempty bins, got {len(emp)}")
    h, g = emp.lags, emp.gamma
    w = emp.counts / h**2
    sw = np.sqrt(w / w.sum())
    gmax = float(g.max())
    scale = gmax if gmax > 0 else 1.0
    var = emp.variance if np.isfinite(emp.variance) and emp.variance > 0 else gmax
    hmax = emp.max_dist if np.isfinite(emp.max_dist) else h.max()
    base = np.array([g.min(), max(var - g.min(), 0.0), hmax / 2.0])
    starts = [base]
    for f in (0.25, 4.0)[: max(n_starts - 1, 0)]:
        starts.append(base * np.array([1.0, 1.0, f]))
    starts.append(np.array([0.0, gmax, hmax / 2.0]))

    lo = np.array([0.0, 0.0, h.min() * 1e-3])
    hi = np.array([np.inf, np.inf, 1e3 * h.max()])
    diagnostics = {}
    best = None
    for family in families:
        def resid(p, family=family):
            return sw * (p[0] + p[1] * _shape(family, h, p[2]) - g) / scale

        fam_best = None
        for x0 in starts:
            x0 = np.clip(x0, lo, np.where(np.isfinite(hi), hi, x0 + 1))
            x0[2] = min(max(x0[2], lo[2] * 10), hi[2] / 10)
            try:
                res = least_squares(resid, x0, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
            except (ValueError, FloatingPointError) as exc:
                diagnostics.setdefault(family, []).append(str(exc))
                continue
            if not np.all(np.isfinite(res.x)):
                continue
            obj = float(np.sum(res.fun**2)) * scale**2
            if fam_best is None or obj < fam_best[0]:
                fam_best = (obj, res.x)
        if fam_best is None:
            continue
        diagnostics[family] = fam_best[0]
        if best is None or fam_best[0] < best[0] - 1e-14 * scale**2:
            best = (fam_best[0], family, fam_best[1])
    if best is None:
        raise VariogramFitError("variogram fit failed for every family", diagnostics)
    obj, family, (nug, psill, rng) = best
    return VariogramModel(family, float(nug), float(psill), float(rng), objective=obj)


# --- kriging ----------------------------------------------------------------


@dataclass(frozen=True)
class KrigingEstimate:
    target: np.ndarray
    value: np.ndarray
    variance: np.ndarray
    weights: np.ndarray = field(repr=False)


def merge_duplicate_stations(coords, values):
    coords = np.asarray(coords, float)
    values = np.asarray(values, float)
    uniq, inv = np.unique(coords, axis=0, return_inverse=True)
    inv = inv.ravel()
    merged = np.bincount(inv, weights=values) / np.bincount(inv)
    return uniq, merged


def _solve_system(coords, model: VariogramModel, targets):
    n = len(coords)
    K = np.ones((n + 1, n + 1))
    K[:n, :n] = model(cdist(coords, coords))
    K[n, n] = 0.0
    rhs = np.ones((n + 1, len(targets)))
    rhs[:n] = model(cdist(coords, targets))
    with warnings.catch_warnings():
        warnings.simplefilter("error", linalg.LinAlgWarning)
        lu = linalg.lu_factor(K, check_finite=True)
        if np.min(np.abs(np.diag(lu[0]))) < 1e-12 * np.max(np.abs(K)):
            raise linalg.LinAlgError("singular kriging matrix")
        sol = linalg.lu_solve(lu, rhs)
    return sol, rhs


def ordinary_kriging(coords, values, model: VariogramModel, targets) -> KrigingEstimate:
    """Ordinary kriging predictions and variances at ``targets``.

    The system is the semivariance matrix bordered by the unbiasedness row of
    ones. Coincident stations make it singular; they are averaged and the
    solve retried.
    """
    coords = np.asarray(coords, float).reshape(len(values), -1)
    values = np.asarray(values, float)
    targets = np.atleast_2d(np.asarray(targets, float))
    if len(values) < 2:
        raise InsufficientDataError("ordinary kriging needs at least 2 stations")
    try:
        sol, rhs = _solve_system(coords, model, targets)
    except (linalg.LinAlgError, linalg.LinAlgWarning):
        coords, values = merge_duplicate_stations(coords, values)
        logger.warning("singular kriging system; merged duplicate station locations (%d remain)", len(values))
        if len(values) < 2:
            raise KrigingError("fewer than 2 distinct station locations")
        try:
            sol, rhs = _solve_system(coords, model, targets)
        except (linalg.LinAlgError, linalg.LinAlgWarning) as exc:
            raise KrigingError(f"kriging system singular after merging duplicates: {exc}") from exc
    n = len(values)
    lam = sol[:n]
    pred = values @ lam
    var = np.einsum("ij,ij->j", lam, rhs[:n]) + sol[n]
    return KrigingEstimate(target=targets, value=pred, variance=var, weights=lam.T)


# --- grid and areal aggregation --------------------------------------------


@dataclass(frozen=True)
class Grid:
    points: np.ndarray
    spacing: float
    assignment: np.ndarray  # region index per point, -1 when outside every region
    region_ids: tuple[str, ...] = ()

    def points_in(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)


def make_grid(polygons: dict, spacing_km: float = 5.0) -> Grid:
    """Cell-centred lattice over the joint bounding box, assigned by point-in-polygon.

    The first point sits half a spacing inside the bounding-box minimum corner.
    Boundary points go to the region with the smaller id.
    """
    import shapely

    if not spacing_km > 0:
        raise ValueError("grid spacing must be positive")
    ids = tuple(sorted(polygons))
    geoms = [polygons[r] for r in ids]
    for rid, g in zip(ids, geoms):
        if g.is_empty or g.area <= 0 or not g.is_valid:
            raise ValueError(f"degenerate polygon for region {rid}")
    minx, miny, maxx, maxy = shapely.union_all(geoms).bounds
    xs = np.arange(minx + spacing_km / 2.0, maxx, spacing_km)
    ys = np.arange(miny + spacing_km / 2.0, maxy, spacing_km)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    assign = np.full(len(pts), -1, dtype=int)
    shp = shapely.points(pts)
    # iterate in reverse so the smallest id wins ties on shared boundaries
    for k in reversed(range(len(ids))):
        shapely.prepare(geoms[k])
        assign[shapely.covers(geoms[k], shp)] = k
    return Grid(points=pts, spacing=float(spacing_km), assignment=assign, region_ids=ids)


def areal_average(values, grid: Grid, fallback=None):
    """Unweighted mean of grid estimates per region.

    Regions holding no grid point take ``fallback[k]`` (the kriging estimate
    at the region centroid) and are flagged. Returns ``(means, flags)``.
    """
    values = np.asarray(values, float)
    n = len(grid.region_ids)
    inside = grid.assignment >= 0
    counts = np.bincount(grid.assignment[inside], minlength=n)
    sums = np.bincount(grid.assignment[inside], weights=values[inside], minlength=n)
    out = np.divide(sums, counts, out=np.full(n, np.nan), where=counts > 0)
    flags = counts == 0
    if flags.any():
        if fallback is None:
            raise ValueError("regions without grid points need centroid fallback values")
        out[flags] = np.asarray(fallback, float)[flags]
    return out, flags


def region_centroids(polygons: dict) -> np.ndarray:
    return np.array([[polygons[r].centroid.x, polygons[r].centroid.y] for r in sorted(polygons)])


# --- station pipeline -------------------------------------------------------


def read_stations(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"station_id": str, "variable": str})
    need = ["station_id", "x_km", "y_km", "day", "variable", "value"]
    missing = set(need) - set(df.columns)
    if missing:
        raise ValueError(f"station file lacks columns {sorted(missing)}")
    if df.duplicated(["station_id", "day", "variable"]).any():
        raise ValueError("more than one value per (station, day, variable)")
    if not np.all(np.isfinite(df[["x_km", "y_km"]].to_numpy())):
        raise ValueError("station coordinates must be finite")
    return df[need]


def select_stations(stations: pd.DataFrame, bounds, buffer_km: float = 100.0) -> pd.DataFrame:
    minx, miny, maxx, maxy = bounds
    x, y = stations["x_km"], stations["y_km"]
    keep = (x >= minx - buffer_km) & (x <= maxx + buffer_km) & (y >= miny - buffer_km) & (y <= maxy + buffer_km)
    return stations[keep]


def krige_regions(
    stations: pd.DataFrame,
    polygons: dict,
    spacing_km: float = 5.0,
    buffer_km: float = 100.0,
    n_bins: int = 15,
    families=FAMILIES,
) -> pd.DataFrame:
    """Region-level daily covariates from station observations.

    Returns a long table ``region_id, day, variable, value, flag``. ``flag``
    is empty for clean values and otherwise lists ``few_stations``,
    ``centroid_fallback``, ``default_variogram`` or ``no_data``.
    """
    import shapely

    grid = make_grid(polygons, spacing_km)
    bounds = shapely.union_all(list(polygons.values())).bounds
    used = select_stations(stations, bounds, buffer_km)
    ids = grid.region_ids
    centroids = region_centroids(polygons)
    on_grid = grid.assignment >= 0
    targets = np.vstack([grid.points[on_grid], centroids])
    n_grid = int(on_grid.sum())

    rows = []
    for (day, variable), grp in used.groupby(["day", "variable"], sort=True):
        flag = []
        grp = grp.dropna(subset=["value"])
        if len(grp) < MIN_STATIONS_UNFLAGGED:
            flag.append("few_stations")
            logger.warning("day %s, %s: only %d stations report", day, variable, len(grp))
        coords = grp[["x_km", "y_km"]].to_numpy(float)
        vals = grp["value"].to_numpy(float)
        if len(np.unique(coords, axis=0)) < 2:
            means = np.full(len(ids), np.nan)
            region_flags = np.zeros(len(ids), bool)
            flag.append("no_data")
        else:
            try:
                model = fit_variogram(empirical_variogram(coords, vals, n_bins), families)
            except (InsufficientDataError, VariogramFitError):
                spread = float(np.var(vals, ddof=1)) if len(vals) > 1 else 0.0
                model = VariogramModel("exponential", 0.0, max(spread, 1e-12), default_max_dist(coords) or 1.0)
                flag.append("default_variogram")
            est = ordinary_kriging(coords, vals, model, targets)
            full = np.full(len(grid.points), np.nan)
            full[on_grid] = est.value[:n_grid]
            means, region_flags = areal_average(full, grid, fallback=est.value[n_grid:])
        for k, rid in enumerate(ids):
            f = list(flag)
            if region_flags[k]:
                f.append("centroid_fallback")
            rows.append((rid, int(day), variable, means[k], ";".join(f)))
    return pd.DataFrame(rows, columns=["region_id", "day", "variable", "value", "flag"])
