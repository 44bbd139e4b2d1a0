"""Synthetic study areas and data generators.

``study_area(42)`` builds a deterministic Voronoi tessellation standing in
for a 42-region territory of about 32,000 km2 and 7.6 million inhabitants,
with one metropolitan region holding 30% of the population. Simulators draw
covariates, latent effects and counts from the model structures so fits can
be checked against known truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd

from .dataprep import DENSITY, Panel, expected_cases, week_index
from .geostat import VARIABLES
from .gmrf import iid_structure, interaction_structure, rw2_structure, sample_intrinsic
from .graph import AdjacencyGraph, RegionSet, build_adjacency, icar_structure, neighbors_from_polygons
from .models import MODEL_TABLE

TOTAL_POPULATION = 7_619_494


@dataclass(frozen=True, eq=False)
class StudyArea:
    regions: RegionSet
    graph: AdjacencyGraph
    polygons: dict


@lru_cache(maxsize=8)
def study_area(n_regions: int = 42, width_km: float = 200.0, height_km: float = 160.0, seed: int = 2020,
               metro_share: float = 0.30) -> StudyArea:
    import shapely
    from shapely.geometry import MultiPoint, box

    rng = np.random.default_rng(seed)
    frame = box(0.0, 0.0, width_km, height_km)
    # jittered lattice keeps cells comparable in size
    cols = int(np.ceil(np.sqrt(n_regions * width_km / height_km)))
    rows = int(np.ceil(n_regions / cols))
    cells = [(c, r) for r in range(rows) for c in range(cols)][:n_regions]
    pts = np.array([((c + 0.5 + 0.3 * rng.uniform(-1, 1)) * width_km / cols,
                     (r + 0.5 + 0.3 * rng.uniform(-1, 1)) * height_km / rows) for c, r in cells])
    vor = shapely.voronoi_polygons(MultiPoint(pts), extend_to=frame)
    polys = [g.intersection(frame) for g in vor.geoms]
    ids = [f"R{k + 1:02d}" for k in range(n_regions)]
    polygons = {}
    for k, p in enumerate(pts):
        pt = shapely.Point(p)
        polygons[ids[k]] = next(g for g in polys if g.covers(pt))

    weights = rng.lognormal(0.0, 1.0, n_regions)
    metro = int(np.argmin(np.hypot(pts[:, 0] - 0.75 * width_km, pts[:, 1] - 0.4 * height_km)))
    weights[metro] = 0.0
    weights = weights / weights.sum() * (1.0 - metro_share)
    weights[metro] = metro_share
    population = np.round(weights * TOTAL_POPULATION)
    population[metro] += TOTAL_POPULATION - population.sum()
    area = np.array([polygons[r].area for r in ids])
    names = [f"region {r}" + (" (metro)" if k == metro else "") for k, r in enumerate(ids)]
    regions = RegionSet.from_records(ids, names, population, area)
    graph = build_adjacency(regions, neighbors_from_polygons(polygons, "queen"))
    return StudyArea(regions=regions, graph=graph, polygons=polygons)


def small_area(n_regions: int = 10, seed: int = 7) -> StudyArea:
    """A compact fixture for fast simulation studies."""
    return study_area(n_regions, width_km=100.0, height_km=80.0, seed=seed, metro_share=0.2)


# --- covariates and counts ---------------------------------------------------


def smooth_series(rng, n: int, T: int, pre_days: int = 0, corr: float = 0.9) -> np.ndarray:
    """AR(1) region series plus a shared seasonal trend, standardized overall."""
    L = T + pre_days
    shared = np.cumsum(rng.standard_normal(L)) * 0.3
    x = np.empty((n, L))
    x[:, 0] = rng.standard_normal(n)
    for t in range(1, L):
        x[:, t] = corr * x[:, t - 1] + np.sqrt(1 - corr**2) * rng.standard_normal(n)
    x = x + shared[None, :] + rng.standard_normal((n, 1))
    return (x - x.mean()) / x.std(ddof=1)


@dataclass(frozen=True, eq=False)
class Simulation:
    panel: Panel
    truth: dict
    area: StudyArea


def simulate_panel(
    area: StudyArea,
    n_days: int,
    model_id: int = 3,
    beta=(0.3, -0.2, 0.1, 0.15),
    mu: float = 0.0,
    precisions=None,
    cell_mean: float = 20.0,
    offset: str = "generative",
    weeks_mode: str = "ceil7",
    pre_days: int = 14,
    seed: int = 0,
) -> Simulation:
    """Simulate counts from the structure of ``model_id``.

    Covariates are drawn already standardized. ``offset='generative'`` keeps
    the expected counts used to generate the data as the model offset;
    ``offset='internal'`` recomputes them from the simulated counts by
    population share, as real preprocessing would.
    """
    rng = np.random.default_rng(seed)
    regions, graph = area.regions, area.graph
    n = len(regions)
    uses_density, resolution, kind = MODEL_TABLE[model_id]
    overrides = precisions or {}
    precisions = {"u": 4.0, "v": 25.0, "gamma": 20.0, "phi": 50.0, "delta": 30.0}
    if resolution == "daily":
        # RW2 increments scale with the cube of the step, so daily walks need larger precisions
        precisions.update(gamma=20.0 * 7**3, delta=30.0 * (7**3 if kind in ("II", "IV") else 7))
    precisions.update(overrides)

    days = np.arange(1, n_days + 1)
    week = week_index(days, n_days, weeks_mode)
    history = {v: smooth_series(rng, n, n_days, pre_days) for v in VARIABLES}
    hist_days = np.arange(1 - pre_days, n_days + 1)
    covs = {v: history[v][:, pre_days:] for v in VARIABLES}
    dens = np.log(regions.population / regions.area_km2) if regions.area_km2 is not None else rng.standard_normal(n)
    dens = (dens - dens.mean()) / dens.std(ddof=1)
    covs[DENSITY] = np.repeat(dens[:, None], n_days, axis=1)

    beta = np.asarray(beta, float)
    cols = list(VARIABLES) + ([DENSITY] if uses_density else [])
    beta = beta[: len(cols)]
    lrr = mu + sum(b * covs[c] for b, c in zip(beta, cols))
    truth = {"mu": mu, "beta": dict(zip(cols, beta.tolist())), "precisions": {}}

    if resolution is not None:
        tu = week - 1 if resolution == "weekly" else days - 1
        nt = int(tu.max()) + 1
        R_s, R_t = icar_structure(graph), rw2_structure(nt)
        effects = {
            "u": (R_s, None), "v": (iid_structure(n), None),
            "gamma": (R_t, None), "phi": (iid_structure(nt), None),
        }
        if kind is not None:
            effects["delta"] = (interaction_structure(kind, R_s, R_t), None)
        draws = {}
        for name, (S, _) in effects.items():
            draws[name] = sample_intrinsic(S, precisions[name], rng)
            truth["precisions"][name] = precisions[name]
        lrr = lrr + (draws["u"] + draws["v"])[:, None] + (draws["gamma"] + draws["phi"])[tu][None, :]
        if "delta" in draws:
            lrr = lrr + draws["delta"].reshape(n, nt)[:, tu]
        truth["effects"] = draws

    share = regions.population / regions.population.sum()
    curve = np.exp(0.6 * np.sin(np.linspace(0, 2.5, n_days)))
    E0 = np.outer(share, curve)
    E0 *= cell_mean * n * n_days / E0.sum()
    O = rng.poisson(E0 * np.exp(lrr))
    if offset == "generative":
        E = E0
    elif offset == "internal":
        E = expected_cases(O, regions.population)
    else:
        raise ValueError("offset must be 'generative' or 'internal'")
    panel = Panel(
        region_ids=regions.ids, days=days, observed=O, expected=E, covariates=covs, week=week,
        history=history, history_days=hist_days,
        meta={"weeks_mode": weeks_mode, "lag": 0, "degree": 1, "start_weekday": 0, "standardized": True,
              "offset": offset},
    )
    return Simulation(panel=panel, truth=truth, area=area)


# --- raw files for the pipeline ---------------------------------------------


def simulate_stations(area: StudyArea, first_day: int, last_day: int, n_stations: int = 40,
                      seed: int = 0, buffer_km: float = 30.0) -> pd.DataFrame:
    """Daily station observations of the three environmental variables."""
    rng = np.random.default_rng(seed)
    minx, miny, maxx, maxy = np.array([g.bounds for g in area.polygons.values()]).T
    x0, y0, x1, y1 = minx.min() - buffer_km, miny.min() - buffer_km, maxx.max() + buffer_km, maxy.max() + buffer_km
    xy = np.column_stack([rng.uniform(x0, x1, n_stations), rng.uniform(y0, y1, n_stations)])
    base = {"solar_exposure": (8.0, 2.0), "mean_temperature": (15.0, 6.0), "wind_speed": (12.0, 4.0)}
    rows = []
    days = np.arange(first_day, last_day + 1)
    for var, (level, amp) in base.items():
        gx, gy = rng.normal(0, 0.02, 2)
        season = amp * np.sin(np.linspace(-1.0, 2.0, len(days)))
        for k, day in enumerate(days):
            shift = rng.normal(0, amp * 0.2)
            vals = level + season[k] + shift + gx * xy[:, 0] + gy * xy[:, 1] + rng.normal(0, amp * 0.1, n_stations)
            for s in range(n_stations):
                rows.append((f"S{s:03d}", xy[s, 0], xy[s, 1], int(day), var, float(vals[s])))
    return pd.DataFrame(rows, columns=["station_id", "x_km", "y_km", "day", "variable", "value"])


def simulate_cases(area: StudyArea, n_days: int, start_date: str = "2020-02-25", cell_mean: float = 15.0,
                   seed: int = 0) -> pd.DataFrame:
    """Daily case counts per region with region and weekly risk variation."""
    rng = np.random.default_rng(seed)
    n = len(area.regions)
    share = area.regions.population / area.regions.population.sum()
    curve = np.exp(np.sin(np.linspace(0, 3.0, n_days)))
    curve *= cell_mean * n * n_days / curve.sum()
    spatial = rng.normal(0, 0.4, n)
    weekly = rng.normal(0, 0.2, (n, n_days // 7 + 1)).repeat(7, axis=1)[:, :n_days]
    counts = rng.poisson(np.outer(share, curve) * np.exp(spatial[:, None] + weekly))
    dates = pd.date_range(start_date, periods=n_days, freq="D")
    return pd.DataFrame({
        "region_id": np.repeat(area.regions.ids, n_days),
        "date": np.tile(dates.strftime("%Y-%m-%d"), n),
        "cases": counts.ravel(),
    })


def write_study_area(area: StudyArea, out_dir) -> dict:
    """Write region CSV, neighbour CSV and polygon GeoJSON; return their paths."""
    from pathlib import Path

    from .graph import write_neighbors, write_polygons

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"regions": out / "regions.csv", "neighbors": out / "neighbors.csv", "polygons": out / "regions.geojson"}
    area.regions.to_csv(paths["regions"])
    write_neighbors(area.graph, paths["neighbors"])
    write_polygons(area.polygons, paths["polygons"])
    return paths
