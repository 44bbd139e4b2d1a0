import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box

from diseasemap.dataprep import Panel
from diseasemap.fixtures import simulate_panel
from diseasemap.inference import PosteriorSamples, SamplerConfig, fit_mcmc
from diseasemap.models import build_model
from diseasemap.report import (
    CSV_COLUMNS,
    RelativeRiskSurface,
    UnsupportedModelError,
    default_days,
    export_surface,
    loess_smooth,
    read_surface,
    region_trajectories,
    spatial_rr,
    spatiotemporal_rr,
    temporal_rr,
    validate_surface_frame,
)

from .conftest import path_graph
from .oracles import loess_point
from .test_models import plain_panel


@pytest.fixture(scope="module")
def spec5():
    g = path_graph(3)
    panel = plain_panel(g, 21)
    return build_model(5, panel, g)


def fake_samples(spec, fill=None, n_draws=50, seed=0):
    """Draws of the given blocks (name -> (draws, dim) array or scalar); everything else 0."""
    rng = np.random.default_rng(seed)
    theta = np.zeros((n_draws, spec.registry.size))
    for name, value in (fill or {}).items():
        sl = spec.registry[name]
        theta[:, sl] = value(rng, sl.stop - sl.start) if callable(value) else value
    half = n_draws // 2
    return PosteriorSamples(chains=[theta[:half], theta[half:]], registry=spec.registry)


def square_polygons(ids):
    return {rid: box(k, 0, k + 1, 1) for k, rid in enumerate(ids)}


class TestTemporal:
    def test_zero_draws_give_one(self, spec5):
        structured, unstructured = temporal_rr(fake_samples(spec5), spec5)
        for s in (structured, unstructured):
            np.testing.assert_array_equal(s.rr_mean, 1.0)
            np.testing.assert_array_equal(s.rr_lo, 1.0)
            np.testing.assert_array_equal(s.rr_hi, 1.0)

    def test_constant_log_two(self, spec5):
        g = np.zeros(3)
        g[1] = np.log(2)
        structured, _ = temporal_rr(fake_samples(spec5, {"gamma": g}), spec5)
        assert structured.rr_mean[1] == pytest.approx(2.0)
        assert structured.rr_lo[1] == pytest.approx(2.0) and structured.rr_hi[1] == pytest.approx(2.0)
        assert structured.component == "structured"

    def test_weekly_index(self, spec5):
        s, _ = temporal_rr(fake_samples(spec5), spec5)
        np.testing.assert_array_equal(s.week, [1, 2, 3])
        assert np.isnan(s.day).all()
        assert all(r is None for r in s.region_id)

    def test_daily_index(self):
        g = path_graph(3)
        spec = build_model(4, plain_panel(g, 10), g)
        s, _ = temporal_rr(fake_samples(spec), spec)
        np.testing.assert_array_equal(s.day, np.arange(1, 11))
        np.testing.assert_array_equal(s.week, [1] * 7 + [2] * 3)

    def test_exponentiate_then_average(self, spec5):
        draws = lambda rng, d: rng.normal(0, 1, (50, d))  # noqa: E731
        samples = fake_samples(spec5, {"phi": draws})
        _, unstructured = temporal_rr(samples, spec5)
        phi = samples.block("phi")
        np.testing.assert_allclose(unstructured.rr_mean, np.exp(phi).mean(axis=0), rtol=1e-14)
        assert not np.allclose(unstructured.rr_mean, np.exp(phi.mean(axis=0)))

    def test_median_flag(self, spec5):
        samples = fake_samples(spec5, {"gamma": lambda rng, d: rng.normal(0, 1, (50, d))})
        s, _ = temporal_rr(samples, spec5, stat="median")
        np.testing.assert_allclose(s.rr_mean, np.median(np.exp(samples.block("gamma")), axis=0))
        assert s.stat == "median"

    @pytest.mark.parametrize("mid", [1, 2])
    def test_unsupported(self, mid):
        g = path_graph(3)
        spec = build_model(mid, plain_panel(g, 21), g)
        with pytest.raises(UnsupportedModelError):
            temporal_rr(fake_samples(spec), spec)

    def test_needs_layout(self, spec5):
        with pytest.raises(ValueError, match="layout"):
            temporal_rr(fake_samples(spec5))


class TestSpatial:
    def test_zero(self, spec5):
        s = spatial_rr(fake_samples(spec5), spec5)
        np.testing.assert_array_equal(s.rr_mean, 1.0)
        assert list(s.region_id) == ["a", "b", "c"]

    def test_sum_of_components(self, spec5):
        s = spatial_rr(fake_samples(spec5, {"u": np.array([0.1, 0.0, -0.1]), "v": np.array([0.2, 0.0, 0.0])}), spec5)
        np.testing.assert_allclose(s.rr_mean, np.exp([0.3, 0.0, -0.1]))

    def test_unsupported(self):
        g = path_graph(3)
        spec = build_model(2, plain_panel(g, 21), g)
        with pytest.raises(UnsupportedModelError):
            spatial_rr(fake_samples(spec), spec)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 2.0))
    def test_positive_and_ordered(self, seed, scale):
        g = path_graph(3)
        spec = build_model(3, plain_panel(g, 21), g)
        samples = fake_samples(spec, {"u": lambda rng, d: rng.normal(0, scale, (200, d)),
                                      "v": lambda rng, d: rng.normal(0, scale, (200, d))}, n_draws=200, seed=seed)
        s = spatial_rr(samples, spec)
        assert np.all(s.rr_lo > 0)
        assert np.all(s.rr_lo <= s.rr_mean) and np.all(s.rr_mean <= s.rr_hi)


class TestSpatioTemporal:
    def test_zero(self, spec5):
        s = spatiotemporal_rr(fake_samples(spec5), spec5, days=[1, 8, 15])
        np.testing.assert_array_equal(s.rr_mean, 1.0)
        assert len(s) == 9

    def test_single_cell(self, spec5):
        reg = spec5.registry
        theta = np.zeros((10, reg.size))
        theta[:, reg["u"].start] = 0.15
        theta[:, reg["v"].start] = 0.05
        theta[:, reg["gamma"].start] = 0.3
        theta[:, reg["delta"].start] = -0.1
        s = spatiotemporal_rr(PosteriorSamples(chains=[theta[:5], theta[5:]], registry=reg), spec5, days=[3])
        assert s.rr_mean[0] == pytest.approx(np.exp(0.4), rel=1e-14)
        assert s.region_id[0] == "a" and s.day[0] == 3 and s.week[0] == 1

    def test_delta_layout_time_fastest(self, spec5):
        reg = spec5.registry
        theta = np.zeros((4, reg.size))
        theta[:, reg["delta"].start + 1 * 3 + 2] = np.log(5.0)  # region b, week 3
        s = spatiotemporal_rr(PosteriorSamples(chains=[theta[:2], theta[2:]], registry=reg), spec5, days=[1, 15])
        frame = s.to_frame()
        hit = frame[(frame.region_id == "b") & (frame.day == 15)]
        assert hit["rr_mean"].item() == pytest.approx(5.0)
        assert (frame.drop(hit.index)["rr_mean"] == 1.0).all()

    def test_default_every_fourteenth_day(self, spec5):
        s = spatiotemporal_rr(fake_samples(spec5), spec5)
        np.testing.assert_array_equal(np.unique(s.day), [1, 15])
        np.testing.assert_array_equal(default_days(np.arange(1, 40)), [1, 15, 29])

    def test_unknown_day(self, spec5):
        with pytest.raises(ValueError, match="not in the fitted panel"):
            spatiotemporal_rr(fake_samples(spec5), spec5, days=[99])

    def test_unsupported(self):
        g = path_graph(3)
        spec = build_model(3, plain_panel(g, 21), g)
        with pytest.raises(UnsupportedModelError):
            spatiotemporal_rr(fake_samples(spec), spec)


class TestLoess:
    @pytest.mark.parametrize("degree", [1, 2])
    @pytest.mark.parametrize("span", [0.3, 0.75, 1.0])
    def test_linear_reproduced(self, degree, span):
        y = 3.0 - 0.7 * np.arange(30)
        np.testing.assert_allclose(loess_smooth(y, span, degree).value, y, atol=1e-8, rtol=0)

    @pytest.mark.parametrize("span", [0.3, 0.75, 1.0])
    def test_quadratic_reproduced_by_degree_two(self, span):
        x = np.linspace(-2, 3, 41)
        y = 1.0 + 0.5 * x - 0.8 * x**2
        np.testing.assert_allclose(loess_smooth(y, span, 2, x=x).value, y, atol=1e-8, rtol=0)

    def test_quadratic_degree_one_deviates_at_extremes(self):
        x = np.linspace(-2, 2, 41)
        y = x**2
        fit = loess_smooth(y, 0.75, 1, x=x).value
        assert fit[0] < y[0] - 0.1 and fit[-1] < y[-1] - 0.1
        assert fit[20] > y[20] + 0.1

    def test_constant(self):
        np.testing.assert_allclose(loess_smooth(np.full(12, 4.2)).value, 4.2, atol=1e-12)

    @pytest.mark.parametrize("degree", [1, 2])
    def test_matches_weighted_least_squares_oracle(self, degree):
        rng = np.random.default_rng(5)
        x = np.sort(rng.uniform(0, 10, 25))
        y = np.sin(x) + rng.normal(0, 0.2, 25)
        fit = loess_smooth(y, 0.5, degree, x=x).value
        for i in (0, 11, 24):
            assert fit[i] == pytest.approx(loess_point(x, y, x[i], 0.5, degree), abs=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(5, 60), st.floats(0.2, 1.0), st.integers(0, 1000))
    def test_length_and_finite(self, n, span, seed):
        y = np.random.default_rng(seed).normal(size=n)
        out = loess_smooth(y, span)
        assert out.value.shape == (n,) and np.isfinite(out.value).all()
        assert (out.span, out.degree) == (span, 2)

    @pytest.mark.parametrize("kwargs", [{"span": 0.0}, {"span": 1.2}, {"degree": 3}, {"degree": 0}])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(ValueError):
            loess_smooth(np.arange(10.0), **kwargs)

    @pytest.mark.parametrize("n", [0, 3, 4])
    def test_too_short(self, n):
        with pytest.raises(ValueError, match="too short"):
            loess_smooth(np.arange(float(n)))


class TestTrajectories:
    def test_top_regions_and_columns(self, spec5):
        samples = fake_samples(spec5, {"u": np.array([0.0, 0.5, -0.5])})
        traj = region_trajectories(samples, spec5, top=2)
        assert list(traj["region_id"].unique()) == ["b", "a"]
        assert list(traj.columns) == ["region_id", "day", "week", "rr_mean", "rr_lo", "rr_hi", "rr_smooth",
                                      "span", "degree"]
        assert len(traj) == 2 * 21

    def test_explicit_regions(self, spec5):
        traj = region_trajectories(fake_samples(spec5), spec5, regions=["c"], span=0.5, degree=1)
        assert set(traj["region_id"]) == {"c"}
        np.testing.assert_allclose(traj["rr_smooth"], 1.0, atol=1e-12)


class TestExport:
    @pytest.fixture
    def spatial(self, spec5):
        return spatial_rr(fake_samples(spec5, {"u": lambda rng, d: rng.normal(0, 0.3, (50, d))}), spec5)

    def test_temporal_csv_has_empty_region(self, spec5, tmp_path):
        s, _ = temporal_rr(fake_samples(spec5), spec5)
        path = export_surface(s, tmp_path / "t.csv")
        frame = pd.read_csv(path, comment="#")
        assert list(frame.columns) == CSV_COLUMNS
        assert frame["region_id"].isna().all()
        assert validate_surface_frame(frame) == []
        assert path.read_text().startswith("# rr_mean, rr_lo, rr_hi summarize exp(draw)")

    def test_csv_round_trip(self, spec5, tmp_path):
        samples = fake_samples(spec5, {n: (lambda rng, d: rng.normal(0, 0.4, (50, d))) for n in
                                       ("u", "v", "gamma", "phi", "delta")})
        s = spatiotemporal_rr(samples, spec5, days=[1, 2, 20])
        back = read_surface(export_surface(s, tmp_path / "st.csv"))
        for col in ("rr_mean", "rr_lo", "rr_hi", "day", "week"):
            np.testing.assert_allclose(getattr(back, col), getattr(s, col), rtol=1e-9)
        assert list(back.region_id) == list(s.region_id)
        assert back.scope == "spatio-temporal"

    def test_temporal_round_trip_keeps_component(self, spec5, tmp_path):
        _, s = temporal_rr(fake_samples(spec5, {"phi": lambda rng, d: rng.normal(0, 1, (50, d))}), spec5,
                           stat="median")
        back = read_surface(export_surface(s, tmp_path / "phi.csv"))
        assert back.component == "unstructured" and back.stat == "median"
        assert all(r is None for r in back.region_id)
        np.testing.assert_allclose(back.rr_mean, s.rr_mean, rtol=1e-9)

    def test_geojson_features(self, spatial, tmp_path):
        path = export_surface(spatial, tmp_path / "s.geojson", "geojson", polygons=square_polygons("abc"))
        doc = json.loads(path.read_text())
        assert len(doc["features"]) == 3
        assert all("rr_mean" in f["properties"] for f in doc["features"])
        assert "exp(draw)" in doc["properties"]["convention"]
        back = read_surface(path)
        np.testing.assert_allclose(back.rr_mean, spatial.rr_mean, rtol=1e-9)

    def test_geojson_needs_polygons(self, spatial, tmp_path):
        with pytest.raises(ValueError, match="polygons"):
            export_surface(spatial, tmp_path / "s.geojson", "geojson")

    def test_geojson_missing_region(self, spatial, tmp_path):
        with pytest.raises(ValueError, match="no polygons"):
            export_surface(spatial, tmp_path / "s.geojson", "geojson", polygons=square_polygons("ab"))

    def test_geojson_rejects_temporal(self, spec5, tmp_path):
        s, _ = temporal_rr(fake_samples(spec5), spec5)
        with pytest.raises(ValueError):
            export_surface(s, tmp_path / "t.geojson", "geojson", polygons=square_polygons("abc"))

    def test_unknown_format(self, spatial, tmp_path):
        with pytest.raises(ValueError):
            export_surface(spatial, tmp_path / "s.xlsx", "xlsx")

    def test_bad_scope(self):
        with pytest.raises(ValueError):
            RelativeRiskSurface("global", np.array([]), np.array([]), np.array([]), np.array([]), np.array([]),
                                np.array([]))

    @pytest.mark.parametrize("mutate,problem", [
        (lambda f: f.assign(rr_mean=-1.0), "rr_mean"),
        (lambda f: f.assign(rr_lo=10.0), "rr_lo > rr_hi"),
        (lambda f: f.assign(region_id=None), "region_id"),
        (lambda f: f.assign(scope="global"), "scope"),
        (lambda f: f.drop(columns="week"), "columns"),
    ])
    def test_validation_catches(self, spatial, mutate, problem):
        problems = validate_surface_frame(mutate(spatial.to_frame()))
        assert any(problem in p for p in problems)


@pytest.fixture(scope="module")
def fitted(small):
    """Interaction-model fit to synthetic data with one region at three times the risk."""
    base = simulate_panel(small, 28, model_id=5, seed=21)
    p = base.panel
    rr = np.ones(p.n_regions)
    rr[3] = 3.0
    observed = np.random.default_rng(8).poisson(p.expected * rr[:, None])
    panel = Panel(region_ids=p.region_ids, days=p.days, observed=observed, expected=p.expected,
                  covariates=p.covariates, week=p.week, meta=p.meta)
    spec = build_model(5, panel, small.graph)
    samples = fit_mcmc(spec, panel, SamplerConfig(n_chains=2, n_iterations=2000, burn_in=1000, thinning=2,
                                                  seed=3))
    return spec, samples


class TestSimulatedFits:
    def test_inflated_region(self, fitted):
        spec, samples = fitted
        s = spatial_rr(samples)
        assert 2.0 <= s.rr_mean[3] <= 4.5
        assert np.argmax(s.rr_mean) == 3

    def test_unstructured_near_one(self, fitted):
        _, samples = fitted
        _, unstructured = temporal_rr(samples)
        assert 0.8 <= unstructured.rr_mean.mean() <= 1.25

    def test_daily_average_matches_spatial(self, fitted):
        spec, samples = fitted
        st_ = spatiotemporal_rr(samples, days=spec.days).to_frame()
        avg = st_.assign(lr=np.log(st_["rr_mean"])).groupby("region_id", sort=False)["lr"].mean()
        sp = spatial_rr(samples)
        np.testing.assert_allclose(avg.to_numpy(), np.log(sp.rr_mean), atol=0.1)

    def test_exports_validate(self, fitted, tmp_path):
        _, samples = fitted
        for s in (*temporal_rr(samples), spatial_rr(samples), spatiotemporal_rr(samples)):
            assert validate_surface_frame(s.to_frame()) == []
            assert np.all(s.rr_lo <= s.rr_mean) and np.all(s.rr_mean <= s.rr_hi)
