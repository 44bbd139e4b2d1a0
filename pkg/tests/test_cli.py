import json

import numpy as np
import pandas as pd
import pytest

from diseasemap.cli import _load_config, _parse_days, build_parser, main
from diseasemap.dataprep import read_panel
from diseasemap.report import read_surface, validate_surface_frame

from .pipeline import write_raw_inputs


@pytest.fixture(scope="module")
def prepared(small, tmp_path_factory):
    """Raw inputs kriged and prepared once for the module (lag 7)."""
    root = tmp_path_factory.mktemp("cli")
    paths = write_raw_inputs(small, root, n_days=28, pre_days=7, n_stations=12)
    paths["covariates"] = root / "covariates.csv"
    paths["panel"] = root / "panel.csv"
    assert main(["krige", "--stations", str(paths["stations"]), "--regions", str(paths["polygons"]),
                 "--spacing", "10", "--out", str(paths["covariates"])]) == 0
    assert main(["prepare", "--cases", str(paths["cases"]), "--regions", str(paths["regions"]),
                 "--covariates", str(paths["covariates"]), "--polygons", str(paths["polygons"]),
                 "--lag", "7", "--out", str(paths["panel"])]) == 0
    return root, paths


def fit_args(paths, out, model=3, extra=()):
    return ["fit", "--model", str(model), "--panel", str(paths["panel"]), "--graph", str(paths["neighbors"]),
            "--chains", "2", "--iterations", "300", "--burn-in", "150", "--thinning", "1", "--seed", "5",
            "--out", str(out), *extra]


@pytest.fixture(scope="module")
def fitted(prepared):
    root, paths = prepared
    out = root / "fit3"
    assert main(fit_args(paths, out)) == 0
    return out


class TestParsing:
    @pytest.mark.parametrize("text,expected", [
        ("1,15,29", [1, 15, 29]),
        ("1-3", [1, 2, 3]),
        ("2, 5-6", [2, 5, 6]),
        ("", None),
        (None, None),
    ])
    def test_days(self, text, expected):
        assert _parse_days(text) == expected

    def test_negative_day(self):
        assert _parse_days("-3") == [-3]

    def test_model_range(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["fit", "--model", "13", "--panel", "p", "--graph", "g", "--out", "o"])

    def test_config_json_and_yaml(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"5": {"lag": 7}, "sampler": {"n_chains": 2}}))
        (tmp_path / "c.yaml").write_text("5:\n  lag: 7\nsampler:\n  n_chains: 2\n")
        assert _load_config(tmp_path / "c.json") == _load_config(tmp_path / "c.yaml")


class TestPrepare:
    def test_panel_meta(self, prepared):
        _, paths = prepared
        panel = read_panel(paths["panel"])
        assert panel.meta["lag"] == 7 and panel.meta["degree"] == 1
        np.testing.assert_allclose(panel.expected.sum(axis=0), panel.observed.sum(axis=0), rtol=1e-9)

    def test_kriged_table(self, prepared):
        _, paths = prepared
        table = pd.read_csv(paths["covariates"], keep_default_na=False)
        assert list(table.columns) == ["region_id", "day", "variable", "value", "flag"]
        assert table["region_id"].nunique() == 10


class TestFit:
    def test_outputs(self, fitted):
        for name in ("manifest.json", "summary.json", "posterior_summary.csv", "chain_00.npy",
                     "figures/traces.png", "figures/coefficients.png", "figures/temporal_rr.png",
                     "figures/spatial_rr.png"):
            assert (fitted / name).exists(), name
        summary = json.loads((fitted / "summary.json").read_text())
        assert summary["model_id"] == 3 and summary["lag"] == 7

    def test_lag_mismatch(self, prepared, tmp_path):
        _, paths = prepared
        with pytest.raises(SystemExit, match="lag=7"):
            main(fit_args(paths, tmp_path / "bad", extra=["--lag", "14"]))

    def test_config_sampler_entry(self, prepared, tmp_path):
        _, paths = prepared
        cfg = tmp_path / "models.json"
        cfg.write_text(json.dumps({"1": {"sampler": {"n_iterations": 250}}, "sampler": {"thinning": 2}}))
        out = tmp_path / "fit1"
        args = ["fit", "--model", "1", "--panel", str(paths["panel"]), "--graph", str(paths["neighbors"]),
                "--config", str(cfg), "--burn-in", "50", "--chains", "2", "--out", str(out)]
        assert main(args) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["n_iterations"] == 250 and manifest["config"]["thinning"] == 2

    def test_missing_panel(self, prepared, tmp_path, capsys):
        _, paths = prepared
        args = fit_args(paths, tmp_path / "x")
        args[args.index("--panel") + 1] = str(tmp_path / "nope.csv")
        assert main(args) == 2
        assert "error" in capsys.readouterr().err


class TestCompareAndReport:
    def test_compare(self, prepared, fitted, tmp_path):
        root, paths = prepared
        other = root / "fit2"
        if not other.exists():
            assert main(fit_args(paths, other, model=2)) == 0
        out = tmp_path / "table.csv"
        assert main(["compare", "--fits", str(fitted), str(other), "--out", str(out)]) == 0
        table = pd.read_csv(out, keep_default_na=False)
        assert list(table.columns) == ["model", "lag", "DIC", "pD", "flags"]
        assert set(table["model"]) == {2, 3}
        assert (tmp_path / "table_coefficients.png").exists()

    def test_report_temporal(self, fitted, tmp_path):
        out = tmp_path / "temporal.csv"
        assert main(["report", "--fit", str(fitted), "--what", "temporal", "--out", str(out)]) == 0
        for path in (out, tmp_path / "temporal_unstructured.csv"):
            surface = read_surface(path)
            assert validate_surface_frame(surface.to_frame()) == []
        assert (tmp_path / "temporal.png").exists()

    def test_report_spatial_geojson(self, prepared, fitted, tmp_path):
        _, paths = prepared
        out = tmp_path / "spatial.geojson"
        assert main(["report", "--fit", str(fitted), "--what", "spatial", "--format", "geojson",
                     "--polygons", str(paths["polygons"]), "--out", str(out)]) == 0
        assert len(json.loads(out.read_text())["features"]) == 10

    def test_report_st_needs_interaction(self, fitted, tmp_path, capsys):
        assert main(["report", "--fit", str(fitted), "--what", "st", "--out", str(tmp_path / "st.csv")]) == 2
        assert "delta" in capsys.readouterr().err

    def test_geojson_without_polygons(self, fitted, tmp_path):
        assert main(["report", "--fit", str(fitted), "--what", "spatial", "--format", "geojson",
                     "--out", str(tmp_path / "s.geojson")]) == 2
