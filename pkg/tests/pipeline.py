"""Raw synthetic inputs for command-line pipeline runs."""

from diseasemap.fixtures import simulate_cases, simulate_stations, write_study_area


def write_raw_inputs(area, out_dir, n_days=56, pre_days=14, n_stations=25, seed=0):
    """Write stations, cases, regions, neighbours and polygons; return their paths."""
    paths = write_study_area(area, out_dir)
    paths["stations"] = out_dir / "stations.csv"
    paths["cases"] = out_dir / "cases.csv"
    simulate_stations(area, 1 - pre_days, n_days, n_stations=n_stations, seed=seed).to_csv(
        paths["stations"], index=False)
    simulate_cases(area, n_days, seed=seed).to_csv(paths["cases"], index=False)
    return paths
