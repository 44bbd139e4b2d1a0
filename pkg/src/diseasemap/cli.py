"""Command-line entry point: krige, prepare, fit, compare, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger("diseasemap")


def _load_config(path) -> dict:
    """JSON or YAML model configuration keyed by model id."""
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    return {str(k): v for k, v in (doc or {}).items()}


def _parse_days(text):
    if not text:
        return None
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


# --- subcommands ----------------------------------------------------------------


def cmd_krige(args) -> int:
    from .geostat import krige_regions, read_stations
    from .graph import read_polygons

    stations = read_stations(args.stations)
    polygons = read_polygons(args.regions)
    table = krige_regions(stations, polygons, spacing_km=args.spacing, buffer_km=args.buffer, n_bins=args.bins)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(args.out, index=False, float_format="%.10g")
    n_flagged = int((table["flag"] != "").sum())
    print(f"wrote {len(table)} region-day values to {args.out} ({n_flagged} flagged)")
    return 0


def cmd_prepare(args) -> int:
    from .dataprep import prepare_panel, read_cases, read_covariates
    from .graph import RegionSet, read_polygons

    regions = RegionSet.read_csv(args.regions)
    density = None
    if args.polygons:
        polygons = read_polygons(args.polygons)
        area = np.array([polygons[r].area for r in regions.ids])
        density = regions.population / area
    panel = prepare_panel(regions, read_cases(args.cases), read_covariates(args.covariates), lag=args.lag,
                          degree=args.degree, weeks_mode=args.weeks, density=density)
    panel.to_csv(args.out)
    print(f"wrote panel {panel.n_regions} regions x {panel.n_days} days ({panel.n_weeks} weeks) to {args.out}")
    return 0


def _fit_options(args) -> dict:
    opts = {"lag": args.lag, "degree": args.degree, "weeks_mode": None, "sampler": {}}
    if args.config:
        conf = _load_config(args.config)
        entry = conf.get(str(args.model), {})
        for key in ("lag", "degree", "weeks_mode"):
            if key in entry and getattr(args, key, None) is None:
                opts[key] = entry[key]
        opts["sampler"] = {**conf.get("sampler", {}), **entry.get("sampler", {})}
    for key in ("chains", "iterations", "burn_in", "thinning", "seed"):
        value = getattr(args, key)
        if value is not None:
            name = {"chains": "n_chains", "iterations": "n_iterations"}.get(key, key)
            opts["sampler"][name] = value
    return opts


def cmd_fit(args) -> int:
    from .dataprep import read_panel
    from .graph import build_adjacency
    from .inference import SamplerConfig, fit_mcmc, save_samples, summarize_fit
    from .inference.storage import SUMMARY
    from .models import build_model
    from .plotting import plot_coefficients, plot_spatial, plot_temporal, plot_traces
    from .report import UnsupportedModelError, spatial_rr, temporal_rr

    opts = _fit_options(args)
    panel = read_panel(args.panel)
    for key in ("lag", "degree"):
        want = opts[key]
        have = panel.meta.get(key)
        if want is not None and have is not None and int(want) != int(have):
            raise SystemExit(f"panel was prepared with {key}={have} but {key}={want} was requested; "
                             f"re-run prepare with --{key} {want}")
    graph = build_adjacency(list(panel.region_ids), args.graph)
    spec = build_model(args.model, panel, graph, weeks_mode=opts["weeks_mode"])
    config = SamplerConfig(**opts["sampler"])
    samples = fit_mcmc(spec, panel, config)
    out = save_samples(samples, args.out)
    summary = summarize_fit(samples, spec, panel)
    summary.table.to_csv(out / "posterior_summary.csv", index=False, float_format="%.10g")
    (out / SUMMARY).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    figs = out / "figures"
    plot_traces(samples, figs / "traces.png")
    plot_coefficients({f"model {spec.model_id}": summary.table}, figs / "coefficients.png")
    try:
        plot_temporal(*temporal_rr(samples, spec), figs / "temporal_rr.png")
        plot_spatial(spatial_rr(samples, spec), figs / "spatial_rr.png")
    except UnsupportedModelError:
        pass
    flags = ",".join(summary.flags) or "none"
    print(f"model {spec.model_id}: DIC {summary.DIC:.2f}  pD {summary.p_D:.2f}  max R-hat {summary.max_rhat:.3f}"
          f"  flags {flags}")
    return 0


def cmd_compare(args) -> int:
    from .inference import FitSummary, compare_models
    from .inference.storage import SUMMARY
    from .plotting import plot_coefficients

    summaries, tables = [], {}
    for d in args.fits:
        d = Path(d)
        summaries.append(FitSummary.from_dict(json.loads((d / SUMMARY).read_text())))
        post = d / "posterior_summary.csv"
        if post.exists():
            tables[f"model {summaries[-1].model_id} lag {summaries[-1].lag}"] = pd.read_csv(post)
    table = compare_models(summaries)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, float_format="%.6f")
    if tables:
        try:
            plot_coefficients(tables, out.with_name(out.stem + "_coefficients.png"))
        except ValueError:
            pass
    print(table.to_string(index=False))
    return 0


def cmd_report(args) -> int:
    from .graph import read_polygons
    from .inference import load_samples
    from .plotting import plot_spatial, plot_temporal, plot_trajectories
    from .report import export_surface, region_trajectories, spatial_rr, spatiotemporal_rr, temporal_rr

    samples = load_samples(args.fit)
    polygons = read_polygons(args.polygons) if args.polygons else None
    out = Path(args.out)
    if args.format == "geojson" and args.what == "temporal":
        raise SystemExit("temporal surfaces have no regions; use --format csv")
    written = []
    if args.what == "temporal":
        structured, unstructured = temporal_rr(samples, stat=args.stat)
        written.append(export_surface(structured, out, args.format))
        written.append(export_surface(unstructured, out.with_name(out.stem + "_unstructured" + out.suffix),
                                      args.format))
        written.append(plot_temporal(structured, unstructured, out.with_suffix(".png")))
    elif args.what == "spatial":
        surface = spatial_rr(samples, stat=args.stat)
        written.append(export_surface(surface, out, args.format, polygons=polygons))
        written.append(plot_spatial(surface, out.with_suffix(".png")))
    else:
        surface = spatiotemporal_rr(samples, days=_parse_days(args.days), stat=args.stat)
        written.append(export_surface(surface, out, args.format, polygons=polygons))
        traj = region_trajectories(samples, top=args.top, span=args.loess_span, degree=args.loess_degree,
                                   stat=args.stat)
        traj_path = out.with_name(out.stem + "_loess.csv")
        traj.to_csv(traj_path, index=False, float_format="%.10g")
        written += [traj_path, plot_trajectories(traj, out.with_name(out.stem + "_loess.png"))]
    for p in written:
        print(f"wrote {p}")
    return 0


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diseasemap", description="Bayesian space-time disease mapping")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("krige", help="station observations -> region-day covariates")
    k.add_argument("--stations", required=True)
    k.add_argument("--regions", required=True, help="region polygons (GeoJSON, property 'id')")
    k.add_argument("--spacing", type=float, default=5.0, help="grid spacing in km")
    k.add_argument("--buffer", type=float, default=100.0, help="station buffer around the study area in km")
    k.add_argument("--bins", type=int, default=15, help="empirical variogram bins")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_krige)

    q = sub.add_parser("prepare", help="cases + covariates -> model panel")
    q.add_argument("--cases", required=True)
    q.add_argument("--regions", required=True, help="region table id,name,population[,area_km2]")
    q.add_argument("--covariates", required=True)
    q.add_argument("--polygons", help="GeoJSON polygons; areas used for population density")
    q.add_argument("--lag", type=int, default=0)
    q.add_argument("--degree", type=int, default=1, choices=(1, 2, 3))
    q.add_argument("--weeks", default="ceil7", choices=("ceil7", "calendar"))
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_prepare)

    f = sub.add_parser("fit", help="run the sampler for one model")
    f.add_argument("--model", type=int, required=True, choices=range(1, 13), metavar="{1..12}")
    f.add_argument("--lag", type=int)
    f.add_argument("--degree", type=int, choices=(1, 2, 3))
    f.add_argument("--weeks-mode", dest="weeks_mode", choices=("ceil7", "calendar"))
    f.add_argument("--panel", required=True)
    f.add_argument("--graph", required=True, help="neighbour list CSV id_a,id_b")
    f.add_argument("--config", help="JSON or YAML options keyed by model id, plus an optional 'sampler' entry")
    f.add_argument("--chains", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", dest="burn_in", type=int)
    f.add_argument("--thinning", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("compare", help="rank fits by DIC")
    c.add_argument("--fits", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="relative-risk surfaces and trajectories")
    r.add_argument("--fit", required=True)
    r.add_argument("--what", required=True, choices=("temporal", "spatial", "st"))
    r.add_argument("--days", help="comma list or ranges, e.g. 1,15,29 or 1-10 (default every 14th day)")
    r.add_argument("--loess-span", dest="loess_span", type=float, default=0.75)
    r.add_argument("--loess-degree", dest="loess_degree", type=int, default=2, choices=(1, 2))
    r.add_argument("--top", type=int, default=6, help="regions in the LOESS trajectory table")
    r.add_argument("--stat", default="mean", choices=("mean", "median"))
    r.add_argument("--format", default="csv", choices=("csv", "geojson"))
    r.add_argument("--polygons", help="GeoJSON polygons, required for --format geojson")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
