"""Command-line surface: extract, fit, diagnose, map, simulate.

Commands compose through files alone.  ``fit`` writes a JSON artifact that
``diagnose`` and ``map`` consume, every CSV output opens with a comment line
carrying the package version and a hash of the effective configuration, and
each command is reproducible from its full argument list plus seed.

Exit codes: 0 on success, 2 for input problems (bad files, bad arguments,
schema violations), 3 for numerical failures (a fit that will not converge,
singular matrices).
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import functools
import hashlib
import json
import math
import sys
import warnings
from pathlib import Path
from types import SimpleNamespace

import click
import numpy as np
from threadpoolctl import threadpool_limits

from gevfield import __version__
from gevfield.diagnostics import crossvalidate, quantile_plot, spatial_correlation_check
from gevfield.exceptions import FitError, IngestError, InputError, NumericalError
from gevfield.gev import GevParams, ReturnLevelSpec, gev_quantile
from gevfield.gp import LatentFieldDraws, krige_draws, krige_factor
from gevfield.ingest import MISSING_DAY_LIMIT, load_dataset, write_dataset
from gevfield.mcem import FitConfig, FitResult, fit_joint_model
from gevfield.model import DataLayerParams, JointDataset, ProcessLayerParams
from gevfield.spatial import (
    KM_PER_DEG_LAT,
    KM_PER_DEG_LON,
    CovarianceSpec,
    Location,
    SourceTag,
    build_locations,
    project_lonlat,
    unproject_lonlat,
)
from gevfield.synthetic import simulate_misspecified, simulate_world

INPUT_ERROR = 2
NUMERICAL_FAILURE = 3

# configuration file layout: section -> key -> parser kind.  Every key can be
# overridden by a command-line flag of the same name; flags win.
_LAYOUT = {
    "data": {"field": "str", "simulator": "str", "missing_day_limit": "int"},
    "model": {"tau": "float", "fix_tau": "bool", "clamp_gp": "bool"},
    "sampler": {"burn_in": "int", "reburn_in": "int", "thin": "int", "final_draws": "int"},
    "optimizer": {
        "iterations": "int",
        "n_start_factor": "int",
        "n_growth": "float",
        "restart_budget": "int",
        "stop_tol": "float",
        "stop_window": "int",
        "seed": "int",
    },
}


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _handle_errors(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (InputError, IngestError) as exc:
            _fail(str(exc), INPUT_ERROR)
        except (FitError, NumericalError) as exc:
            _fail(str(exc), NUMERICAL_FAILURE)

    return wrapper


# ---------------------------------------------------------------------------
# configuration files


def _fit_defaults() -> dict:
    cfg = FitConfig()
    return {
        "data": {"field": None, "simulator": None, "missing_day_limit": MISSING_DAY_LIMIT},
        "model": {"tau": cfg.tau, "fix_tau": cfg.fix_tau, "clamp_gp": cfg.clamp_gp},
        "sampler": {
            "burn_in": cfg.burn_in,
            "reburn_in": cfg.reburn_in,
            "thin": cfg.thin,
            "final_draws": cfg.final_draws,
        },
        "optimizer": {
            "iterations": cfg.n_iterations,
            "n_start_factor": cfg.n_start_factor,
            "n_growth": cfg.n_growth,
            "restart_budget": cfg.restart_budget,
            "stop_tol": cfg.stop_tol,
            "stop_window": cfg.stop_window,
            "seed": 0,
        },
    }


def _parse_scalar(raw: str, kind: str, where: str):
    text = raw.strip()
    if text == "" or text.lower() == "none":
        return None
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise InputError(f"config {where}: cannot parse {raw!r} as {kind}") from None


def read_config(path) -> dict:
    """Parse a sectioned key-value config file against the known layout."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise InputError(f"config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise InputError(f"config {path}: {exc}") from exc
    out: dict = {}
    for section in parser.sections():
        if section not in _LAYOUT:
            raise InputError(f"config {path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _LAYOUT[section]:
                raise InputError(f"config {path}: unknown key {key!r} in [{section}]")
            out.setdefault(section, {})[key] = _parse_scalar(
                raw, _LAYOUT[section][key], f"[{section}] {key}"
            )
    return out


def effective_fit_config(config_path, overrides: dict) -> dict:
    """Defaults, then config-file values, then non-None flag overrides."""
    merged = _fit_defaults()
    if config_path is not None:
        for section, values in read_config(config_path).items():
            merged[section].update(values)
    for (section, key), value in overrides.items():
        if value is not None:
            merged[section][key] = value
    return merged


def config_hash(snapshot: dict) -> str:
    blob = json.dumps(snapshot, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _fit_config_from(snapshot: dict, iterations: int | None = None) -> FitConfig:
    model, sampler, opt = snapshot["model"], snapshot["sampler"], snapshot["optimizer"]
    return FitConfig(
        n_iterations=iterations if iterations is not None else opt["iterations"],
        n_start_factor=opt["n_start_factor"],
        n_growth=opt["n_growth"],
        burn_in=sampler["burn_in"],
        reburn_in=sampler["reburn_in"],
        thin=sampler["thin"],
        tau=model["tau"],
        fix_tau=model["fix_tau"],
        clamp_gp=model["clamp_gp"],
        stop_tol=opt["stop_tol"],
        stop_window=opt["stop_window"],
        restart_budget=opt["restart_budget"],
        final_draws=sampler["final_draws"],
    )


# ---------------------------------------------------------------------------
# output helpers


def _stamp(snapshot_hash: str) -> str:
    return f"gevfield {__version__} config={snapshot_hash}"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header, rows, snapshot_hash: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_stamp(snapshot_hash)}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_trace_csv(path, trace, snapshot_hash: str):
    base = ["iteration", "n_draws", "mc_objective_start", "mc_objective"]
    header = list(trace[0].keys()) if trace else base
    _write_csv(path, header, [[row[k] for k in header] for row in trace], snapshot_hash)


def _write_params_csv(path, result: FitResult, fix_tau: bool, snapshot_hash: str):
    names1 = result.theta1.names()
    vals1 = result.theta1.as_vector()
    se1 = list(result.info.theta1_se()) if result.info is not None else [None] * len(names1)
    rows = [(n, float(v), s) for n, v, s in zip(names1, vals1, se1)]

    names2 = result.theta2.names()
    vals2 = result.theta2.as_vector()
    fisher = result.info.fisher_cov_theta2 if result.info is not None else None
    if fisher is not None:
        # a boundary optimum (e.g. delta at 2) can leave a non-positive
        # curvature entry; report no SE there rather than a NaN
        se2 = [math.sqrt(d) if d > 0.0 and math.isfinite(d) else None for d in np.diag(fisher)]
    else:
        se2 = [None] * (len(names2) - 1)
    for n, v, s in zip(names2[:-1], vals2[:-1], se2):
        rows.append((n, float(v), s))
    # tau comes last in the table; when fixed it carries a marker, not an SE
    rows.append((names2[-1], float(vals2[-1]), "fixed" if fix_tau else None))
    _write_csv(path, ["parameter", "estimate", "se"], rows, snapshot_hash)


# ---------------------------------------------------------------------------
# fit artifact (JSON) save/load


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _fit_artifact(result: FitResult, data: JointDataset, snapshot: dict, snapshot_hash: str) -> dict:
    info = result.info
    return {
        "format": "gevfield-fit",
        "version": __version__,
        "config": snapshot,
        "config_hash": snapshot_hash,
        "origin": [data.origin[0], data.origin[1]],
        "sources": [s.value for s in result.theta1.sources],
        "sites": [
            {
                "site_id": r.site_id,
                "lon": r.location.lon,
                "lat": r.location.lat,
                "elevation_m": r.location.elevation,
                "source": r.location.source_tag.value,
            }
            for r in data.records
        ],
        "theta1": [float(v) for v in result.theta1.as_vector()],
        "theta2": {
            "beta": [float(b) for b in result.theta2.beta],
            "sigma2": result.theta2.cov.sigma2,
            "tau": result.theta2.cov.tau,
            "phi": result.theta2.cov.phi,
            "delta": result.theta2.cov.delta,
        },
        "sandwich_cov": info.sandwich_cov.tolist() if info is not None else None,
        "fisher_cov_theta2": (
            info.fisher_cov_theta2.tolist()
            if info is not None and info.fisher_cov_theta2 is not None
            else None
        ),
        "final_draws": result.final_draws.draws.tolist(),
        "trace": [{k: _jsonable(v) for k, v in row.items()} for row in result.trace],
    }


def load_fit_artifact(path) -> SimpleNamespace:
    """Reconstruct parameters, sites and final draws from a fit JSON file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"fit artifact {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"fit artifact {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or raw.get("format") != "gevfield-fit":
        raise InputError(f"fit artifact {path}: not a fit file (missing format marker)")
    try:
        sources = tuple(SourceTag(s) for s in raw["sources"])
        origin = (float(raw["origin"][0]), float(raw["origin"][1]))
        site_ids, sites = [], []
        for row in raw["sites"]:
            east, north = project_lonlat(row["lon"], row["lat"], origin)
            sites.append(
                Location(
                    east, north, float(row["lon"]), float(row["lat"]),
                    float(row["elevation_m"]), SourceTag(row["source"]),
                )
            )
            site_ids.append(row["site_id"])
        theta1 = DataLayerParams.from_vector(np.asarray(raw["theta1"], dtype=float), sources)
        t2 = raw["theta2"]
        theta2 = ProcessLayerParams(
            sources,
            np.asarray(t2["beta"], dtype=float),
            CovarianceSpec(float(t2["sigma2"]), float(t2["tau"]), float(t2["phi"]), float(t2["delta"])),
        )
        draws = LatentFieldDraws(np.asarray(raw["final_draws"], dtype=float), sites)
        sandwich = raw.get("sandwich_cov")
        fisher = raw.get("fisher_cov_theta2")
        config = raw.get("config") or {}
        stored_hash = raw.get("config_hash", "")
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"fit artifact {path}: malformed ({exc!r})") from exc
    return SimpleNamespace(
        config=config,
        config_hash=stored_hash,
        origin=origin,
        sources=sources,
        site_ids=site_ids,
        sites=sites,
        theta1=theta1,
        theta2=theta2,
        draws=draws,
        sandwich_cov=None if sandwich is None else np.asarray(sandwich, dtype=float),
        fisher_cov_theta2=None if fisher is None else np.asarray(fisher, dtype=float),
    )


def _check_alignment(art, data: JointDataset):
    """The diagnostics must run against the same sites the fit saw."""
    fit_ids, data_ids = set(art.site_ids), set(data.site_ids)
    extra = sorted(data_ids - fit_ids)
    missing = sorted(fit_ids - data_ids)
    if extra or missing:
        parts = []
        if extra:
            parts.append(f"not in fit: {', '.join(extra)}")
        if missing:
            parts.append(f"missing from data: {', '.join(missing)}")
        raise InputError(f"data file does not match the fit artifact ({'; '.join(parts)})")
    for j, sid in enumerate(art.site_ids):
        rec = data.records[data.index_of(sid)].location
        ref = art.sites[j]
        same = (
            math.isclose(rec.lon, ref.lon, rel_tol=1e-9, abs_tol=1e-9)
            and math.isclose(rec.lat, ref.lat, rel_tol=1e-9, abs_tol=1e-9)
            and math.isclose(rec.elevation, ref.elevation, rel_tol=1e-9, abs_tol=1e-6)
            and rec.source_tag == ref.source_tag
        )
        if not same:
            raise InputError(
                f"site {sid}: metadata differs between the data file and the fit artifact"
            )


# ---------------------------------------------------------------------------
# command group


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="gevfield")
@click.option("--threads", type=int, default=None, help="Cap numerical worker threads (BLAS pools).")
@click.pass_context
def main(ctx, threads):
    """Spatial extreme-value modelling of annual maxima on a latent Gaussian field."""
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be a positive integer")
        # keep the controller alive for the duration of the command
        ctx.obj = threadpool_limits(limits=threads)


# ---------------------------------------------------------------------------
# extract


@main.command("extract")
@click.option("--field", "field_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Daily-series or annual-maxima CSV for the field source.")
@click.option("--simulator", "simulator_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Optional second CSV for the simulator source.")
@click.option("--missing-day-limit", type=int, default=MISSING_DAY_LIMIT, show_default=True,
              help="Drop a site-year once it has this many missing days.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Output annual-maxima CSV.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Ingestion report path (default: <out>.report.txt).")
@_handle_errors
def cmd_extract(field_path, simulator_path, missing_day_limit, out_path, report_path):
    """Extract annual maxima from raw CSVs, applying the missing-day rule."""
    snapshot = {
        "command": "extract",
        "field": field_path,
        "simulator": simulator_path,
        "missing_day_limit": missing_day_limit,
    }
    h = config_hash(snapshot)
    data, report = load_dataset(field_path, simulator_path, missing_day_limit)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(data, out_path, comment=_stamp(h))
    report_file = Path(report_path) if report_path else Path(f"{out_path}.report.txt")
    report_file.parent.mkdir(parents=True, exist_ok=True)
    report_file.write_text(
        "\n".join([f"# {_stamp(h)}"] + report.summary_lines()) + "\n", encoding="utf-8"
    )
    for line in report.summary_lines():
        click.echo(line)
    click.echo(f"wrote {out_path} ({data.n_sites} sites)")


# ---------------------------------------------------------------------------
# fit


@main.command("fit")
@click.option("--field", "field_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Annual-maxima or daily CSV (overrides config [data] field).")
@click.option("--simulator", "simulator_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Second-source CSV (overrides config [data] simulator).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Sectioned key-value config file; flags override its values.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory for params.csv, trace.csv and fit.json.")
@click.option("--seed", type=int, default=None, help="Random seed (default 0).")
@click.option("--iterations", type=int, default=None, help="EM iteration budget.")
@click.option("--missing-day-limit", type=int, default=None)
@click.option("--tau", type=float, default=None, help="Fixed nugget scale (mm).")
@click.option("--fix-tau/--free-tau", "fix_tau", default=None,
              help="Hold the nugget fixed (default) or estimate it.")
@click.option("--clamp-gp/--no-clamp-gp", "clamp_gp", default=None,
              help="Degenerate latent field (debugging aid).")
@click.option("--burn-in", type=int, default=None)
@click.option("--reburn-in", type=int, default=None)
@click.option("--thin", type=int, default=None)
@click.option("--final-draws", type=int, default=None)
@click.option("--n-start-factor", type=int, default=None)
@click.option("--n-growth", type=float, default=None)
@click.option("--restart-budget", type=int, default=None)
@click.option("--stop-tol", type=float, default=None)
@click.option("--stop-window", type=int, default=None)
@_handle_errors
def cmd_fit(field_path, simulator_path, config_path, out_dir, seed, iterations,
            missing_day_limit, tau, fix_tau, clamp_gp, burn_in, reburn_in, thin,
            final_draws, n_start_factor, n_growth, restart_budget, stop_tol, stop_window):
    """Fit the joint hierarchical model by Monte Carlo EM."""
    overrides = {
        ("data", "field"): field_path,
        ("data", "simulator"): simulator_path,
        ("data", "missing_day_limit"): missing_day_limit,
        ("model", "tau"): tau,
        ("model", "fix_tau"): fix_tau,
        ("model", "clamp_gp"): clamp_gp,
        ("sampler", "burn_in"): burn_in,
        ("sampler", "reburn_in"): reburn_in,
        ("sampler", "thin"): thin,
        ("sampler", "final_draws"): final_draws,
        ("optimizer", "iterations"): iterations,
        ("optimizer", "n_start_factor"): n_start_factor,
        ("optimizer", "n_growth"): n_growth,
        ("optimizer", "restart_budget"): restart_budget,
        ("optimizer", "stop_tol"): stop_tol,
        ("optimizer", "stop_window"): stop_window,
        ("optimizer", "seed"): seed,
    }
    snapshot = effective_fit_config(config_path, overrides)
    if snapshot["data"]["field"] is None:
        raise InputError("no field data path: pass --field or set field under [data] in the config")
    h = config_hash(snapshot)
    cfg = _fit_config_from(snapshot)

    data, report = load_dataset(
        snapshot["data"]["field"], snapshot["data"]["simulator"],
        snapshot["data"]["missing_day_limit"],
    )
    for line in report.summary_lines():
        click.echo(line)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(snapshot["optimizer"]["seed"])
    try:
        result = fit_joint_model(data, cfg, rng)
    except FitError as exc:
        _write_trace_csv(out / "trace.csv", list(exc.trace or ()), h)
        _fail(f"{exc} (partial trace written to {out / 'trace.csv'})", NUMERICAL_FAILURE)

    _write_trace_csv(out / "trace.csv", list(result.trace), h)
    _write_params_csv(out / "params.csv", result, snapshot["model"]["fix_tau"], h)
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(_fit_artifact(result, data, snapshot, h), fh)
    click.echo(
        f"fit complete: {data.n_sites} sites, {len(result.trace)} iteration(s); "
        f"artifacts in {out}"
    )


# ---------------------------------------------------------------------------
# diagnose


@main.command("diagnose")
@click.option("--fit", "fit_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--field", "field_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--simulator", "simulator_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--kind", required=True, type=click.Choice(["qq", "spatial", "crossval"]))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--k", "k_values", type=float, multiple=True,
              help="Noise-scaling k for the spatial check (repeatable; default 0 and 1).")
@click.option("--n-bins", type=int, default=10, show_default=True)
@click.option("--holdout", type=str, default=None,
              help="Comma-separated site ids to refit without (crossval).")
@click.option("--site", "site_filter", type=str, multiple=True,
              help="Restrict qq output to these site ids.")
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--n-samples", "n_g", type=int, default=1000, show_default=True,
              help="Synthetic replicates behind the quantile bounds.")
@click.option("--parameter-uncertainty", is_flag=True, default=False,
              help="Propagate data-layer parameter uncertainty into qq bounds.")
@click.option("--iterations", type=int, default=None, help="Override refit iterations (crossval).")
@click.option("--seed", type=int, default=0, show_default=True)
@_handle_errors
def cmd_diagnose(fit_path, field_path, simulator_path, kind, out_path, k_values, n_bins,
                 holdout, site_filter, alpha, n_g, parameter_uncertainty, iterations, seed):
    """Model-fit diagnostics: quantile plots, spatial correlation, crossvalidation."""
    art = load_fit_artifact(fit_path)
    limit = art.config.get("data", {}).get("missing_day_limit", MISSING_DAY_LIMIT)
    data, _ = load_dataset(field_path, simulator_path, limit)
    snapshot = {
        "command": "diagnose",
        "kind": kind,
        "fit_config_hash": art.config_hash,
        "field": field_path,
        "simulator": simulator_path,
        "k": sorted(k_values),
        "n_bins": n_bins,
        "holdout": holdout,
        "site": sorted(site_filter),
        "alpha": alpha,
        "n_samples": n_g,
        "parameter_uncertainty": parameter_uncertainty,
        "iterations": iterations,
        "seed": seed,
    }
    h = config_hash(snapshot)
    rng = np.random.default_rng(seed)

    if kind == "qq":
        _check_alignment(art, data)
        targets = list(site_filter) if site_filter else art.site_ids
        unknown = sorted(set(targets) - set(art.site_ids))
        if unknown:
            raise InputError(f"unknown site ids: {', '.join(unknown)}")
        info = None
        if parameter_uncertainty:
            if art.sandwich_cov is None:
                raise InputError("fit artifact lacks the sandwich covariance")
            info = SimpleNamespace(sandwich_cov=art.sandwich_cov)
        rows = []
        for sid in targets:
            j = art.site_ids.index(sid)
            rec = data.records[data.index_of(sid)]
            plot = quantile_plot(
                art.sites[j], rec.values_array, art.draws, art.theta1, site_id=sid,
                n_g=n_g, alpha=alpha, rng=rng, parameter_info=info,
            )
            rows += [
                (sid, r, obs, exp, lo, hi)
                for r, (obs, exp, lo, hi) in enumerate(
                    zip(plot.observed, plot.expected, plot.lower, plot.upper), start=1
                )
            ]
        _write_csv(out_path, ["site_id", "rank", "observed", "expected", "lower", "upper"], rows, h)

    elif kind == "spatial":
        _check_alignment(art, data)
        ks = tuple(k_values) if k_values else (0.0, 1.0)
        shell = SimpleNamespace(theta1=art.theta1, theta2=art.theta2)
        rows = []
        for k in ks:
            diag = spatial_correlation_check(data, shell, k=k, n_bins=n_bins)
            rows += [
                (k, b, model, emp, count)
                for b, (model, emp, count) in enumerate(diag.bins, start=1)
            ]
            if diag.excluded_pairs:
                click.echo(
                    f"k={k:g}: excluded {diag.excluded_pairs} pair(s) with too few common years",
                    err=True,
                )
        _write_csv(out_path, ["k", "bin", "model_corr", "empirical_corr", "n_pairs"], rows, h)

    else:  # crossval
        ids = [s.strip() for s in (holdout or "").split(",") if s.strip()]
        if not ids:
            raise InputError("crossval requires --holdout with at least one site id")
        cfg = _fit_config_from(art.config, iterations) if art.config else FitConfig(
            n_iterations=iterations or 100
        )
        plots = crossvalidate(data, ids, cfg, rng=rng, n_g=n_g, alpha=alpha)
        rows = []
        for sid in ids:
            plot = plots[sid]
            rows += [
                (sid, r, obs, exp, lo, hi)
                for r, (obs, exp, lo, hi) in enumerate(
                    zip(plot.observed, plot.expected, plot.lower, plot.upper), start=1
                )
            ]
        _write_csv(out_path, ["site_id", "rank", "observed", "expected", "lower", "upper"], rows, h)

    click.echo(f"wrote {out_path}")


# ---------------------------------------------------------------------------
# map


def _parse_bbox(text: str) -> tuple[float, float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise InputError(f"--bbox needs lon1,lat1,lon2,lat2, got {text!r}")
    try:
        lon1, lat1, lon2, lat2 = (float(p) for p in parts)
    except ValueError:
        raise InputError(f"--bbox needs four numbers, got {text!r}") from None
    if not (lon1 < lon2 and lat1 < lat2):
        raise InputError("--bbox must satisfy lon1 < lon2 and lat1 < lat2")
    return lon1, lat1, lon2, lat2


def _grid_cells(bbox, cell_km: float, origin):
    """Cell centres on a km grid covering the bbox, row-major from the south-west."""
    lon1, lat1, lon2, lat2 = bbox
    e1, n1 = project_lonlat(lon1, lat1, origin)
    e2, n2 = project_lonlat(lon2, lat2, origin)
    nx = max(1, int(math.ceil((e2 - e1) / cell_km)))
    ny = max(1, int(math.ceil((n2 - n1) / cell_km)))
    cells = []
    for iy in range(ny):
        north = n1 + (iy + 0.5) * cell_km
        for ix in range(nx):
            east = e1 + (ix + 0.5) * cell_km
            lon, lat = unproject_lonlat(east, north, origin)
            cells.append((lon, lat, east, north))
    return cells


def _read_elevation_raster(path):
    lons, lats, elevs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        line_no = 0
        header = None
        for rec in csv.reader(fh):
            line_no += 1
            if not rec or (rec[0].lstrip().startswith("#")):
                continue
            if header is None:
                header = [c.strip().lower() for c in rec]
                if header != ["lon", "lat", "elevation_m"]:
                    raise IngestError(
                        "elevation raster header must be lon,lat,elevation_m",
                        path=path, line=line_no,
                    )
                continue
            if len(rec) != 3:
                raise IngestError(f"expected 3 columns, got {len(rec)}", path=path, line=line_no)
            try:
                lons.append(float(rec[0]))
                lats.append(float(rec[1]))
                elevs.append(float(rec[2]))
            except ValueError:
                raise IngestError(f"cannot parse row {rec!r}", path=path, line=line_no) from None
    if not lons:
        raise IngestError("elevation raster has no data rows", path=path)
    return np.array(lons), np.array(lats), np.array(elevs)


def _cell_elevations(cells, raster_path, origin, cell_km: float) -> np.ndarray:
    """Nearest-raster-point elevation per cell; a cell with no raster point
    within one cell size has no covariate and is rejected."""
    lons, lats, elevs = _read_elevation_raster(raster_path)
    pe, pn = project_lonlat(lons, lats, origin)
    pe, pn = np.atleast_1d(pe), np.atleast_1d(pn)
    ce = np.array([c[2] for c in cells])
    cn = np.array([c[3] for c in cells])
    d2 = (ce[:, None] - pe[None, :]) ** 2 + (cn[:, None] - pn[None, :]) ** 2
    nearest = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(len(cells)), nearest])
    bad = dist > cell_km
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        raise InputError(
            f"{int(bad.sum())} grid cell(s) have no elevation value within {cell_km:g} km "
            f"(first at lon={cells[first][0]:.4f}, lat={cells[first][1]:.4f})"
        )
    return elevs[nearest]


@main.command("map")
@click.option("--fit", "fit_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bbox", required=True, type=str, help="lon1,lat1,lon2,lat2 map window.")
@click.option("--cell-km", required=True, type=float, help="Grid cell size in km.")
@click.option("--elevation", "elevation_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Elevation raster CSV with header lon,lat,elevation_m.")
@click.option("--p-years", type=float, default=100.0, show_default=True,
              help="Return period in years (100 maps the 0.99 quantile).")
@click.option("--n-uncertainty-draws", type=int, default=500, show_default=True,
              help="Joint parameter/field samples per cell behind the interval.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def cmd_map(fit_path, bbox, cell_km, elevation_path, p_years, n_uncertainty_draws, seed, out_path):
    """Kriged return-level map with uncertainty intervals on a km grid."""
    art = load_fit_artifact(fit_path)
    if art.sandwich_cov is None:
        raise InputError("fit artifact lacks the sandwich covariance needed for map uncertainty")
    if SourceTag.FIELD not in art.sources:
        raise InputError("fit has no field source; nothing to map at point level")
    if cell_km <= 0.0:
        raise InputError(f"--cell-km must be positive, got {cell_km}")
    if n_uncertainty_draws < 1:
        raise InputError(f"--n-uncertainty-draws must be >= 1, got {n_uncertainty_draws}")
    level = ReturnLevelSpec(p_years)
    box = _parse_bbox(bbox)
    snapshot = {
        "command": "map",
        "fit_config_hash": art.config_hash,
        "bbox": list(box),
        "cell_km": cell_km,
        "elevation": elevation_path,
        "p_years": p_years,
        "n_uncertainty_draws": n_uncertainty_draws,
        "seed": seed,
    }
    h = config_hash(snapshot)

    cells = _grid_cells(box, cell_km, art.origin)
    elev = _cell_elevations(cells, elevation_path, art.origin, cell_km)

    site_elev = np.array([s.elevation for s in art.sites])
    lo_e, hi_e = float(site_elev.min()), float(site_elev.max())
    outside = int(np.sum((elev < lo_e) | (elev > hi_e)))
    if outside:
        message = (
            f"{outside} grid cell(s) outside the observed elevation range "
            f"[{lo_e:.0f}, {hi_e:.0f}] m; return levels there extrapolate the trend"
        )
        warnings.warn(message)
        click.echo(f"warning: {message}", err=True)

    targets = [
        Location(east, north, lon, lat, float(el), SourceTag.FIELD)
        for (lon, lat, east, north), el in zip(cells, elev)
    ]
    spec = art.theta2.cov
    rng = np.random.default_rng(seed)
    n_draws = art.draws.draws.shape[0]
    u = n_uncertainty_draws

    if spec.sigma2 > 0.0:
        factor = krige_factor(spec, art.sites)
        cond_means, cond_vars = krige_draws(
            art.theta2.mean_structure(), spec, art.draws.draws, art.sites, targets, factor
        )
    else:  # degenerate latent field: the mean surface is exact
        prior = art.theta2.mean_at(targets)
        cond_means = np.tile(prior, (n_draws, 1))
        cond_vars = np.zeros(len(targets))

    theta_samples = rng.multivariate_normal(art.theta1.as_vector(), art.sandwich_cov, size=u)
    kf = art.sources.index(SourceTag.FIELD)
    n_src = len(art.sources)
    psi0 = theta_samples[:, 2 * kf]
    psi1 = theta_samples[:, 2 * kf + 1]
    xi = theta_samples[:, 2 * n_src + kf]

    # return level = mu* + psi(s) * q where q is the unit-scale GEV quantile,
    # so the per-sample quantile factor is shared by every cell
    unit_q = np.array([gev_quantile(GevParams(0.0, 1.0, x), level.prob) for x in xi])
    idx = np.arange(u) % n_draws
    z = rng.standard_normal((u, len(targets)))
    mu_star = cond_means[idx, :] + np.sqrt(cond_vars)[None, :] * z
    psi_cells = np.exp(psi0[:, None] + psi1[:, None] * elev[None, :])
    levels = mu_star + psi_cells * unit_q[:, None]

    ci_lower, median, ci_upper = np.percentile(levels, [2.5, 50.0, 97.5], axis=0)
    if u == 1:
        message = "single uncertainty draw: confidence interval degenerate (width 0)"
        warnings.warn(message)
        click.echo(f"warning: {message}", err=True)

    rows = [
        (c[0], c[1], m, lo, hi, hi - lo)
        for c, m, lo, hi in zip(cells, median, ci_lower, ci_upper)
    ]
    _write_csv(out_path, ["lon", "lat", "return_level", "ci_lower", "ci_upper", "ci_width"], rows, h)
    click.echo(f"wrote {out_path} ({len(rows)} cells, {p_years:g}-year level)")


# ---------------------------------------------------------------------------
# simulate


_SITES_HEADER = ("source", "site_id", "lon", "lat", "elevation_m")


def _read_sites_csv(path):
    """Site list for simulation: source,site_id,lon,lat,elevation_m."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        line_no = 0
        header = None
        for rec in csv.reader(fh):
            line_no += 1
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = tuple(c.strip().lower() for c in rec)
                if header != _SITES_HEADER:
                    raise IngestError(
                        f"sites header must be {','.join(_SITES_HEADER)}",
                        path=path, line=line_no,
                    )
                continue
            if len(rec) != 5:
                raise IngestError(f"expected 5 columns, got {len(rec)}", path=path, line=line_no)
            try:
                tag = SourceTag(rec[0].strip().lower())
            except ValueError:
                raise IngestError(f"unknown source {rec[0]!r}", path=path, line=line_no) from None
            sid = rec[1].strip()
            if not sid:
                raise IngestError("empty site_id", path=path, line=line_no)
            try:
                lon, lat, el = float(rec[2]), float(rec[3]), float(rec[4])
            except ValueError:
                raise IngestError(f"cannot parse row {rec!r}", path=path, line=line_no) from None
            rows.append((tag, sid, lon, lat, el))
    if not rows:
        raise IngestError("sites file has no data rows", path=path)
    ids = [r[1] for r in rows]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise IngestError(f"duplicate site_ids: {', '.join(dupes)}", path=path)
    origin = (
        float(np.mean([r[2] for r in rows])),
        float(np.mean([r[3] for r in rows])),
    )
    sites = build_locations(
        [r[2] for r in rows], [r[3] for r in rows], [r[4] for r in rows],
        [r[0] for r in rows], origin,
    )
    return ids, sites, origin


def _read_theta_json(path, sources: tuple[SourceTag, ...]):
    """Simulation parameters keyed by source name; see the README for the schema."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"theta file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"theta file {path}: invalid JSON ({exc})") from exc
    try:
        t1, t2 = raw["theta1"], raw["theta2"]
    except (KeyError, TypeError):
        raise InputError(f"theta file {path}: needs top-level theta1 and theta2 objects") from None

    names = [s.value for s in sources]
    missing = [n for n in names if n not in t1]
    if missing:
        raise InputError(f"theta file {path}: theta1 lacks source(s) {', '.join(missing)}")
    extra = sorted(set(t1) - set(names))
    if extra:
        raise InputError(
            f"theta file {path}: theta1 lists source(s) {', '.join(extra)} absent from the sites file"
        )
    try:
        psi0 = tuple(float(t1[n]["psi0"]) for n in names)
        psi1 = tuple(float(t1[n]["psi1"]) for n in names)
        xi = tuple(float(t1[n]["xi"]) for n in names)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"theta file {path}: theta1 entries need psi0, psi1, xi ({exc!r})") from None
    theta1 = DataLayerParams(sources, psi0, psi1, xi)

    try:
        beta_by_source = t2["beta"]
        beta = []
        for n in names:
            block = [float(b) for b in beta_by_source[n]]
            if len(block) != 4:
                raise InputError(
                    f"theta file {path}: beta[{n}] needs 4 coefficients, got {len(block)}"
                )
            beta += block
        cov = CovarianceSpec(
            float(t2["sigma2"]), float(t2.get("tau", 0.0)), float(t2["phi"]), float(t2["delta"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"theta file {path}: malformed theta2 ({exc!r})") from None
    theta2 = ProcessLayerParams(sources, np.array(beta), cov)
    return theta1, theta2


def _rename_sites(world: JointDataset, ids: list[str]) -> JointDataset:
    records = tuple(
        dataclasses.replace(r, site_id=sid) for r, sid in zip(world.records, ids)
    )
    return JointDataset(records, world.origin)


@main.command("simulate")
@click.option("--theta", "theta_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON with theta1/theta2 simulation parameters.")
@click.option("--sites", "sites_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Site CSV with header source,site_id,lon,lat,elevation_m.")
@click.option("--years", type=int, required=True, help="Number of annual maxima per site.")
@click.option("--start-year", type=int, default=1950, show_default=True)
@click.option("--misspecify-range", type=float, default=None,
              help="Couple within-year residuals over this range (km) to violate "
                   "conditional independence.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def cmd_simulate(theta_path, sites_path, years, start_year, misspecify_range, seed, out_path):
    """Draw an annual-maxima dataset from known parameters."""
    snapshot = {
        "command": "simulate",
        "theta": theta_path,
        "sites": sites_path,
        "years": years,
        "start_year": start_year,
        "misspecify_range": misspecify_range,
        "seed": seed,
    }
    h = config_hash(snapshot)
    ids, sites, origin = _read_sites_csv(sites_path)
    present = tuple(
        t for t in (SourceTag.FIELD, SourceTag.SIMULATOR)
        if any(s.source_tag is t for s in sites)
    )
    theta1, theta2 = _read_theta_json(theta_path, present)
    rng = np.random.default_rng(seed)
    if misspecify_range is None:
        world = simulate_world(theta1, theta2, sites, years, rng, start_year, origin)
    else:
        world = simulate_misspecified(
            theta1, theta2, sites, years, misspecify_range, rng, start_year, origin
        )
    world = _rename_sites(world, ids)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(world, out_path, comment=_stamp(h))
    click.echo(f"wrote {out_path} ({world.n_sites} sites x {years} years)")


if __name__ == "__main__":
    main()
