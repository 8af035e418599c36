"""Command-line front end: ``simulate``, ``estimate-cdf``, ``bounds``, ``render-trace``.

Every command reads an optional YAML config and writes a JSON manifest next
to its outputs. The manifest holds the fully resolved config, so rerunning
with it reproduces the outputs byte for byte.

Config layout (all sections optional)::

    seed: 0
    grid_order: 3            # or grid_points: [0, 0.1, ..., 1]
    out: out
    emit_plots: true
    data:
      csv: data.csv          # omit to simulate
      columns: [y, x, z]
      already_scaled: null
      simulate: {n_paths: 2500, n_obs: 5000, grid_order: 3, pairing: matched,
                 y_gp: {mean: 0.5, sigma2: 0.2, length: 0.5},
                 x_gp: {mean: 0.5, sigma2: 0.15, length: 0.2}}
    cdf:
      cache: null            # path of a CdfField JSON table
      bandwidth: null        # null = leave-one-out CV
      candidates: null       # null = rule-of-thumb grid
    solver: {lam: 5, l_add: 10, ...}   # any SolveConfig field
"""

from __future__ import annotations

import contextlib
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path as FsPath

import click
import numpy as np
import yaml

from . import __version__
from .assembly import default_threads
from .boundsloop import TRACE_COLUMNS, BoundsTrace, SolveConfig, run
from .condcdf import CdfField, cdf_field, cv_bandwidth, default_candidates
from .errors import ConfigError, DataError, NumericError, OutputError, PathBoundsError
from .simgen import GpSpec, X_GP, Y_GP, simulate
from .unitgrid import Grid, custom_grid, dyadic_grid, read_csv, write_csv

log = logging.getLogger("pathbounds")

DEFAULTS = {
    "seed": 0,
    "grid_order": 3,
    "grid_points": None,
    "out": "out",
    "emit_plots": True,
    "data": {
        "csv": None,
        "columns": ["y", "x", "z"],
        "already_scaled": None,
        "simulate": {
            "n_paths": 2500,
            "n_obs": 5000,
            "grid_order": 3,
            "pairing": "matched",
            "y_gp": Y_GP.to_dict(),
            "x_gp": X_GP.to_dict(),
        },
    },
    "cdf": {"cache": None, "bandwidth": None, "candidates": None},
    "solver": {},
}


# -- config ----------------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and k != "solver":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path, overrides: dict) -> dict:
    raw = {}
    base_dir = FsPath(".")
    if path is not None:
        path = FsPath(path)
        try:
            text = path.read_text()
            # YAML 1.1 reads 1e-10 as a string, so JSON files go through json
            raw = (json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)) or {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_dir = path.parent
        if "command" in raw and "config" in raw:
            # a manifest: its paths were already resolved when it was written
            raw = raw["config"]
            base_dir = FsPath(".")
    cfg = _merge(DEFAULTS, raw)
    for key, val in overrides.items():
        if val is None:
            continue
        if key == "lam":
            cfg["solver"] = dict(cfg["solver"], lam=val)
        elif key in ("n_paths", "n_obs"):
            cfg["data"]["simulate"][key] = val
        elif key == "sim_grid_order":
            cfg["data"]["simulate"]["grid_order"] = val
        elif key == "max_iterations":
            cfg["solver"] = dict(cfg["solver"], max_iterations=val)
        else:
            cfg[key] = val
    # paths in a config file are relative to that file
    for sect, key in (("data", "csv"), ("cdf", "cache")):
        p = cfg[sect][key]
        if p is not None and not FsPath(p).is_absolute():
            cfg[sect][key] = str(base_dir / p)
    if overrides.get("seed") is not None or "rng_seed" not in cfg["solver"]:
        cfg["solver"] = dict(cfg["solver"], rng_seed=int(cfg["seed"]))
    return cfg


def _grid(cfg) -> Grid:
    if cfg["grid_points"] is not None:
        return custom_grid(cfg["grid_points"])
    return dyadic_grid(cfg["grid_order"])


def _solver_config(cfg) -> SolveConfig:
    try:
        return SolveConfig.from_dict(cfg["solver"])
    except TypeError as exc:
        raise ConfigError(f"solver section: {exc}") from exc


# -- io helpers ------------------------------------------------------------------

@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside with the module that raised them."""
    try:
        yield
    except PathBoundsError as exc:
        if not str(exc).startswith("["):
            exc.args = (f"[{name}] {exc}",) + exc.args[1:]
        raise


def _out_dir(cfg) -> FsPath:
    out = FsPath(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OutputError(f"output directory {out} is not writable")
    return out


def _write(path: FsPath, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _sha256(path: FsPath) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(out: FsPath, command: str, cfg: dict, outputs: list, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    _write(out / f"{command}.manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dataset(cfg):
    d = cfg["data"]
    if d["csv"] is not None:
        with stage("unitgrid"):
            return read_csv(d["csv"], tuple(d["columns"]), d["already_scaled"])
    s = d["simulate"]
    with stage("simgen"):
        try:
            y_gp, x_gp = GpSpec.from_dict(s["y_gp"]), GpSpec.from_dict(s["x_gp"])
        except TypeError as exc:
            raise ConfigError(f"GP spec: {exc}") from exc
        if int(s["n_paths"]) < 1 or int(s["n_obs"]) < 1:
            raise ConfigError("n_paths and n_obs must be positive")
        return simulate(int(s["n_paths"]), int(s["n_obs"]), int(cfg["seed"]), dyadic_grid(s["grid_order"]),
                        y_gp, x_gp, s["pairing"])


def _estimate(cfg, data, grid):
    c = cfg["cdf"]
    with stage("condcdf"):
        h = c["bandwidth"]
        cands = c["candidates"] if c["candidates"] is not None else default_candidates(len(data))
        if h is None:
            h = cv_bandwidth(data, cands, grid)
        return cdf_field(data, grid, float(h), threads=default_threads()), [float(x) for x in cands]


def _load_or_estimate(cfg, grid):
    cache = cfg["cdf"]["cache"]
    if cache is not None and FsPath(cache).exists():
        with stage("condcdf"):
            try:
                field = CdfField.from_json(FsPath(cache).read_text())
            except OSError as exc:
                raise DataError(f"cannot read CDF cache {cache}: {exc}") from exc
            if not field.grid.same_as(grid):
                raise DataError(f"CDF cache {cache} was tabulated on a different grid")
        return field, True
    field, _ = _estimate(cfg, _dataset(cfg), grid)
    if cache is not None:
        _write(FsPath(cache), field.to_json())
    return field, False


# -- trace rendering -------------------------------------------------------------

def read_trace(path) -> BoundsTrace:
    """Load a trace from JSONL or CSV (chosen by extension)."""
    path = FsPath(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read trace {path}: {exc}") from exc
    if path.suffix.lower() == ".csv":
        trace = BoundsTrace()
        rows = list(csv.reader(text.splitlines()))
        if not rows:
            raise DataError(f"{path}: empty trace")
        if tuple(rows[0]) != TRACE_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(TRACE_COLUMNS)}")
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(TRACE_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
            try:
                rec = {k: (int(v) if k in ("iter", "pool_min", "pool_max") else float(v))
                       for k, v in zip(TRACE_COLUMNS, row)}
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            trace.records.append(rec)
    else:
        trace = BoundsTrace.from_jsonl(text)
        for lineno, rec in enumerate(trace.records, start=1):
            if not {"iter", "v_min", "v_max"} <= set(rec):
                raise DataError(f"{path}: trace line {lineno}: missing iter/v_min/v_max")
    if not trace.records:
        raise DataError(f"{path}: trace has no records")
    return trace


def _running_mean(v, window):
    c = np.concatenate(([0.0], np.cumsum(v)))
    k = np.arange(1, v.size + 1)
    lo = np.maximum(0, k - window)
    return (c[k] - c[lo]) / (k - lo)


def render_svg(trace: BoundsTrace, window: int | None = None) -> str:
    """Line chart of lower/upper values per iteration with trailing means.

    Fixed size and fixed number formatting, so equal traces render to equal bytes.
    """
    if not trace.records:
        raise DataError("trace has no records")
    window = window or trace.window
    w, h = 640, 400
    left, right, top, bottom = 60, 20, 20, 40
    it = trace.values("iter")
    lo, hi = trace.values("v_min"), trace.values("v_max")
    ymin = float(min(lo.min(), hi.min()))
    ymax = float(max(lo.max(), hi.max()))
    if ymax - ymin < 1e-9:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    x0, x1 = float(it.min()), float(it.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1

    def px(v):
        return left + (v - x0) / (x1 - x0) * (w - left - right)

    def py(v):
        return top + (ymax - v) / (ymax - ymin) * (h - top - bottom)

    def poly(xs, ys, color, dash=None):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{extra} points="{pts}"/>'

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{left}" y1="{h - bottom}" x2="{w - right}" y2="{h - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{h - bottom}" stroke="black"/>',
    ]
    for t in np.linspace(ymin + pad, ymax - pad, 5):
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.2f}" font-size="11" text-anchor="end">{t:.3f}</text>')
    out.append(f'<text x="{left}" y="{h - bottom + 16}" font-size="11" text-anchor="middle">{int(x0)}</text>')
    out.append(f'<text x="{w - right}" y="{h - bottom + 16}" font-size="11" text-anchor="middle">{int(x1)}</text>')
    out.append(f'<text x="{(left + w - right) / 2:.1f}" y="{h - 6}" font-size="12" '
               f'text-anchor="middle">iteration</text>')
    out.append(poly(it, hi, "black"))
    out.append(poly(it, lo, "gray"))
    out.append(poly(it, _running_mean(hi, window), "black", "6,4"))
    out.append(poly(it, _running_mean(lo, window), "gray", "6,4"))
    a, b = trace.trailing(window)
    out.append(f'<text x="{w - right}" y="{top + 12}" font-size="11" text-anchor="end">'
               f'trailing mean ({window}): [{a:.4f}, {b:.4f}]</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- commands --------------------------------------------------------------------

def _common(f):
    f = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="YAML config file.")(f)
    f = click.option("--seed", type=int, default=None, help="Seed for simulation and path sampling.")(f)
    f = click.option("--grid-order", type=int, default=None, help="Dyadic grid order.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def cli(verbose):
    """Bounds on counterfactual functionals in IV models from sampled response paths."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")


@cli.command("simulate")
@_common
@click.option("--n-paths", type=int, default=None, help="Number of GP path pairs.")
@click.option("--n-obs", type=int, default=None, help="Number of observations.")
def cmd_simulate(config_path, seed, grid_order, out, n_paths, n_obs):
    """Generate a synthetic dataset from Gaussian-process response paths."""
    cfg = load_config(config_path, {"seed": seed, "sim_grid_order": grid_order, "out": out,
                                    "n_paths": n_paths, "n_obs": n_obs})
    if cfg["data"]["csv"] is not None:
        raise ConfigError("simulate needs a simulation data source, but data.csv is set")
    outdir = _out_dir(cfg)
    data = _dataset(cfg)
    path = outdir / "data.csv"
    try:
        write_csv(data, path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    _manifest(outdir, "simulate", cfg, [path], {"rows": len(data)})
    click.echo(f"wrote {len(data)} rows to {path}")


@cli.command("estimate-cdf")
@_common
def cmd_estimate_cdf(config_path, seed, grid_order, out):
    """Estimate the smoothed conditional CDF on the grid and cache it as JSON."""
    cfg = load_config(config_path, {"seed": seed, "grid_order": grid_order, "out": out})
    outdir = _out_dir(cfg)
    with stage("unitgrid"):
        grid = _grid(cfg)
    field, cands = _estimate(cfg, _dataset(cfg), grid)
    path = outdir / "cdf.json"
    _write(path, field.to_json())
    _manifest(outdir, "estimate-cdf", cfg, [path], {"bandwidth": field.bandwidth, "candidates": cands})
    click.echo(f"bandwidth {field.bandwidth:.6g}; wrote {path}")


@cli.command("bounds")
@_common
@click.option("--lambda", "lam", type=float, default=None, help="Penalty weight on the CDF fit.")
@click.option("--max-iterations", type=int, default=None, help="Iteration cap for the loop.")
@click.option("--plots/--no-plots", default=None, help="Override emit_plots.")
def cmd_bounds(config_path, seed, grid_order, out, lam, max_iterations, plots):
    """Run the sampling loop and write the solution-path trace."""
    cfg = load_config(config_path, {"seed": seed, "grid_order": grid_order, "out": out, "lam": lam,
                                    "max_iterations": max_iterations, "emit_plots": plots})
    outdir = _out_dir(cfg)
    with stage("boundsloop"):
        solver = _solver_config(cfg)
    # the manifest records every solver field, so reruns do not depend on defaults
    cfg["solver"] = solver.to_dict()
    with stage("unitgrid"):
        grid = _grid(cfg)
    field, cached = _load_or_estimate(cfg, grid)
    failure = None
    with stage("boundsloop"):
        try:
            trace = run(solver, field, grid)
        except NumericError as exc:
            trace = getattr(exc, "trace", None) or BoundsTrace(window=solver.n_delta)
            failure = exc
    files = [outdir / "trace.csv", outdir / "trace.jsonl"]
    _write(files[0], trace.to_csv())
    _write(files[1], trace.to_jsonl())
    if cfg["emit_plots"] and trace.records:
        files.append(outdir / "trace.svg")
        _write(files[-1], render_svg(trace))
    a, b = trace.trailing()
    _manifest(outdir, "bounds", cfg, files, {
        "status": trace.status, "iterations": len(trace.records), "bandwidth": field.bandwidth,
        "cdf_from_cache": cached, "trailing_min": a, "trailing_max": b,
    })
    if failure is not None:
        raise failure
    click.echo(f"{trace.status} after {len(trace.records)} iterations; "
               f"trailing bounds [{a:.4f}, {b:.4f}]")
    if trace.status == "infeasible_filter":
        raise NumericError(f"[boundsloop] {trace.message}")


@cli.command("render-trace")
@click.argument("trace_path", type=click.Path(dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="SVG path (default: next to the trace).")
@click.option("--window", type=int, default=None, help="Trailing-mean window.")
def cmd_render_trace(trace_path, out_path, window):
    """Render a trace (JSONL or CSV) to a deterministic SVG chart."""
    trace = read_trace(trace_path)
    if window is not None and window < 1:
        raise ConfigError("window must be positive")
    svg = render_svg(trace, window)
    dest = FsPath(out_path) if out_path else FsPath(trace_path).with_suffix(".svg")
    _write(dest, svg)
    click.echo(f"wrote {dest}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="pathbounds", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except PathBoundsError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
