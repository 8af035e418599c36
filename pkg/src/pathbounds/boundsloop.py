"""Iterative sample / append / solve / discard loop for lower and upper bounds.

Both senses start from one shared initial pool. Each iteration samples new
unique pairs, appends them to both pools, solves both programs (warm-started
from the previous weights), records the functional values and drops columns
whose weight fell below the discard threshold. The loop stops once the
moving standard deviation of both value sequences over the last
``n_delta`` iterations is at most ``delta``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path as FsPath

import numpy as np

from .assembly import (FunctionalSpec, ThetaMatrix, XiVector, append_columns, build_theta, build_xi,
                       cross_product_pairs, drop_zero_columns)
from .condcdf import CdfField
from .errors import ConfigError, DataError, FilterInfeasibleError, NumericError
from .pathkit import MONOTONE_INCREMENTS, BasisSpec, PathPair, PathSampler, monotone_filter
from .qpsolve import LOWER, UPPER, QpProblem, solve
from .unitgrid import Grid

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"
INFEASIBLE_FILTER = "infeasible_filter"

TRACE_COLUMNS = ("iter", "v_min", "v_max", "pool_min", "pool_max", "resid_min", "resid_max")


@dataclass
class SolveConfig:
    lam: float = 5.0
    l_init: int = 10
    l_add: int = 10
    n_delta: int = 200
    delta: float = 5e-3
    max_iterations: int = 3000
    discard_threshold: float = 1e-8
    functional: FunctionalSpec = field(default_factory=FunctionalSpec)
    basis: BasisSpec = field(default_factory=BasisSpec)
    x_basis: BasisSpec | None = None
    # shape restriction for the filtered share of each batch; None = unrestricted
    y_direction: int | None = None
    x_direction: int | None = None
    filter_mix: float = 0.0
    rng_seed: int = 0
    rho: float = 250.0
    zeta: float = 1.7
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    qp_max_iter: int = 20_000
    pairing: str = "paired"
    threads: int | None = None
    attempt_cap: int = 10_000
    min_acceptance: float = 1e-3

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if self.l_init < 1 or self.l_add < 1:
            raise ConfigError("l_init and l_add must be positive")
        if self.n_delta < 2:
            raise ConfigError("n_delta must be at least 2")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be positive")
        if self.discard_threshold < 0:
            raise ConfigError("discard_threshold must be non-negative")
        if not 0.0 <= self.filter_mix <= 1.0:
            raise ConfigError("filter_mix must lie in [0, 1]")
        if self.filter_mix > 0 and self.y_direction is None and self.x_direction is None:
            raise ConfigError("filter_mix > 0 needs y_direction and/or x_direction")
        for d in (self.y_direction, self.x_direction):
            if d not in (None, 1, -1):
                raise ConfigError("shape directions must be +1, -1 or null")
        if self.pairing not in ("paired", "cross"):
            raise ConfigError(f"pairing must be 'paired' or 'cross', got {self.pairing!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["functional"] = self.functional.to_dict()
        d["basis"] = self.basis.to_dict()
        d["x_basis"] = self.x_basis.to_dict() if self.x_basis is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolveConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown solver fields: {sorted(unknown)}")
        for k, f in cls.__dataclass_fields__.items():
            # YAML 1.1 leaves exponent literals such as 1e-8 as strings
            if f.type in (float, "float") and isinstance(d.get(k), str):
                try:
                    d[k] = float(d[k])
                except ValueError as exc:
                    raise ConfigError(f"solver field {k!r}: {exc}") from exc
        if isinstance(d.get("functional"), dict):
            d["functional"] = FunctionalSpec.from_dict(d["functional"])
        if isinstance(d.get("basis"), dict):
            d["basis"] = BasisSpec.from_dict(d["basis"])
        if isinstance(d.get("x_basis"), dict):
            d["x_basis"] = BasisSpec.from_dict(d["x_basis"])
        return cls(**d)

    def n_filtered(self, batch: int) -> int:
        return int(round(self.filter_mix * batch))


@dataclass
class BoundsTrace:
    records: list = field(default_factory=list)
    status: str = MAX_ITERATIONS
    window: int = 200
    message: str = ""

    def values(self, key):
        return np.array([r[key] for r in self.records], dtype=float)

    def trailing(self, window: int | None = None):
        """Means of the last ``window`` lower and upper values."""
        w = window or self.window
        if not self.records:
            return float("nan"), float("nan")
        return float(np.mean(self.values("v_min")[-w:])), float(np.mean(self.values("v_max")[-w:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([r["iter"]] + [repr(float(r[c])) if c.startswith(("v_", "resid")) else r[c]
                                      for c in TRACE_COLUMNS[1:]])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        a, b = self.trailing()
        lines.append(json.dumps({"status": self.status, "window": self.window, "trailing_min": a,
                                 "trailing_max": b, "message": self.message}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "BoundsTrace":
        trace = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"trace line {lineno}: {exc.msg}") from exc
            if "status" in obj:
                trace.status = obj["status"]
                trace.window = int(obj.get("window", trace.window))
                trace.message = obj.get("message", "")
            else:
                trace.records.append(obj)
        return trace


def moving_sd(values, window: int) -> float:
    v = np.asarray(values[-window:], dtype=float)
    return float(np.std(v, ddof=1))


class _Pool:
    """Live columns for one sense, plus the matching pairs and warm start."""

    def __init__(self, theta: ThetaMatrix, xi: XiVector, pairs: dict):
        self.theta = theta
        self.xi = xi
        self.pairs = pairs
        self.weights = np.zeros(theta.n_cols)

    def append(self, new_pairs, grid, spec, threads):
        self.theta, self.xi = append_columns(self.theta, self.xi, new_pairs, grid, spec, threads)
        for p in new_pairs:
            self.pairs[p.id] = p
        self.weights = np.concatenate((self.weights, np.zeros(len(new_pairs))))

    def drop(self, threshold):
        self.theta, self.xi, kept = drop_zero_columns(self.theta, self.xi, self.weights, threshold)
        if len(kept) != len(self.pairs):
            keep = set(kept)
            self.weights = self.weights[self.weights >= threshold]
            self.pairs = {i: p for i, p in self.pairs.items() if i in keep}
        return kept


class BoundsRunner:
    """Stateful driver; ``run`` is the functional entry point.

    Keeping the state on an object lets a run be checkpointed after any
    iteration and resumed bit-for-bit.
    """

    def __init__(self, config: SolveConfig, cdf: CdfField, grid: Grid):
        if not cdf.grid.same_as(grid):
            raise DataError("CDF field was tabulated on a different grid")
        self.config = config
        self.cdf = cdf
        self.grid = grid
        self.cdf_vec = cdf.flat()
        c = config
        x_basis = c.x_basis if c.x_basis is not None else c.basis
        self.free = PathSampler(c.basis, x_basis, seed=c.rng_seed, stream=0,
                                attempt_cap=c.attempt_cap, min_acceptance=c.min_acceptance)
        self.shaped = None
        self.shape_filter = None
        if c.y_direction is not None or c.x_direction is not None:
            y_b = replace(c.basis, coefficient_law=MONOTONE_INCREMENTS, direction=c.y_direction) \
                if c.y_direction is not None else c.basis
            x_b = replace(x_basis, coefficient_law=MONOTONE_INCREMENTS, direction=c.x_direction) \
                if c.x_direction is not None else x_basis
            self.shape_filter = monotone_filter(c.y_direction, c.x_direction)
            self.shaped = PathSampler(y_b, x_b, seed=c.rng_seed, stream=1,
                                      attempt_cap=c.attempt_cap, min_acceptance=c.min_acceptance)
        self.trace = BoundsTrace(window=c.n_delta)
        self.k = 0
        self.pools = None

    # -- sampling -----------------------------------------------------------------
    def _live_keys(self):
        keys = set()
        for pool in self.pools or ():
            keys.update(p.key() for p in pool.pairs.values())
        return keys

    def _sample_batch(self, size: int):
        c = self.config
        exclude = self._live_keys()
        n_shaped = c.n_filtered(size) if self.shaped is not None else 0
        out = []
        if n_shaped:
            out += self.shaped.sample(n_shaped, self.grid, self.shape_filter, exclude)
            for p in out:
                p.id = -(p.id + 1)  # negative ids keep the two streams disjoint
        if size - n_shaped:
            out += self.free.sample(size - n_shaped, self.grid, None, exclude)
        if c.pairing == "cross":
            out = list(cross_product_pairs(out))
        return out

    # -- one step -----------------------------------------------------------------
    def _solve(self, pool: _Pool, sense: str):
        c = self.config
        prob = QpProblem(pool.theta.tocsc(), self.cdf_vec, pool.xi.values, c.lam, sense)
        sol = solve(prob, rho=c.rho, zeta=c.zeta, tol_primal=c.tol_primal, tol_dual=c.tol_dual,
                    max_iter=c.qp_max_iter, warm_start=pool.weights)
        if not sol.converged:
            log.debug("ADMM hit max_iter (%s) at k=%d: r=%.2e s=%.2e", sense, self.k,
                      sol.primal_residual, sol.dual_residual)
        pool.weights = sol.weights
        return sol, prob.residual_norm(sol.weights)

    def initialize(self):
        c = self.config
        init = self._sample_batch(c.l_init)
        theta = build_theta(init, self.grid, c.threads)
        xi = build_xi(init, c.functional, self.grid)
        self.pools = [_Pool(theta, xi, {p.id: p for p in init}),
                      _Pool(ThetaMatrix(theta.n_rows, list(theta.columns), list(theta.col_ids)),
                            XiVector(xi.values.copy(), list(xi.ids)), {p.id: p for p in init})]

    def step(self):
        """Run one iteration; returns True once the convergence rule holds."""
        c = self.config
        if self.pools is None:
            self.initialize()
        self.k += 1
        new = self._sample_batch(c.l_add)
        rec = {"iter": self.k}
        for pool, sense, tag in ((self.pools[0], LOWER, "min"), (self.pools[1], UPPER, "max")):
            pool.append(new, self.grid, c.functional, c.threads)
            sol, resid = self._solve(pool, sense)
            rec[f"v_{tag}"] = sol.functional_value
            rec[f"pool_{tag}"] = pool.theta.n_cols
            rec[f"resid_{tag}"] = resid
            rec[f"admm_iter_{tag}"] = sol.iterations
            rec[f"admm_ok_{tag}"] = bool(sol.converged)
            before = pool.theta.n_cols
            pool.drop(c.discard_threshold)
            rec[f"dropped_{tag}"] = before - pool.theta.n_cols
        self.trace.records.append(rec)
        if self.k >= c.n_delta:
            vmin = self.trace.values("v_min")
            vmax = self.trace.values("v_max")
            if moving_sd(vmin, c.n_delta) <= c.delta and moving_sd(vmax, c.n_delta) <= c.delta:
                return True
        return False

    def run(self, checkpoint_path=None, checkpoint_every: int = 0) -> BoundsTrace:
        c = self.config
        try:
            while self.k < c.max_iterations:
                done = self.step()
                if checkpoint_path and checkpoint_every and self.k % checkpoint_every == 0:
                    self.save_checkpoint(checkpoint_path)
                if done:
                    self.trace.status = CONVERGED
                    break
            else:
                self.trace.status = MAX_ITERATIONS
        except FilterInfeasibleError as exc:
            self.trace.status = INFEASIBLE_FILTER
            self.trace.message = str(exc)
        except NumericError as exc:
            exc.trace = self.trace
            raise
        if checkpoint_path:
            self.save_checkpoint(checkpoint_path)
        return self.trace

    # -- checkpoints --------------------------------------------------------------
    def save_checkpoint(self, path):
        state = {
            "config": self.config.to_dict(),
            "grid": self.grid.to_dict(),
            "k": self.k,
            "free_next": self.free.next_index,
            "shaped_next": self.shaped.next_index if self.shaped is not None else None,
            "trace": {"records": self.trace.records, "status": self.trace.status,
                      "message": self.trace.message},
            "pools": None if self.pools is None else [
                {"ids": list(p.theta.col_ids), "weights": p.weights.tolist(),
                 "pairs": [p.pairs[i].to_dict() for i in p.theta.col_ids]}
                for p in self.pools
            ],
        }
        FsPath(path).write_text(json.dumps(state))

    @classmethod
    def from_checkpoint(cls, path, cdf: CdfField) -> "BoundsRunner":
        try:
            state = json.loads(FsPath(path).read_text())
            config = SolveConfig.from_dict(state["config"])
            grid = Grid.from_dict(state["grid"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        runner = cls(config, cdf, grid)
        runner.k = int(state["k"])
        runner.free.next_index = int(state["free_next"])
        if runner.shaped is not None:
            runner.shaped.next_index = int(state["shaped_next"])
        runner.trace.records = state["trace"]["records"]
        runner.trace.status = state["trace"]["status"]
        runner.trace.message = state["trace"].get("message", "")
        if state["pools"] is not None:
            pools = []
            for ps in state["pools"]:
                pairs = [PathPair.from_dict(d) for d in ps["pairs"]]
                for p in pairs:
                    p.y_path.grid_values = p.y_path(grid.points)
                    p.x_path.grid_values = p.x_path(grid.points)
                pool = _Pool(build_theta(pairs, grid, config.threads),
                             build_xi(pairs, config.functional, grid), {p.id: p for p in pairs})
                pool.weights = np.asarray(ps["weights"], dtype=float)
                pools.append(pool)
            runner.pools = pools
        return runner


def run(config: SolveConfig, cdf: CdfField, grid: Grid, checkpoint_path=None,
        checkpoint_every: int = 0) -> BoundsTrace:
    """Run the bounds loop to convergence or ``max_iterations``."""
    return BoundsRunner(config, cdf, grid).run(checkpoint_path, checkpoint_every)


def solve_fixed_pool(pairs, config: SolveConfig, cdf: CdfField, grid: Grid):
    """Cold-started lower and upper solutions over a fixed set of pairs.

    Returns ``(lower, upper)`` QpSolutions, or ``(None, None)`` for no pairs.
    """
    pairs = list(pairs)
    if not pairs:
        return None, None
    theta = build_theta(pairs, grid, config.threads).tocsc()
    xi = build_xi(pairs, config.functional, grid).values
    out = []
    for sense in (LOWER, UPPER):
        out.append(solve(QpProblem(theta, cdf.flat(), xi, config.lam, sense), rho=config.rho,
                         zeta=config.zeta, tol_primal=config.tol_primal, tol_dual=config.tol_dual,
                         max_iter=config.qp_max_iter))
    return out[0], out[1]


def nested_restriction_check(config: SolveConfig, cdf: CdfField, grid: Grid, pairs=None, filter=None,
                             pool_size: int | None = None) -> dict:
    """Compare optima over a fixed pool with optima over its filtered subset.

    ``pool_min``/``subset_min`` are optimal values of the lower program
    ``min Xi'mu + (lam/2)||Theta mu - F||^2`` and ``pool_max``/``subset_max``
    those of the upper program ``max Xi'mu - (lam/2)||Theta mu - F||^2``.
    These nest exactly under column restriction. The bare functional values
    ``Xi'mu`` at the optimizers are reported under ``*_functional`` keys;
    they need not nest, since a restricted optimizer may trade a lower
    functional for a worse fit.

    Without explicit ``pairs`` a pool of ``pool_size`` (default ``l_init``)
    pairs is drawn with the configured shape mix; ``filter`` defaults to the
    configured monotonicity predicate.
    """
    if pairs is None:
        runner = BoundsRunner(config, cdf, grid)
        runner.pools = []
        pairs = runner._sample_batch(pool_size or config.l_init)
    pairs = list(pairs)
    if filter is None:
        filter = monotone_filter(config.y_direction, config.x_direction)
    subset = [p for p in pairs if filter(p)]
    report = {"pool_size": len(pairs), "subset_size": len(subset), "subset_empty": not subset}
    for tag, group in (("pool", pairs), ("subset", subset)):
        lo, hi = solve_fixed_pool(group, config, cdf, grid)
        report[f"{tag}_min"] = None if lo is None else lo.objective_value
        report[f"{tag}_max"] = None if hi is None else -hi.objective_value
        report[f"{tag}_min_functional"] = None if lo is None else lo.functional_value
        report[f"{tag}_max_functional"] = None if hi is None else hi.functional_value
    return report
