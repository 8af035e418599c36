"""Sparse binary constraint matrix and objective vector from sampled path pairs.

Row ``(iz * n + ix) * n + iy`` of the matrix is the grid cell
``(y_iy, x_ix, z_iz)``; column ``i`` is a path pair, with a 1 where the
pair's joint response at ``z_iz`` satisfies ``y <= y_iy`` and ``x <= x_ix``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .pathkit import PathPair
from .unitgrid import Grid

THREADS_ENV = "PATHBOUNDS_THREADS"

FUNCTIONAL_KINDS = ("level", "ate", "cdf_diff", "cdf_level", "avg_derivative")


def default_threads() -> int:
    val = os.environ.get(THREADS_ENV)
    if not val:
        return 1
    try:
        n = int(val)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {val!r}") from None
    return max(1, n)


@dataclass(eq=False)
class ThetaMatrix:
    """Columns stored as sorted arrays of the row indices holding a 1."""

    n_rows: int
    columns: list
    col_ids: list
    _csc: sp.csc_matrix | None = field(default=None, repr=False)

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    def tocsc(self) -> sp.csc_matrix:
        if self._csc is None:
            lens = np.fromiter((c.size for c in self.columns), dtype=np.int64, count=self.n_cols)
            indptr = np.concatenate(([0], np.cumsum(lens)))
            indices = np.concatenate(self.columns) if self.columns else np.zeros(0, dtype=np.int32)
            data = np.ones(indices.size)
            self._csc = sp.csc_matrix((data, indices, indptr), shape=self.shape)
        return self._csc

    def toarray(self) -> np.ndarray:
        return self.tocsc().toarray()

    def to_coo_text(self) -> str:
        """Debug dump: one ``row col`` line per nonzero, column-major."""
        lines = [f"# {self.n_rows} {self.n_cols}"]
        for c, rows in enumerate(self.columns):
            lines.extend(f"{r} {c}" for r in rows)
        return "\n".join(lines) + "\n"

    def structurally_equal(self, other: "ThetaMatrix") -> bool:
        return (
            self.n_rows == other.n_rows
            and list(self.col_ids) == list(other.col_ids)
            and all(np.array_equal(a, b) for a, b in zip(self.columns, other.columns))
        )


@dataclass(eq=False)
class XiVector:
    values: np.ndarray
    ids: list

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class FunctionalSpec:
    """Target functional of the outcome paths.

    ``eta`` switches the indicator kinds to the logistic smoothing
    ``1 / (1 + exp(-eta * (y_star - v)))``.
    """

    kind: str = "level"
    x0: float = 0.5
    x1: float = 0.5
    y_star: float = 0.5
    eta: float | None = None

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ConfigError(f"unknown functional kind {self.kind!r}; expected one of {FUNCTIONAL_KINDS}")
        for name in ("x0", "x1", "y_star"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.eta is not None and not self.eta > 0:
            raise ConfigError("logistic steepness eta must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "x0": self.x0, "x1": self.x1, "y_star": self.y_star, "eta": self.eta}

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionalSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown functional fields: {sorted(unknown)}")
        return cls(**d)


def logistic(v, y_star, eta):
    """Smoothed ``1{v <= y_star}``; numerically stable for large eta."""
    t = eta * (np.asarray(v, dtype=float) - y_star)
    return np.where(t >= 0, np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))),
                    1.0 / (1.0 + np.exp(-np.abs(t))))


def _column(pair: PathPair, grid: Grid) -> np.ndarray:
    pts = grid.points
    n = pts.size
    xv = pair.x_path.grid_values
    if xv is None or xv.size != n:
        xv = pair.x_path(pts)
    yv = pair.y_path(xv)
    # first grid index with grid >= value: indicator y <= y_iy holds for iy >= iy_min
    ix_min = np.searchsorted(pts, xv, side="left")
    iy_min = np.searchsorted(pts, yv, side="left")
    ix = np.arange(n)
    rows = []
    for iz in range(n):
        if ix_min[iz] >= n or iy_min[iz] >= n:
            continue
        xs = ix[ix_min[iz]:]
        ys = ix[iy_min[iz]:]
        rows.append(((iz * n + xs)[:, None] * n + ys[None, :]).ravel())
    if not rows:
        return np.zeros(0, dtype=np.int32)
    return np.concatenate(rows).astype(np.int32)


def build_theta(pairs, grid: Grid, threads: int | None = None) -> ThetaMatrix:
    """Assemble the constraint matrix column by column (optionally threaded)."""
    pairs = list(pairs)
    threads = default_threads() if threads is None else max(1, int(threads))
    for p in pairs:
        gv = p.x_path.grid_values
        if gv is not None and gv.size != grid.size:
            raise DataError(f"pair {p.id} was evaluated on a different grid")
    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            cols = list(ex.map(lambda p: _column(p, grid), pairs))
    else:
        cols = [_column(p, grid) for p in pairs]
    return ThetaMatrix(grid.n_cells, cols, [p.id for p in pairs])


def build_xi(pairs, spec: FunctionalSpec, grid: Grid | None = None) -> XiVector:
    """Objective coefficient per pair, aligned with the matrix columns."""
    pairs = list(pairs)
    vals = np.empty(len(pairs))
    for i, p in enumerate(pairs):
        yp = p.y_path
        if spec.kind == "level":
            vals[i] = yp(spec.x0)
        elif spec.kind == "ate":
            vals[i] = yp(spec.x1) - yp(spec.x0)
        elif spec.kind in ("cdf_diff", "cdf_level"):
            g = (lambda v: float(v <= spec.y_star)) if spec.eta is None else (
                lambda v: float(logistic(v, spec.y_star, spec.eta)))
            vals[i] = g(yp(spec.x1)) - g(yp(spec.x0)) if spec.kind == "cdf_diff" else g(yp(spec.x0))
        else:
            pts = grid.points if grid is not None else np.linspace(0.0, 1.0, 9)
            # exact mean slope over each cell of a piecewise-linear path is the secant
            vals[i] = np.mean(np.diff(yp(pts)) / np.diff(pts))
    if not np.all(np.isfinite(vals)):
        raise DataError("objective vector has non-finite entries")
    return XiVector(vals, [p.id for p in pairs])


def append_columns(theta: ThetaMatrix, xi: XiVector, new_pairs, grid: Grid, spec: FunctionalSpec,
                   threads: int | None = None):
    """Append columns for ``new_pairs``; existing columns are not recomputed."""
    new_pairs = list(new_pairs)
    if not new_pairs:
        return theta, xi
    existing = set(theta.col_ids)
    new_ids = [p.id for p in new_pairs]
    if len(set(new_ids)) != len(new_ids) or existing.intersection(new_ids):
        raise DataError("duplicate pair ids when appending columns")
    t_new = build_theta(new_pairs, grid, threads)
    x_new = build_xi(new_pairs, spec, grid)
    theta2 = ThetaMatrix(theta.n_rows, theta.columns + t_new.columns, theta.col_ids + t_new.col_ids)
    xi2 = XiVector(np.concatenate((xi.values, x_new.values)), xi.ids + x_new.ids)
    return theta2, xi2


def drop_zero_columns(theta: ThetaMatrix, xi: XiVector, weights, threshold: float = 1e-8):
    """Remove columns whose weight is below ``threshold``.

    Returns ``(theta, xi, kept_ids)``; an empty ``kept_ids`` means the pool
    emptied out.
    """
    w = np.asarray(weights, dtype=float)
    if w.size != theta.n_cols:
        raise DataError(f"{w.size} weights for {theta.n_cols} columns")
    if threshold < 0:
        raise DataError("threshold must be non-negative")
    keep = np.flatnonzero(w >= threshold)
    if keep.size == theta.n_cols:
        return theta, xi, list(theta.col_ids)
    cols = [theta.columns[k] for k in keep]
    ids = [theta.col_ids[k] for k in keep]
    return (ThetaMatrix(theta.n_rows, cols, ids), XiVector(xi.values[keep], [xi.ids[k] for k in keep]), ids)


def cross_product_pairs(pairs):
    """Lazily cross every outcome path with every first-stage path.

    Combined ids pack both source ids, so they stay unique across batches.
    """
    pairs = list(pairs)
    for a in pairs:
        for b in pairs:
            yield PathPair(a.y_path, b.x_path, (int(a.id) << 32) + (int(b.id) & 0xFFFFFFFF))
