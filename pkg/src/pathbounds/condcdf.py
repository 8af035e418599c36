"""Kernel-smoothed conditional joint CDF of (Y, X) given Z, tabulated on a grid.

Only the conditioning variable is smoothed (Gaussian kernel in z); the
(y, x) part stays an exact indicator, so the estimate is a weighted ECDF.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BandwidthSelectionError, DataError
from .unitgrid import Dataset, Grid

log = logging.getLogger(__name__)

# Gaussian weights below this total are treated as zero kernel mass.
_MASS_FLOOR = 1e-300


def _kernel_weights(z0, z, h):
    u = (np.asarray(z0, dtype=float)[..., None] - z) / h
    return np.exp(-0.5 * u * u)


def _check_h(h):
    if not np.isfinite(h) or h <= 0:
        raise DataError(f"bandwidth must be positive and finite, got {h}")


def cond_cdf(data: Dataset, y: float, x: float, z: float, h: float, return_flag: bool = False):
    """Nadaraya-Watson estimate of P(Y <= y, X <= x | Z = z).

    Falls back to the unconditional ECDF when all kernel weights underflow;
    with ``return_flag`` the result is ``(value, fell_back)``.
    """
    _check_h(h)
    w = _kernel_weights(z, data.z, h)
    ind = (data.y <= y) & (data.x <= x)
    mass = w.sum()
    fell_back = not mass > _MASS_FLOOR
    if fell_back:
        val = float(ind.mean())
    else:
        val = float(np.dot(w, ind) / mass)
    return (val, fell_back) if return_flag else val


@dataclass(eq=False)
class CdfField:
    """``values[iz, ix, iy] = F(grid[iy], grid[ix] | grid[iz])``.

    The flattened order (z-major, then x, then y) matches the constraint
    matrix rows.
    """

    grid: Grid
    values: np.ndarray
    bandwidth: float
    fallback_z: tuple = ()
    max_cleanup: float = 0.0

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def to_json(self) -> str:
        n = self.grid.size
        table = [
            {"iz": iz, "ix": ix, "iy": iy, "value": float(self.values[iz, ix, iy])}
            for iz in range(n) for ix in range(n) for iy in range(n)
        ]
        return json.dumps({
            "grid": self.grid.to_dict(),
            "bandwidth": self.bandwidth,
            "fallback_z": list(self.fallback_z),
            "max_cleanup": self.max_cleanup,
            "table": table,
        })

    @classmethod
    def from_json(cls, text: str) -> "CdfField":
        try:
            d = json.loads(text)
            grid = Grid.from_dict(d["grid"])
            n = grid.size
            vals = np.full((n, n, n), np.nan)
            for row in d["table"]:
                vals[row["iz"], row["ix"], row["iy"]] = row["value"]
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DataError(f"malformed CDF cache: {exc}") from exc
        if np.isnan(vals).any():
            raise DataError("CDF cache is missing cells")
        return cls(grid, vals, float(d["bandwidth"]), tuple(d.get("fallback_z", ())),
                   float(d.get("max_cleanup", 0.0)))


def _slice(data: Dataset, grid: Grid, z0: float, h: float):
    pts = grid.points
    w = _kernel_weights(z0, data.z, h)
    mass = w.sum()
    fell_back = not mass > _MASS_FLOOR
    if fell_back:
        w = np.ones_like(w)
        mass = w.size
    ind_y = (data.y[:, None] <= pts[None, :]).astype(float)  # (n, iy)
    ind_x = (data.x[:, None] <= pts[None, :]).astype(float)  # (n, ix)
    sl = (ind_x * w[:, None]).T @ ind_y / mass  # (ix, iy)
    return sl, fell_back


def cdf_field(data: Dataset, grid: Grid, h: float, threads: int = 1) -> CdfField:
    """Tabulate the conditional CDF on the full grid cube.

    Rounding can break monotonicity by a few ulps; a cumulative max along
    the y and x axes restores it, and cleanups above 1e-8 are logged.
    """
    _check_h(h)
    if len(data) == 0:
        raise DataError("dataset is empty")
    zs = grid.points
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            slices = list(ex.map(lambda z0: _slice(data, grid, z0, h), zs))
    else:
        slices = [_slice(data, grid, z0, h) for z0 in zs]
    vals = np.stack([s for s, _ in slices])
    fallback = tuple(float(z0) for z0, (_, fb) in zip(zs, slices) if fb)
    if fallback:
        log.warning("zero kernel mass at z=%s; used unconditional ECDF", fallback)
    raw = np.clip(vals, 0.0, 1.0)
    clean = np.maximum.accumulate(np.maximum.accumulate(raw, axis=2), axis=1)
    dev = float(np.max(clean - vals)) if vals.size else 0.0
    dev = max(dev, float(np.max(vals - clean)))
    if dev > 1e-8:
        log.warning("monotonicity cleanup moved CDF values by up to %.3g", dev)
    return CdfField(grid, clean, float(h), fallback, dev)


def loo_score(data: Dataset, grid: Grid, h: float, chunk: int = 512):
    """Leave-one-out squared error of the indicator regression on grid (y, x).

    Returns ``inf`` when some held-out point has no kernel mass from the
    remaining records.
    """
    pts = grid.points
    # targets t_i(y, x) = 1{y_i <= y} 1{x_i <= x}, flattened over grid pairs
    ty = (data.y[:, None] <= pts[None, :]).astype(float)
    tx = (data.x[:, None] <= pts[None, :]).astype(float)
    targets = (tx[:, :, None] * ty[:, None, :]).reshape(len(data), -1)
    z = data.z
    n = len(data)
    total = 0.0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        w = _kernel_weights(z[start:stop], z, h)
        w[np.arange(stop - start), np.arange(start, stop)] = 0.0
        mass = w.sum(axis=1)
        if np.any(mass <= _MASS_FLOOR):
            return np.inf
        pred = (w @ targets) / mass[:, None]
        total += float(np.sum((pred - targets[start:stop]) ** 2))
    return total / (n * targets.shape[1])


def cv_bandwidth(data: Dataset, candidates, grid: Grid | None = None) -> float:
    """Pick the candidate bandwidth with the smallest leave-one-out error.

    Ties go to the larger bandwidth. ``grid`` defaults to the order-3 dyadic grid.
    """
    from .unitgrid import dyadic_grid

    cands = [float(c) for c in candidates]
    if not cands:
        raise DataError("no bandwidth candidates given")
    for c in cands:
        _check_h(c)
    if len(cands) == 1:
        return cands[0]
    if len(data) < 10:
        raise DataError("bandwidth selection needs at least 10 records")
    grid = grid if grid is not None else dyadic_grid(3)
    scores = [loo_score(data, grid, c) for c in cands]
    log.debug("cv scores: %s", dict(zip(cands, scores)))
    finite = [(s, -c) for s, c in zip(scores, cands) if np.isfinite(s)]
    if not finite:
        raise BandwidthSelectionError("every bandwidth candidate leaves a point with zero kernel mass")
    best = min(finite)
    return -best[1]


def default_candidates(n: int):
    """Geometric candidate grid scaled around Silverman's n**(-1/5) rate."""
    base = 1.06 * np.sqrt(1.0 / 12.0) * n ** (-0.2)
    return [float(base * f) for f in (0.125, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0)]
