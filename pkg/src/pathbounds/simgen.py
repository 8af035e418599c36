"""Synthetic IV data from Gaussian-process response paths.

Outcome paths Y_x and first-stage paths X_z are GP draws on a coarse grid,
interpolated linearly and clamped to [0, 1]. Observations draw z uniformly
and a unit at random, then read off ``x = X_z`` and ``y = Y_x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError, NumericError
from .pathkit import Path
from .unitgrid import Dataset, Grid


@dataclass(frozen=True)
class GpSpec:
    mean: float = 0.5
    sigma2: float = 0.2
    length: float = 0.5
    jitter: float = 1e-10

    def __post_init__(self):
        for name in ("sigma2", "length", "jitter"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"GP {name} must be positive")

    def to_dict(self):
        return {"mean": self.mean, "sigma2": self.sigma2, "length": self.length, "jitter": self.jitter}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GP fields: {sorted(unknown)}")
        try:
            return cls(**{k: float(v) for k, v in d.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"GP spec: {exc}") from exc


# Defaults from the simulation design: outcome paths are smoother than first-stage paths.
Y_GP = GpSpec(mean=0.5, sigma2=0.2, length=0.5)
X_GP = GpSpec(mean=0.5, sigma2=0.15, length=0.2)


def se_kernel(spec: GpSpec, d):
    """Squared-exponential covariance ``sigma2 * exp(-d**2 / length**2)``."""
    d = np.asarray(d, dtype=float)
    return spec.sigma2 * np.exp(-(d * d) / spec.length ** 2)


def _factor(cov, jitter, retries=3):
    n = cov.shape[0]
    for attempt in range(retries + 1):
        try:
            return scipy.linalg.cholesky(cov + jitter * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericError(f"covariance factorization failed even with jitter {jitter / 10.0:.1e}")


class _Interp:
    """Piecewise-linear path on arbitrary knots (GP paths live on the sim grid)."""

    def __init__(self, knots, values):
        self.knots = knots
        self.knot_values = values

    def __call__(self, x):
        return np.interp(x, self.knots, self.knot_values)


def gp_sample(spec: GpSpec, grid: Grid, count: int, rng: np.random.Generator):
    """Draw ``count`` GP paths on ``grid`` knots, clamped to [0, 1]."""
    if count < 1:
        raise ConfigError("count must be at least 1")
    pts = grid.points
    cov = se_kernel(spec, pts[:, None] - pts[None, :])
    chol = _factor(cov, spec.jitter)
    z = rng.standard_normal((count, pts.size))
    vals = np.clip(spec.mean + z @ chol.T, 0.0, 1.0)
    if grid.custom or pts.size - 1 != 2 ** grid.order:
        return [_Interp(pts, v) for v in vals]
    return [Path({}, v, spec.mean) for v in vals]


def generate_dataset(y_paths, x_paths, n_obs: int, rng: np.random.Generator, pairing: str = "matched") -> Dataset:
    """Sample ``n_obs`` records from the joint process of the path pairs.

    ``pairing="matched"`` uses unit i's outcome and first-stage paths
    together; ``"independent"`` draws the two indices separately.
    """
    y_paths, x_paths = list(y_paths), list(x_paths)
    if not y_paths or not x_paths:
        raise ConfigError("path lists must be non-empty")
    if pairing not in ("matched", "independent"):
        raise ConfigError(f"unknown pairing {pairing!r}")
    if pairing == "matched" and len(y_paths) != len(x_paths):
        raise ConfigError("matched pairing needs equally many outcome and first-stage paths")
    z = rng.uniform(0.0, 1.0, size=n_obs)
    iy = rng.integers(0, len(y_paths), size=n_obs)
    ix = iy if pairing == "matched" else rng.integers(0, len(x_paths), size=n_obs)
    rec = np.empty((n_obs, 3))
    for k in range(n_obs):
        x = float(x_paths[ix[k]](z[k]))
        rec[k] = (float(y_paths[iy[k]](x)), x, z[k])
    return Dataset(np.clip(rec, 0.0, 1.0))


def simulate(n_paths: int = 2500, n_obs: int = 5000, seed: int = 0, grid: Grid | None = None,
             y_gp: GpSpec = Y_GP, x_gp: GpSpec = X_GP, pairing: str = "matched") -> Dataset:
    """The full simulation design with its defaults (order-3 grid, 2500 units, 5000 records)."""
    from .unitgrid import dyadic_grid

    grid = grid if grid is not None else dyadic_grid(3)
    rng = np.random.default_rng(seed)
    y_paths = gp_sample(y_gp, grid, n_paths, rng)
    x_paths = gp_sample(x_gp, grid, n_paths, rng)
    return generate_dataset(y_paths, x_paths, n_obs, rng, pairing)
