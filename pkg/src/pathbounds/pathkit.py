"""Hat-function wavelet paths: basis, random sampling, shape filters, composition.

A sampled path is a finite sum ``center + sum_k sum_j a_kj * phi_kj(x)`` over
the configured dilation levels. Because every phi_kj is a hat function on
the dyadic knots ``j / 2**k``, one level is just the linear interpolant of
the knot values ``a_kj * 2**(k/2)``, and the whole path is piecewise linear
on the knots of the finest level. Paths are therefore stored as knot
values and evaluated with ``np.interp``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FilterInfeasibleError
from .unitgrid import Grid

UNIFORM_BOX = "uniform_box"
MONOTONE_INCREMENTS = "monotone_increments"
RENORMALIZE = "renormalize"
HARD_CLIP = "hard"


def hat(x):
    """Triangle function: ``x + 1`` on [-1, 0], ``1 - x`` on (0, 1], else 0."""
    x = np.asarray(x, dtype=float)
    out = np.maximum(0.0, 1.0 - np.abs(x))
    return out if out.ndim else float(out)


def phi_kj(kappa, j, x):
    """Dilated and translated hat ``2**(kappa/2) * hat(2**kappa * x - j)``."""
    return 2.0 ** (kappa / 2.0) * hat(2.0 ** kappa * np.asarray(x, dtype=float) - j)


def level_indices(kappa):
    """Translations j whose hat support has interior overlap with [0, 1]."""
    return np.arange(0, 2 ** kappa + 1)


@dataclass(frozen=True)
class BasisSpec:
    """Sampling law P0 for one family of paths.

    ``scale`` is the per-level amplitude c0: under ``uniform_box`` the
    coefficient half-width at level k is ``c0 * 2**(-k/2)``, so every level
    moves the path by at most c0. ``scales`` overrides c0 per level.
    Under ``monotone_increments`` each level is a nondecreasing (or, with
    ``direction=-1``, nonincreasing) knot sequence whose total rise is
    uniform on [0, 2 * c0].
    """

    kappa_levels: tuple = (1, 2, 3, 4, 5)
    coefficient_law: str = UNIFORM_BOX
    scale: float = 0.3
    scales: tuple | None = None
    direction: int = 1
    center: float = 0.5
    clip: bool = True
    clip_mode: str = RENORMALIZE

    def __post_init__(self):
        levels = tuple(sorted({int(k) for k in self.kappa_levels}))
        if not levels:
            raise ConfigError("kappa_levels must be non-empty")
        if levels[0] < 1:
            raise ConfigError("kappa levels must be positive integers")
        if levels[-1] > 16:
            raise ConfigError("kappa levels above 16 are not supported")
        object.__setattr__(self, "kappa_levels", levels)
        if self.coefficient_law not in (UNIFORM_BOX, MONOTONE_INCREMENTS):
            raise ConfigError(f"unknown coefficient law {self.coefficient_law!r}")
        if self.scales is not None:
            sc = tuple(float(s) for s in self.scales)
            if len(sc) != len(levels):
                raise ConfigError("scales must give one value per kappa level")
            object.__setattr__(self, "scales", sc)
        if any(s <= 0 for s in self.level_scales()):
            raise ConfigError("coefficient scales must be positive")
        if self.direction not in (1, -1):
            raise ConfigError("direction must be +1 or -1")
        if self.clip_mode not in (RENORMALIZE, HARD_CLIP):
            raise ConfigError(f"unknown clip mode {self.clip_mode!r}")

    @property
    def finest(self) -> int:
        return self.kappa_levels[-1]

    def level_scales(self):
        if self.scales is not None:
            return self.scales
        return tuple(float(self.scale) for _ in self.kappa_levels)

    def to_dict(self) -> dict:
        return {
            "kappa_levels": list(self.kappa_levels),
            "coefficient_law": self.coefficient_law,
            "scale": self.scale,
            "scales": list(self.scales) if self.scales is not None else None,
            "direction": self.direction,
            "center": self.center,
            "clip": self.clip,
            "clip_mode": self.clip_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        d = dict(d)
        if d.get("scales") is not None:
            d["scales"] = tuple(d["scales"])
        if "kappa_levels" in d:
            d["kappa_levels"] = tuple(d["kappa_levels"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown basis fields: {sorted(unknown)}")
        return cls(**d)


def _renormalize(values):
    """Affine map into [0, 1]: identity if inside, shift if it fits, else min-max."""
    lo, hi = values.min(), values.max()
    if lo >= 0.0 and hi <= 1.0:
        return values
    if hi - lo <= 1.0:
        shift = -lo if lo < 0.0 else 1.0 - hi
        return np.clip(values + shift, 0.0, 1.0)
    return (values - lo) / (hi - lo)


@dataclass(eq=False)
class Path:
    """Continuous piecewise-linear path on [0, 1].

    ``coefficients`` maps each level k to its hat coefficients a_kj,
    j = 0..2**k. ``knot_values`` are the (clipped/renormalized) values on
    the knots ``k / 2**finest``.
    """

    coefficients: dict
    knot_values: np.ndarray
    center: float = 0.0
    monotone_tag: int | None = None
    grid_values: np.ndarray | None = None

    @property
    def finest(self) -> int:
        return max(self.coefficients)

    @property
    def knots(self):
        n = self.knot_values.size - 1
        return np.arange(n + 1, dtype=float) / n

    def __call__(self, x):
        return np.interp(x, self.knots, self.knot_values)

    def raw(self, x):
        """Evaluate the unclipped wavelet sum directly from the coefficients."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, float(self.center))
        for kappa, coefs in self.coefficients.items():
            for j, a in enumerate(coefs):
                out = out + a * phi_kj(kappa, j, x)
        return out

    def slopes(self):
        return np.diff(self.knot_values) * (self.knot_values.size - 1)

    def is_monotone(self, direction: int, tol: float = 0.0) -> bool:
        d = np.diff(self.knot_values) * direction
        return bool(np.all(d >= -tol))

    def to_dict(self, grid: Grid | None = None) -> dict:
        d = {
            "center": self.center,
            "coefficients": {str(k): np.asarray(v).tolist() for k, v in sorted(self.coefficients.items())},
            "knot_values": self.knot_values.tolist(),
            "monotone_tag": self.monotone_tag,
        }
        if grid is not None:
            d["grid"] = grid.points.tolist()
            d["grid_values"] = self(grid.points).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Path":
        coefs = {int(k): np.asarray(v, dtype=float) for k, v in d["coefficients"].items()}
        return cls(coefs, np.asarray(d["knot_values"], dtype=float), float(d.get("center", 0.0)),
                   d.get("monotone_tag"))


@dataclass(eq=False)
class PathPair:
    """One hypothetical unit: second stage ``y_path`` (indexed by x) and
    first stage ``x_path`` (indexed by z)."""

    y_path: Path
    x_path: Path
    id: int
    _key: str | None = field(default=None, repr=False)

    def key(self) -> str:
        """Hash of the coefficient vectors rounded at 1e-12."""
        if self._key is None:
            h = hashlib.blake2b(digest_size=16)
            for p in (self.y_path, self.x_path):
                for k in sorted(p.coefficients):
                    h.update(np.round(np.asarray(p.coefficients[k]) * 1e12).astype(np.int64).tobytes())
                h.update(np.round(np.array([p.center]) * 1e12).astype(np.int64).tobytes())
                h.update(b"|")
            self._key = h.hexdigest()
        return self._key

    def to_dict(self, grid: Grid | None = None) -> dict:
        return {"id": self.id, "y_path": self.y_path.to_dict(grid), "x_path": self.x_path.to_dict(grid)}

    @classmethod
    def from_dict(cls, d: dict) -> "PathPair":
        return cls(Path.from_dict(d["y_path"]), Path.from_dict(d["x_path"]), int(d["id"]))


def pairs_to_json(pairs, grid: Grid | None = None) -> str:
    return json.dumps([p.to_dict(grid) for p in pairs])


def pairs_from_json(text: str):
    return [PathPair.from_dict(d) for d in json.loads(text)]


def draw_path(spec: BasisSpec, rng: np.random.Generator) -> Path:
    """Draw one path under ``spec``; values land in [0, 1] when ``spec.clip``."""
    finest = spec.finest
    n = 2 ** finest
    fine_x = np.arange(n + 1, dtype=float) / n
    total = np.full(n + 1, float(spec.center))
    coefs = {}
    monotone = spec.coefficient_law == MONOTONE_INCREMENTS
    for kappa, c0 in zip(spec.kappa_levels, spec.level_scales()):
        m = 2 ** kappa
        half = c0 * 2.0 ** (-kappa / 2.0)
        if monotone:
            inc = rng.exponential(1.0, size=m)
            inc *= rng.uniform(0.0, 2.0 * c0) / inc.sum()
            knots = rng.uniform(-c0, c0) + np.concatenate(([0.0], np.cumsum(inc)))
            knots -= 0.5 * (knots[-1] - knots[0])
            a = spec.direction * knots * 2.0 ** (-kappa / 2.0)
        else:
            a = rng.uniform(-half, half, size=m + 1)
        coefs[kappa] = a
        level_knots = a * 2.0 ** (kappa / 2.0)
        total += np.interp(fine_x, np.arange(m + 1, dtype=float) / m, level_knots)
    if spec.clip:
        if spec.clip_mode == RENORMALIZE:
            total = _renormalize(total)
        else:
            total = np.clip(total, 0.0, 1.0)
    tag = spec.direction if monotone else None
    return Path(coefs, total, float(spec.center), tag)


def pair_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent stream for pair ``index``: output never depends on batching."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(stream), int(index)])


def draw_pair(y_spec: BasisSpec, x_spec: BasisSpec, seed: int, index: int, stream: int = 0) -> PathPair:
    rng = pair_rng(seed, index, stream)
    y_path = draw_path(y_spec, rng)
    x_path = draw_path(x_spec, rng)
    return PathPair(y_path, x_path, int(index))


class PathSampler:
    """Counter-based sampler: pair ``i`` depends only on ``(seed, i)``.

    ``next_index`` is the only mutable state, which makes checkpoints
    trivial: store the counter and resume.
    """

    def __init__(self, y_spec: BasisSpec, x_spec: BasisSpec | None = None, seed: int = 0,
                 next_index: int = 0, attempt_cap: int = 10_000, min_acceptance: float = 1e-3,
                 stream: int = 0):
        if min_acceptance <= 0:
            raise ConfigError("min_acceptance must be positive")
        self.y_spec = y_spec
        self.x_spec = x_spec if x_spec is not None else y_spec
        self.seed = int(seed)
        self.stream = int(stream)
        self.next_index = int(next_index)
        self.attempt_cap = int(attempt_cap)
        self.min_acceptance = float(min_acceptance)

    def sample(self, count: int, grid: Grid | None = None, filter=None, exclude=None):
        """Draw ``count`` pairs passing ``filter`` (rejection sampling).

        ``exclude`` is a set of pair keys that must not be returned; newly
        accepted keys are added to it so a batch is internally unique too.
        """
        if count < 1:
            raise DataError("count must be at least 1")
        out = []
        attempts = 0
        while len(out) < count:
            pair = draw_pair(self.y_spec, self.x_spec, self.seed, self.next_index, self.stream)
            self.next_index += 1
            attempts += 1
            ok = filter is None or filter(pair)
            if ok and exclude is not None:
                k = pair.key()
                ok = k not in exclude
                if ok:
                    exclude.add(k)
            if ok:
                if grid is not None:
                    pair.y_path.grid_values = pair.y_path(grid.points)
                    pair.x_path.grid_values = pair.x_path(grid.points)
                out.append(pair)
            elif attempts >= self.attempt_cap:
                rate = len(out) / attempts
                if rate < self.min_acceptance:
                    raise FilterInfeasibleError(
                        f"shape filter accepted {len(out)} of {attempts} draws "
                        f"(rate {rate:.2e} < floor {self.min_acceptance:.2e})",
                        acceptance_rate=rate,
                    )
        return out


def sample_paths(spec: BasisSpec, grid: Grid, count: int, filter=None, seed: int = 0,
                 x_spec: BasisSpec | None = None, start: int = 0, **kw):
    """Convenience wrapper: ``count`` pairs from a fresh sampler."""
    return PathSampler(spec, x_spec, seed=seed, next_index=start, **kw).sample(count, grid, filter)


def monotone_filter(y_direction: int | None = None, x_direction: int | None = None, tol: float = 0.0):
    """Predicate accepting pairs whose paths are monotone in the given directions."""

    def accept(pair: PathPair) -> bool:
        if y_direction is not None and not pair.y_path.is_monotone(y_direction, tol):
            return False
        if x_direction is not None and not pair.x_path.is_monotone(x_direction, tol):
            return False
        return True

    return accept


def compose(pair: PathPair, z):
    """Joint response at instrument value z: ``x = X_z``, ``y = Y_{X_z}``.

    The outcome path is only ever evaluated at the treatment level, never at z.
    """
    x = pair.x_path(z)
    y = pair.y_path(x)
    return y, x


def ext_modulus(values, mesh, delta, min_points_per_delta: int = 8) -> float:
    """Extended modulus of continuity of a tabulated function.

    Minimizes, over partitions of the mesh range into cells ``[t_{i-1}, t_i)``
    of width at least ``delta`` with knots on mesh points, the largest
    oscillation inside a cell. Exact for piecewise functions when the mesh
    contains their jump locations.
    """
    f = np.asarray(values, dtype=float)
    m = np.asarray(mesh, dtype=float)
    if f.shape != m.shape or f.ndim != 1:
        raise DataError("values and mesh must be 1-d arrays of equal length")
    if not 0.0 < delta:
        raise DataError("delta must be positive")
    spacing = np.max(np.diff(m))
    if delta < min_points_per_delta * spacing:
        raise DataError(
            f"mesh spacing {spacing:.3g} too coarse for delta={delta:.3g} "
            f"(need at least {min_points_per_delta} points per delta)"
        )
    n = m.size
    span = m[-1] - m[0]
    if span < delta:
        return float(f.max() - f.min())
    eps = 1e-9 * delta
    best = np.full(n, np.inf)
    best[0] = 0.0
    # best[k]: minimal max-oscillation over partitions of [m0, m_k) ending with a knot at m_k
    for k in range(1, n):
        last = k == n - 1
        hi = k + 1 if last else k  # the final cell is closed
        limit = np.searchsorted(m, m[k] - delta + eps, side="right")  # i < limit => width >= delta
        if limit == 0:
            continue
        seg = f[:hi][::-1]
        osc = (np.maximum.accumulate(seg) - np.minimum.accumulate(seg))[::-1]  # osc[i] = osc(f[i:hi])
        cand = np.maximum(best[:limit], osc[:limit])
        best[k] = cand.min()
    return float(best[-1])


def hat_inner_products(f, kappa, js, n_quad: int = 32, breakpoints=()):
    """``<f, phi_kj>`` by composite Gauss-Legendre quadrature.

    Each half of the hat support is integrated separately, further split at
    ``breakpoints`` (jump locations of f) so every panel sees a smooth piece.
    """
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    h = 2.0 ** -kappa
    bps = np.asarray(sorted(breakpoints), dtype=float)
    out = np.empty(len(js))
    for idx, j in enumerate(js):
        total = 0.0
        for a, b in (((j - 1) * h, j * h), (j * h, (j + 1) * h)):
            inner = bps[(bps > a) & (bps < b)]
            edges = np.concatenate(([a], inner, [b]))
            for lo, hi_ in zip(edges[:-1], edges[1:]):
                t = 0.5 * (hi_ - lo) * nodes + 0.5 * (hi_ + lo)
                total += 0.5 * (hi_ - lo) * np.dot(weights, f(t) * phi_kj(kappa, j, t))
        out[idx] = total
    return out


def wavelet_approx(f, kappa, x, n_quad: int = 32, breakpoints=()):
    """Apply ``W_k f = sum_j <f, phi_kj> phi_kj`` at points x.

    Only translations whose support meets ``[min(x), max(x)]`` contribute.
    """
    x = np.asarray(x, dtype=float)
    lo = int(np.floor(x.min() * 2 ** kappa)) - 1
    hi = int(np.ceil(x.max() * 2 ** kappa)) + 1
    js = np.arange(lo, hi + 1)
    c = hat_inner_products(f, kappa, js, n_quad, breakpoints)
    out = np.zeros_like(x)
    for cj, j in zip(c, js):
        out += cj * phi_kj(kappa, j, x)
    return out
