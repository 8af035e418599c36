"""Grids on [0, 1] and rescaling of raw (y, x, z) data into the unit cube."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .errors import CapacityError, DataError, DegenerateAxisError

MAX_GRID_ORDER = 16


@dataclass(frozen=True, eq=False)
class Grid:
    """Ascending knots on [0, 1], shared by the y, x and z axes.

    ``order`` is the dyadic order for uniform grids; custom grids keep the
    order of the finest dyadic grid they were derived from (or 0).
    """

    order: int
    points: np.ndarray
    custom: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise DataError("grid needs at least the two endpoints 0 and 1")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise DataError("grid must start at 0 and end at 1")
        if np.any(np.diff(pts) <= 0):
            raise DataError("grid points must be strictly ascending")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def n_cells(self) -> int:
        """Rows of the (z, x, y) cube, i.e. size**3."""
        return self.size ** 3

    def same_as(self, other: "Grid") -> bool:
        return self is other or (
            self.size == other.size and np.array_equal(self.points, other.points)
        )

    def to_dict(self) -> dict:
        return {"order": self.order, "custom": self.custom, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["order"]), np.asarray(d["points"], dtype=float), bool(d.get("custom", False)))


def dyadic_grid(order: int) -> Grid:
    """Uniform grid ``{k / 2**order}``; all points are exact binary fractions."""
    order = int(order)
    if order < 0:
        raise DataError(f"grid order must be non-negative, got {order}")
    if order > MAX_GRID_ORDER:
        rows = (2 ** order + 1) ** 3
        raise CapacityError(
            f"grid order {order} exceeds the cap {MAX_GRID_ORDER}: "
            f"the cell cube would have {rows} rows"
        )
    n = 2 ** order
    return Grid(order, np.arange(n + 1, dtype=float) / n, custom=False)


def custom_grid(points) -> Grid:
    """User-supplied (possibly non-uniform) grid; only endpoints/order are checked."""
    return Grid(0, np.asarray(points, dtype=float), custom=True)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Records as an ``(n, 3)`` array with columns ``y, x, z`` in [0, 1].

    ``rescale_params`` holds the raw ``(min, max)`` per axis, or ``None``
    when the data was supplied already on the unit scale.
    """

    records: np.ndarray
    rescale_params: tuple | None = None
    columns: tuple = field(default=("y", "x", "z"))

    def __post_init__(self):
        rec = np.asarray(self.records, dtype=float)
        if rec.ndim != 2 or rec.shape[1] != 3:
            raise DataError(f"records must have shape (n, 3), got {rec.shape}")
        if rec.shape[0] == 0:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(rec)):
            raise DataError("dataset contains non-finite values")
        if rec.min() < 0.0 or rec.max() > 1.0:
            raise DataError("dataset records must lie in [0, 1]^3; rescale first")
        rec = rec.copy()
        rec.setflags(write=False)
        object.__setattr__(self, "records", rec)

    def __len__(self):
        return self.records.shape[0]

    @property
    def y(self):
        return self.records[:, 0]

    @property
    def x(self):
        return self.records[:, 1]

    @property
    def z(self):
        return self.records[:, 2]

    def to_raw(self) -> np.ndarray:
        """Invert the affine rescaling."""
        if self.rescale_params is None:
            return self.records.copy()
        lo = np.array([p[0] for p in self.rescale_params])
        hi = np.array([p[1] for p in self.rescale_params])
        return lo + self.records * (hi - lo)


def rescale(raw) -> Dataset:
    """Map each axis affinely so that its minimum goes to 0 and maximum to 1."""
    arr = np.asarray(raw, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"expected (y, x, z) triples, got array of shape {arr.shape}")
    if arr.shape[0] < 2:
        raise DataError("rescaling needs at least 2 records")
    if not np.all(np.isfinite(arr)):
        raise DataError("input contains non-finite values")
    lo = arr.min(axis=0)
    hi = arr.max(axis=0)
    for name, a, b in zip("yxz", lo, hi):
        if a == b:
            raise DegenerateAxisError(f"axis {name!r} is constant ({a}); cannot rescale")
    scaled = (arr - lo) / (hi - lo)
    # guard against 1 + eps from rounding
    scaled = np.clip(scaled, 0.0, 1.0)
    params = tuple((float(a), float(b)) for a, b in zip(lo, hi))
    return Dataset(scaled, params)


def read_csv(path, columns=("y", "x", "z"), already_scaled=None) -> Dataset:
    """Load a dataset from a CSV file with a header row.

    ``columns`` names the outcome, treatment and instrument columns in that
    order. Data lying outside [0, 1] is always rescaled; data inside is kept
    as is unless ``already_scaled`` is False.
    """
    path = FsPath(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; header is {reader.fieldnames}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in columns])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    arr = np.asarray(rows, dtype=float).reshape(-1, 3)
    if arr.shape[0] == 0:
        raise DataError(f"{path}: no data rows")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")
    in_unit = arr.min() >= 0.0 and arr.max() <= 1.0
    if already_scaled is None:
        already_scaled = in_unit
    if already_scaled:
        return Dataset(arr)
    return rescale(arr)


def write_csv(dataset: Dataset, path) -> None:
    path = FsPath(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "x", "z"])
        for y, x, z in dataset.records:
            w.writerow([repr(float(y)), repr(float(x)), repr(float(z))])
