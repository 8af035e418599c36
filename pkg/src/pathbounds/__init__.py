"""Bounds on counterfactual functionals in IV models from sampled response paths."""

from .assembly import FunctionalSpec
from .boundsloop import BoundsTrace, SolveConfig, nested_restriction_check, run
from .condcdf import CdfField, cdf_field, cond_cdf, cv_bandwidth
from .errors import (CapacityError, ConfigError, DataError, NumericError, OutputError,
                     PathBoundsError)
from .pathkit import BasisSpec, Path, PathPair, sample_paths
from .qpsolve import QpProblem, QpSolution, project_capped_simplex, solve
from .simgen import GpSpec, simulate
from .unitgrid import Dataset, Grid, custom_grid, dyadic_grid, read_csv, rescale, write_csv

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "BoundsTrace", "CapacityError", "CdfField", "ConfigError", "DataError", "Dataset",
    "FunctionalSpec", "GpSpec", "Grid", "NumericError", "OutputError", "Path", "PathBoundsError",
    "PathPair", "QpProblem", "QpSolution", "SolveConfig", "cdf_field", "cond_cdf", "custom_grid",
    "cv_bandwidth", "dyadic_grid", "nested_restriction_check", "project_capped_simplex", "read_csv",
    "rescale", "run", "sample_paths", "simulate", "solve", "write_csv",
]
