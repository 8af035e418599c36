"""Penalized QP over the capped simplex, solved by over-relaxed ADMM.

For sense ``s`` (+1 lower, -1 upper) the problem is

    min  (lam / 2) ||Theta mu - F||^2 + s * Xi' mu   s.t.  mu >= 0, sum(mu) <= 1

split as f(mu) + I_C(nu) with the constraint mu = nu.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DataError, NumericError

LOWER = "lower"
# rounding slack on the cap so projected points are fixed points
_SUM_SLACK = 1e-12
UPPER = "upper"


def project_capped_simplex(v):
    """Euclidean projection onto ``{mu >= 0, sum(mu) <= 1}``."""
    v = np.asarray(v, dtype=float)
    w = np.maximum(v, 0.0)
    if w.sum() <= 1.0 + _SUM_SLACK:
        return w
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / k > 0)
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


@dataclass(eq=False)
class QpProblem:
    theta: sp.spmatrix
    cdf: np.ndarray
    xi: np.ndarray
    lam: float
    sense: str = LOWER

    def __post_init__(self):
        if not sp.issparse(self.theta):
            self.theta = sp.csc_matrix(self.theta)
        self.cdf = np.asarray(self.cdf, dtype=float).ravel()
        self.xi = np.asarray(self.xi, dtype=float).ravel()
        m, p = self.theta.shape
        if self.cdf.size != m:
            raise DataError(f"CDF vector has {self.cdf.size} entries, matrix has {m} rows")
        if self.xi.size != p:
            raise DataError(f"objective vector has {self.xi.size} entries, matrix has {p} columns")
        if not self.lam > 0:
            raise DataError("penalty lambda must be positive")
        if self.sense not in (LOWER, UPPER):
            raise DataError(f"sense must be 'lower' or 'upper', got {self.sense!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.sense == LOWER else -1.0

    def objective(self, mu) -> float:
        """Full penalized objective, constant ``(lam/2) F'F`` included."""
        r = self.theta @ mu - self.cdf
        return 0.5 * self.lam * float(r @ r) + self.sign * float(self.xi @ mu)

    def residual_norm(self, mu) -> float:
        return float(np.linalg.norm(self.theta @ mu - self.cdf))


@dataclass
class QpSolution:
    weights: np.ndarray
    objective_value: float
    functional_value: float
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool


def _cg(apply, b, x0, tol, max_iter):
    """Plain conjugate gradients for an SPD operator, warm-started at x0."""
    x = x0.copy()
    r = b - apply(x)
    bnorm = np.linalg.norm(b)
    stop = tol * (bnorm if bnorm > 0 else 1.0)
    if np.linalg.norm(r) <= stop:
        return x
    p = r.copy()
    rs = r @ r
    for _ in range(max_iter):
        ap = apply(p)
        alpha = rs / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        if np.sqrt(rs_new) <= stop:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def solve(problem: QpProblem, rho: float = 250.0, zeta: float = 1.7, tol_primal: float = 1e-6,
          tol_dual: float = 1e-6, max_iter: int = 20_000, warm_start=None,
          cg_tol: float = 1e-8, cg_max_iter: int = 50, linear_solver: str = "cholesky") -> QpSolution:
    """Over-relaxed ADMM for the capped-simplex QP.

    The mu-step solves ``(lam * Theta' Theta + rho * I) mu = rhs``. With
    ``linear_solver="cg"`` this is a warm-started CG solve on the implicit
    operator (Theta only enters through sparse products); ``"cholesky"``
    factors the small columns-by-columns matrix once per call instead.

    ``tol_primal``/``tol_dual`` are relative: the stopping test is
    ``||mu - nu|| <= tol_primal * max(1, ||mu||, ||nu||)`` and
    ``rho ||nu - nu_prev|| <= tol_dual * max(1, ||rho u||)``.
    Returned weights are the projected iterate, hence exactly feasible.
    """
    if not rho > 0:
        raise DataError("rho must be positive")
    if not 0.0 < zeta < 2.0:
        raise DataError("over-relaxation zeta must lie in (0, 2)")
    theta = problem.theta.tocsc()
    theta_t = theta.T.tocsr()
    lam = problem.lam
    p = theta.shape[1]
    if p == 0:
        return QpSolution(np.zeros(0), problem.objective(np.zeros(0)), 0.0, 0, 0.0, 0.0, True)

    if linear_solver == "cg":
        def apply(v):
            return lam * (theta_t @ (theta @ v)) + rho * v

        def mu_step(rhs, x0):
            return _cg(apply, rhs, x0, cg_tol, cg_max_iter)
    elif linear_solver == "cholesky":
        gram = (theta_t @ theta).toarray() * lam
        gram[np.diag_indices_from(gram)] += rho
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)

        def mu_step(rhs, x0):
            return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    else:
        raise DataError(f"unknown linear solver {linear_solver!r}")

    q = lam * (theta_t @ problem.cdf) - problem.sign * problem.xi
    if warm_start is not None:
        nu = project_capped_simplex(np.asarray(warm_start, dtype=float))
        if nu.size != p:
            raise DataError("warm start has the wrong length")
    else:
        nu = np.zeros(p)
    mu = nu.copy()
    u = np.zeros(p)
    r_norm = s_norm = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = mu_step(q + rho * (nu - u), mu)
        mu_hat = zeta * mu + (1.0 - zeta) * nu
        nu_prev = nu
        nu = project_capped_simplex(mu_hat + u)
        u = u + mu_hat - nu
        r_norm = float(np.linalg.norm(mu - nu))
        s_norm = float(rho * np.linalg.norm(nu - nu_prev))
        if not (np.isfinite(r_norm) and np.isfinite(s_norm)):
            raise NumericError(f"ADMM diverged at iteration {it} (non-finite residuals)")
        eps_pri = tol_primal * max(1.0, np.linalg.norm(mu), np.linalg.norm(nu))
        eps_dual = tol_dual * max(1.0, rho * np.linalg.norm(u))
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break
    fval = float(problem.xi @ nu)
    return QpSolution(nu, problem.objective(nu), fval, it, r_norm, s_norm, converged)
