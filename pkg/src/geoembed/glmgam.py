"""Poisson regression with offsets via IRLS, plus a tensor-product spline
smoother as the geographic baseline.

Spline columns may carry a ridge penalty; its weight is chosen by
generalized cross-validation over a grid, standing in for the restricted
maximum likelihood machinery of full GAM packages. Effective degrees of
freedom are the trace of the penalized fit's influence matrix, so an
unpenalized fit reports exactly its column count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

MAX_IRLS_ITER = 100
LOGLIK_TOL = 1e-10


class RankDeficient(ValueError):
    """Design columns are collinear; offenders listed in the message."""

    def __init__(self, columns: list[str]):
        super().__init__(f"collinear design columns: {columns}")
        self.columns = columns


class NonConvergence(RuntimeError):
    """IRLS failed to converge (possible separation); carries the log."""

    def __init__(self, message: str, iteration_log: list[tuple[int, float]]):
        super().__init__(message)
        self.iteration_log = iteration_log


class DegenerateExtent(ValueError):
    """Zero-width coordinate range cannot support a spline basis."""


@dataclass
class DesignMatrix:
    """Named columns, log-exposure offsets, and the penalized spline block."""

    names: list[str]
    X: np.ndarray
    offset: np.ndarray | None = None
    spline_cols: slice | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        n, p = self.X.shape
        if len(self.names) != p:
            raise ValueError(f"{len(self.names)} names for {p} columns")
        if len(set(self.names)) != p:
            raise ValueError("duplicate column names")
        if self.offset is None:
            self.offset = np.zeros(n)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.offset)):
            raise ValueError("non-finite design entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass
class GlmFit:
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    train_deviance: float
    edof: float
    p_values: np.ndarray
    penalty_lambda: float
    n_iter: int
    iteration_log: list[tuple[int, float]] = field(default_factory=list)

    def predict_mu(self, design: DesignMatrix) -> np.ndarray:
        return np.exp(design.X @ self.coef + design.offset)


def deviance(y: np.ndarray, mu: np.ndarray) -> float:
    """Poisson deviance 2*sum(y*ln(y/mu) - (y - mu)), with y*ln(y/mu) = 0
    at y = 0."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(np.where(y > 0, y / mu, 1.0)), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


def test_deviance(fit: GlmFit, design: DesignMatrix, y: np.ndarray) -> float:
    return deviance(y, fit.predict_mu(design))


def wald_pvalues(fit: GlmFit) -> np.ndarray:
    return fit.p_values


def _pvalues(coef: np.ndarray, cov: np.ndarray) -> np.ndarray:
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(coef) / se, np.inf)
    z = np.where(coef == 0.0, 0.0, z)
    return np.array([math.erfc(v / math.sqrt(2.0)) if np.isfinite(v) else 0.0 for v in z])


def _check_rank(design: DesignMatrix, penalized: bool) -> None:
    from scipy.linalg import qr

    if penalized and design.spline_cols is not None:
        keep = [j for j in range(design.p) if not (design.spline_cols.start <= j < design.spline_cols.stop)]
        X = design.X[:, keep]
        names = [design.names[j] for j in keep]
    else:
        X = design.X
        names = design.names
    if X.shape[1] == 0:
        return
    _, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0.0:
        raise RankDeficient(names)
    bad = diag < diag[0] * 1e-10
    if np.any(bad):
        raise RankDeficient([names[piv[j]] for j in np.flatnonzero(bad)])


def _penalty_matrix(design: DesignMatrix, lam: float, penalty_block: np.ndarray | None) -> np.ndarray:
    P = np.zeros((design.p, design.p))
    if lam > 0.0 and design.spline_cols is not None:
        s = design.spline_cols
        block = penalty_block if penalty_block is not None else np.eye(s.stop - s.start)
        P[s, s] = lam * block
    return P


def fit_poisson(
    design: DesignMatrix,
    y: np.ndarray,
    penalty_lambda: float = 0.0,
    penalty_block: np.ndarray | None = None,
) -> GlmFit:
    """Poisson log-link fit by iteratively reweighted least squares.

    The penalized log-likelihood is maximized with step-halving whenever a
    Newton step would decrease it; convergence is a change below 1e-10 (or
    a parameter step at machine precision). Covariance is the inverse
    penalized Fisher information and edof the trace of the influence matrix.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("responses must be nonnegative integer counts")
    if penalty_lambda == 0.0 and design.n < design.p:
        raise ValueError(f"n = {design.n} rows for p = {design.p} columns")
    _check_rank(design, penalized=penalty_lambda > 0.0)

    X, offset = design.X, design.offset
    P = _penalty_matrix(design, penalty_lambda, penalty_block)

    def penalized_loglik(beta: np.ndarray) -> float:
        eta = X @ beta + offset
        return float(np.sum(y * eta - np.exp(eta)) - 0.5 * beta @ P @ beta)

    beta = np.zeros(design.p)
    mu0 = max(float(np.mean(y)), 1e-8) / max(float(np.mean(np.exp(offset))), 1e-300)
    intercept_cols = [j for j, n in enumerate(design.names) if n == "intercept"]
    if intercept_cols:
        beta[intercept_cols[0]] = math.log(mu0)

    ll = penalized_loglik(beta)
    log: list[tuple[int, float]] = [(0, ll)]
    converged = False
    n_iter = 0
    for it in range(1, MAX_IRLS_ITER + 1):
        n_iter = it
        eta = X @ beta + offset
        if np.max(np.abs(eta)) > 500:
            raise NonConvergence(
                "linear predictor diverged (possible separation)", log
            )
        mu = np.exp(eta)
        W = mu
        z = (eta - offset) + (y - mu) / mu
        XtW = X.T * W
        A = XtW @ X + P
        b = XtW @ z
        try:
            beta_new = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            raise NonConvergence("singular weighted information matrix", log) from None
        # Step-halve while the penalized likelihood would decrease.
        step = beta_new - beta
        ll_new = penalized_loglik(beta_new)
        halvings = 0
        while (not np.isfinite(ll_new) or ll_new < ll - 1e-12) and halvings < 30:
            step *= 0.5
            beta_new = beta + step
            ll_new = penalized_loglik(beta_new)
            halvings += 1
        log.append((it, ll_new))
        delta = abs(ll_new - ll)
        max_step = float(np.max(np.abs(beta_new - beta))) if design.p else 0.0
        beta, ll = beta_new, ll_new
        if delta < LOGLIK_TOL or max_step < 1e-12:
            converged = True
            break
    if not converged:
        raise NonConvergence(
            f"IRLS did not converge in {MAX_IRLS_ITER} iterations", log
        )
    eta = X @ beta + offset
    if penalty_lambda == 0.0 and np.max(np.abs(eta)) > 25.0:
        # Likelihood went numerically flat with a diverging linear predictor:
        # a fitted rate below e^-25 (or above e^25) means quasi-separation.
        raise NonConvergence(
            "separation suspected: linear predictor reached "
            f"{np.max(np.abs(eta)):.1f} in magnitude", log
        )

    mu = np.exp(X @ beta + offset)
    XtW = X.T * mu
    fisher = XtW @ X
    A = fisher + P
    cov = np.linalg.inv(A)
    edof = float(np.trace(cov @ fisher))
    return GlmFit(
        names=list(design.names),
        coef=beta,
        cov=cov,
        train_deviance=deviance(y, mu),
        edof=edof,
        p_values=_pvalues(beta, cov),
        penalty_lambda=penalty_lambda,
        n_iter=n_iter,
        iteration_log=log,
    )


# ---------------------------------------------------------------------------
# Tensor-product spline basis


@dataclass
class SplineBasis:
    """Cubic tensor-product B-spline columns over a coordinate bounding box.

    k knots per axis span [min, max] uniformly (clamped cubic ends), giving
    k + 2 marginal basis functions and (k + 2)**2 tensor columns. Points
    outside the box clamp to the boundary.
    """

    k: int
    knots_x: np.ndarray
    knots_y: np.ndarray
    names: list[str]

    @property
    def n_columns(self) -> int:
        return len(self.names)

    def penalty(self) -> np.ndarray:
        return np.eye(self.n_columns)

    def _marginal(self, values: np.ndarray, knots: np.ndarray) -> np.ndarray:
        t = np.concatenate([[knots[0]] * 3, knots, [knots[-1]] * 3])
        clipped = np.clip(values, knots[0], knots[-1])
        return BSpline.design_matrix(clipped, t, 3).toarray()

    def evaluate(self, coords: np.ndarray) -> np.ndarray:
        """Tensor columns for (n, 2) planar coordinates."""
        coords = np.asarray(coords, dtype=np.float64)
        if self.k == 0:
            return np.zeros((coords.shape[0], 0))
        bx = self._marginal(coords[:, 0], self.knots_x)
        by = self._marginal(coords[:, 1], self.knots_y)
        n = coords.shape[0]
        return np.einsum("ni,nj->nij", bx, by).reshape(n, -1)


def spline_basis(coords: np.ndarray, k: int) -> SplineBasis:
    """Fit the knot layout to the data bounding box; k = 0 means no spline
    columns (pure GLM)."""
    coords = np.asarray(coords, dtype=np.float64)
    if k == 0:
        return SplineBasis(k=0, knots_x=np.zeros(0), knots_y=np.zeros(0), names=[])
    if k < 2:
        raise ValueError("k must be 0 or >= 2 knots per axis")
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    if lo[0] == hi[0] or lo[1] == hi[1]:
        raise DegenerateExtent(f"coordinate extent collapsed: {lo} .. {hi}")
    knots_x = np.linspace(lo[0], hi[0], k)
    knots_y = np.linspace(lo[1], hi[1], k)
    m = k + 2
    names = [f"spl_{i}_{j}" for i in range(m) for j in range(m)]
    return SplineBasis(k=k, knots_x=knots_x, knots_y=knots_y, names=names)


def select_lambda(
    design: DesignMatrix,
    y: np.ndarray,
    lambdas,
    penalty_block: np.ndarray | None = None,
) -> tuple[float, list[dict]]:
    """Pick the ridge weight minimizing GCV = n*D / (n - edof)**2."""
    lambdas = list(lambdas)
    if not lambdas:
        raise ValueError("empty lambda grid")
    records = []
    for lam in lambdas:
        fit = fit_poisson(design, y, penalty_lambda=lam, penalty_block=penalty_block)
        denom = (design.n - fit.edof) ** 2
        gcv = math.inf if denom <= 0 else design.n * fit.train_deviance / denom
        records.append({"lambda": lam, "gcv": gcv, "edof": fit.edof,
                        "deviance": fit.train_deviance})
    best = min(records, key=lambda r: r["gcv"])
    return best["lambda"], records
