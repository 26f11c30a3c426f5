import math

import numpy as np
import pytest
from scipy import stats

from geoembed.glmgam import (
    DegenerateExtent,
    DesignMatrix,
    GlmFit,
    NonConvergence,
    RankDeficient,
    deviance,
    fit_poisson,
    select_lambda,
    spline_basis,
    test_deviance as holdout_deviance,
    wald_pvalues,
    _pvalues,
)


def newton_poisson_oracle(X, y, offset=None, tol=1e-12, max_iter=200):
    """Independent Newton maximizer of the exact Poisson log-likelihood."""
    n, p = X.shape
    offset = np.zeros(n) if offset is None else offset
    beta = np.zeros(p)
    for _ in range(max_iter):
        eta = X @ beta + offset
        mu = np.exp(eta)
        grad = X.T @ (y - mu)
        hess = X.T @ (X * mu[:, None])
        step = np.linalg.solve(hess, grad)
        # Backtracking on the exact log-likelihood.
        def loglik(b):
            e = X @ b + offset
            return np.sum(y * e - np.exp(e))
        t = 1.0
        base = loglik(beta)
        while loglik(beta + t * step) < base and t > 1e-8:
            t /= 2
        beta = beta + t * step
        if np.max(np.abs(grad)) < tol:
            break
    return beta


def _random_design(rng, n=60, p=3):
    X = np.column_stack([np.ones(n), rng.normal(scale=0.5, size=(n, p - 1))])
    offset = rng.uniform(-0.3, 0.3, size=n)
    beta_true = rng.normal(scale=0.4, size=p)
    y = rng.poisson(np.exp(X @ beta_true + offset))
    names = ["intercept"] + [f"x{j}" for j in range(1, p)]
    return DesignMatrix(names=names, X=X, offset=offset), y


# ---------------------------------------------------------------------------
# Closed forms


def test_intercept_only_is_log_mean():
    design = DesignMatrix(names=["intercept"], X=np.ones((3, 1)))
    fit = fit_poisson(design, np.array([2, 4, 6]))
    assert abs(fit.coef[0] - math.log(4.0)) < 1e-10


def test_offset_only_exposure_algebra():
    omega = np.array([0.5, 1.0, 2.0, 4.0])
    y = np.array([1, 2, 3, 8])
    design = DesignMatrix(names=["intercept"], X=np.ones((4, 1)), offset=np.log(omega))
    fit = fit_poisson(design, y)
    assert abs(fit.coef[0] - math.log(y.sum() / omega.sum())) < 1e-10
    mu = fit.predict_mu(design)
    assert np.allclose(mu, omega * math.exp(fit.coef[0]), rtol=1e-12)


def test_matches_newton_oracle_on_random_designs():
    rng = np.random.default_rng(12)
    for _ in range(20):
        design, y = _random_design(rng)
        fit = fit_poisson(design, y)
        oracle = newton_poisson_oracle(design.X, y, design.offset)
        assert np.max(np.abs(fit.coef - oracle)) < 1e-8


def test_score_equations_at_fixed_point():
    rng = np.random.default_rng(3)
    design, y = _random_design(rng, n=120, p=4)
    fit = fit_poisson(design, y)
    score = design.X.T @ (y - fit.predict_mu(design))
    assert np.max(np.abs(score)) < 1e-6


# ---------------------------------------------------------------------------
# Deviance


def test_deviance_zero_at_perfect_fit():
    y = np.array([1.0, 2.0, 3.0])
    assert deviance(y, y) == 0.0


def test_deviance_y_zero_limit():
    m = 1.7
    assert abs(deviance(np.zeros(4), np.full(4, m)) - 2 * m * 4) < 1e-12


def test_deviance_matches_termwise_oracle():
    rng = np.random.default_rng(7)
    y = rng.poisson(2.0, size=50).astype(float)
    mu = rng.uniform(0.5, 4.0, size=50)
    total = 0.0
    for yi, mi in zip(y, mu):
        term = yi * math.log(yi / mi) if yi > 0 else 0.0
        total += 2.0 * (term - (yi - mi))
    assert abs(deviance(y, mu) - total) < 1e-10


def test_deviance_invariant_to_row_order():
    rng = np.random.default_rng(8)
    y = rng.poisson(1.0, size=30).astype(float)
    mu = rng.uniform(0.2, 3.0, size=30)
    perm = rng.permutation(30)
    assert abs(deviance(y, mu) - deviance(y[perm], mu[perm])) < 1e-10


def test_test_deviance_applies_fit_to_holdout():
    rng = np.random.default_rng(9)
    design, y = _random_design(rng)
    fit = fit_poisson(design, y)
    y2 = rng.poisson(fit.predict_mu(design))
    assert abs(holdout_deviance(fit, design, y2) - deviance(y2, fit.predict_mu(design))) < 1e-10


# ---------------------------------------------------------------------------
# Wald p-values


def test_pvalue_of_zero_coefficient_is_one():
    p = _pvalues(np.array([0.0]), np.array([[0.04]]))
    assert p[0] == 1.0


def test_pvalue_at_1_96_sigma():
    p = _pvalues(np.array([1.96]), np.array([[1.0]]))
    assert abs(p[0] - 0.05) < 5e-4


def test_null_pvalues_are_uniform():
    # Monte-Carlo calibration: y independent of x1 -> its p-value ~ U(0,1).
    rng = np.random.default_rng(31)
    pvals = []
    for _ in range(200):
        n = 120
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.poisson(1.5, size=n)
        fit = fit_poisson(DesignMatrix(names=["intercept", "x1"], X=X), y)
        pvals.append(wald_pvalues(fit)[1])
    ks = stats.kstest(pvals, "uniform")
    assert ks.pvalue > 0.01


# ---------------------------------------------------------------------------
# Spline basis


def test_k_zero_means_no_spline_columns():
    basis = spline_basis(np.random.default_rng(0).uniform(size=(50, 2)), 0)
    assert basis.n_columns == 0
    assert basis.evaluate(np.zeros((7, 2))).shape == (7, 0)


def test_partition_of_unity():
    rng = np.random.default_rng(1)
    coords = rng.uniform(-3, 9, size=(200, 2))
    for k in (3, 5, 8):
        basis = spline_basis(coords, k)
        assert basis.n_columns == (k + 2) ** 2
        pts = rng.uniform(coords.min(0), coords.max(0), size=(1000, 2))
        sums = basis.evaluate(pts).sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) < 1e-9


def test_out_of_range_clamps_to_boundary():
    rng = np.random.default_rng(2)
    coords = rng.uniform(0, 1, size=(100, 2))
    basis = spline_basis(coords, 4)
    inside = basis.evaluate(np.array([[coords[:, 0].max(), coords[:, 1].max()]]))
    outside = basis.evaluate(np.array([[5.0, 5.0]]))
    assert np.allclose(inside, outside)


def test_degenerate_extent():
    coords = np.column_stack([np.full(10, 2.0), np.arange(10.0)])
    with pytest.raises(DegenerateExtent):
        spline_basis(coords, 3)


# ---------------------------------------------------------------------------
# Penalized fits, edof, GCV


def _spline_design(rng, n, k, smooth_signal):
    coords = rng.uniform(0, 10, size=(n, 2))
    basis = spline_basis(coords, k)
    cols = basis.evaluate(coords)
    X = np.column_stack([np.ones(n), cols])
    names = ["intercept"] + basis.names
    design = DesignMatrix(
        names=names, X=X, spline_cols=slice(1, 1 + cols.shape[1])
    )
    if smooth_signal:
        eta = 0.6 * np.sin(coords[:, 0]) + 0.6 * np.cos(coords[:, 1]) + 0.3
    else:
        eta = np.full(n, 0.3)
    y = rng.poisson(np.exp(eta))
    return design, y, basis


def test_unpenalized_edof_equals_column_count():
    rng = np.random.default_rng(5)
    design, y = _random_design(rng, n=100, p=4)
    fit = fit_poisson(design, y)
    assert abs(fit.edof - 4) < 1e-8


def test_penalty_reduces_edof():
    rng = np.random.default_rng(6)
    design, y, basis = _spline_design(rng, 400, 4, smooth_signal=True)
    free = fit_poisson(design, y, penalty_lambda=1e-9, penalty_block=basis.penalty())
    tight = fit_poisson(design, y, penalty_lambda=1e3, penalty_block=basis.penalty())
    assert tight.edof < free.edof
    assert tight.edof < design.p


def test_select_lambda_prefers_heavy_smoothing_on_noise():
    rng = np.random.default_rng(7)
    design, y, basis = _spline_design(rng, 500, 4, smooth_signal=False)
    grid = [1e-4, 1e-2, 1.0, 1e2, 1e4]
    lam, records = select_lambda(design, y, grid, penalty_block=basis.penalty())
    assert lam >= grid[-2]


def test_select_lambda_prefers_flexibility_on_structure():
    rng = np.random.default_rng(8)
    design, y, basis = _spline_design(rng, 2000, 5, smooth_signal=True)
    grid = [1e-4, 1e-2, 1.0, 1e2, 1e4]
    lam, _ = select_lambda(design, y, grid, penalty_block=basis.penalty())
    assert lam <= 1.0


def test_select_lambda_single_point_grid():
    rng = np.random.default_rng(9)
    design, y, basis = _spline_design(rng, 300, 3, smooth_signal=True)
    lam, records = select_lambda(design, y, [0.37], penalty_block=basis.penalty())
    assert lam == 0.37 and len(records) == 1


def test_nested_fit_never_increases_train_deviance():
    rng = np.random.default_rng(10)
    n = 200
    base_X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    extra = rng.normal(size=(n, 3))
    y = rng.poisson(np.exp(base_X @ np.array([0.2, 0.3, -0.2])))
    small = fit_poisson(DesignMatrix(names=["intercept", "a", "b"], X=base_X), y)
    big = fit_poisson(
        DesignMatrix(names=["intercept", "a", "b", "c", "d", "e"],
                     X=np.column_stack([base_X, extra])),
        y,
    )
    assert big.train_deviance <= small.train_deviance + 1e-8


# ---------------------------------------------------------------------------
# Errors


def test_rank_deficient_names_collinear_columns():
    n = 50
    x = np.random.default_rng(11).normal(size=n)
    X = np.column_stack([np.ones(n), x, 2.0 * x])
    design = DesignMatrix(names=["intercept", "x", "x_doubled"], X=X)
    with pytest.raises(RankDeficient) as err:
        fit_poisson(design, np.random.default_rng(0).poisson(1.0, size=n))
    assert "x_doubled" in err.value.columns or "x" in err.value.columns


def test_separation_raises_nonconvergence_with_log():
    # One group has only zero counts: its coefficient diverges to -inf.
    n = 40
    flag = np.zeros(n)
    flag[: n // 2] = 1.0
    y = np.zeros(n, dtype=int)
    y[n // 2 :] = np.random.default_rng(1).poisson(3.0, size=n // 2)
    design = DesignMatrix(names=["intercept", "flag"],
                          X=np.column_stack([np.ones(n), flag]))
    with pytest.raises(NonConvergence) as err:
        fit_poisson(design, y)
    assert len(err.value.iteration_log) > 1


def test_counts_must_be_nonnegative_integers():
    design = DesignMatrix(names=["intercept"], X=np.ones((3, 1)))
    with pytest.raises(ValueError):
        fit_poisson(design, np.array([1.5, 2.0, 3.0]))
    with pytest.raises(ValueError):
        fit_poisson(design, np.array([-1, 2, 3]))
