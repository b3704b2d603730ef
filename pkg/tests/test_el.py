import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from tetel import _engine
from tetel.data import LongitudinalDataset
from tetel.el import (
    InfeasibleMomentsError,
    LinearHypothesis,
    MomentMatrix,
    TestKind,
    adjusted_moment_matrix,
    aetel_objective,
    fit,
    goodness_of_fit,
    lr_test,
    moment_matrix_from_rows,
    sandwich_covariance,
    solve_dual,
)
from tetel.moments import (
    MeanSpec,
    gee_model,
    independent_components,
    type1_moments,
    type2_moments,
    type3_moments,
)

from .conftest import small_dataset
from .oracles import adjusted_rows, nested_grid_argmin, tilted_criterion_primal


@pytest.fixture
def tiny():
    """5 subjects, 2 time points, one covariate; two moments (r = 2, p = 1)."""
    rng = np.random.default_rng(7)
    X = rng.standard_normal((5, 2, 1)) + 1.0
    y = 0.8 * X[..., 0] + rng.standard_normal((5, 2))
    data = LongitudinalDataset(y, X, [1.0, 2.0])
    model = type1_moments(MeanSpec(1), [np.eye(2), np.array([[1.0, 0.0], [0.0, 0.0]])])
    return model, data


@pytest.mark.parametrize("theta", [0.2, 0.6, 0.8, 1.1])
def test_objective_matches_convex_program(tiny, theta):
    model, data = tiny
    rows = model.evaluate_all(data, np.array([theta]))
    ref = tilted_criterion_primal(adjusted_rows(rows))
    assert abs(aetel_objective(model, data, [theta]) - ref) < 1e-6


def test_fit_matches_grid_search(tiny):
    model, data = tiny
    est = fit(model, data)
    assert est.converged
    ref = nested_grid_argmin(lambda t: aetel_objective(model, data, [t]), -3.0, 4.0)
    assert round(est.theta[0], 3) == round(ref, 3) or abs(est.theta[0] - ref) < 5e-4
    assert est.objective == pytest.approx(aetel_objective(model, data, est.theta), abs=1e-10)


def test_dual_first_order_conditions(dataset, spec2):
    model = type2_moments(spec2, dataset.max_m)
    sol = solve_dual(adjusted_moment_matrix(model, dataset, np.array([0.9, 0.4])))
    assert sol.converged and sol.feasible
    p = sol.probabilities
    rows = adjusted_moment_matrix(model, dataset, np.array([0.9, 0.4])).rows
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert_allclose(rows.T @ p, 0.0, atol=1e-8)
    # exponential-tilting form of the weights
    s = rows @ sol.tilt
    assert_allclose(p, np.exp(s) / np.exp(s).sum(), rtol=1e-9)


def test_gradient_matches_finite_differences(dataset, spec2):
    model = type2_moments(spec2, dataset.max_m)
    mom = model.affine_parts(dataset)
    off, slope = _engine.with_adjustment(mom.offset[None], mom.slope[None])
    theta = np.array([[0.7, 0.3]])
    rows = _engine.rows_at(off, slope, theta)
    d = _engine.solve_dual_batch(rows)
    grad, _ = _engine.gradient_and_metric(rows, slope, d.lam, d.logp)
    h = 1e-6
    fd = []
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fp = aetel_objective(model, dataset, theta[0] + e)
        fm = aetel_objective(model, dataset, theta[0] - e)
        fd.append((fp - fm) / (2 * h))
    assert_allclose(grad[0], fd, rtol=1e-5, atol=1e-9)


def test_unadjusted_infeasibility_detected():
    # every row has a positive first coordinate: the origin is outside the hull
    rows = np.array([[1.0, 0.2], [2.0, -0.5], [0.5, 1.0], [1.5, 0.3]])
    sol = solve_dual(moment_matrix_from_rows(rows, adjusted=False))
    assert not sol.feasible and math.isinf(sol.objective)
    adj = solve_dual(moment_matrix_from_rows(rows, adjusted=True))
    assert adj.feasible and adj.converged and np.isfinite(adj.objective)


def test_aetel_objective_raises_on_empty_hull():
    X = np.ones((4, 1, 1))
    data = LongitudinalDataset(np.array([[1.0], [2.0], [3.0], [4.0]]), X, [1.0])
    model = type3_moments(MeanSpec(1))
    with pytest.raises(InfeasibleMomentsError):
        aetel_objective(model, data, [-10.0], adjusted=False)
    assert aetel_objective(model, data, [-10.0]) > 0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 25), r=st.integers(1, 4),
       shift=st.floats(-5.0, 5.0))
def test_adjusted_criterion_nonnegative_and_feasible(seed, n, r, shift):
    rows = np.random.default_rng(seed).standard_normal((n, r)) + shift
    sol = solve_dual(moment_matrix_from_rows(rows, adjusted=True))
    assert sol.feasible and sol.converged
    assert sol.objective >= 0.0


def test_objective_zero_when_rows_balanced():
    rows = np.array([[1.0, -1.0], [-1.0, 1.0], [2.0, 0.5], [-2.0, -0.5]])
    assert solve_dual(moment_matrix_from_rows(rows)).objective == pytest.approx(0.0, abs=1e-14)


def test_lr_nonnegative_and_zero_at_self_hypothesis(dataset, spec2):
    model = type2_moments(spec2, dataset.max_m)
    est = fit(model, dataset)
    self_h = LinearHypothesis(np.array([[0.0, 1.0]]), est.theta[1:])
    res = lr_test(model, dataset, self_h)
    assert res.statistic == pytest.approx(0.0, abs=1e-7)
    assert res.p_value == pytest.approx(1.0, abs=1e-3)
    res0 = lr_test(model, dataset, LinearHypothesis.coefficients(2, 1, 0.0))
    assert res0.statistic > 0 and res0.kind is TestKind.LR_AETEL and res0.df == 1
    assert lr_test(model, dataset, LinearHypothesis.coefficients(2, 1), adjusted=False).kind is TestKind.LR_ETEL


def test_lr_nonnegative_over_random_hypotheses(dataset, spec2):
    model = type2_moments(spec2, dataset.max_m)
    for b in np.linspace(-0.5, 1.5, 9):
        res = lr_test(model, dataset, LinearHypothesis.coefficients(2, 1, b))
        assert res.statistic >= 0


def test_just_identified_fit_is_gee_root(dataset, spec2):
    model = gee_model(dataset, spec2, "exchangeable")
    est = fit(model, dataset)
    mom = model.affine_parts(dataset)
    root = np.linalg.solve(mom.slope.sum(0), mom.offset.sum(0))
    assert_allclose(est.theta, root, atol=1e-8)
    assert est.objective == pytest.approx(0.0, abs=1e-12)


def test_constrained_fit_satisfies_hypothesis(dataset, spec2):
    model = type2_moments(spec2, dataset.max_m)
    H = LinearHypothesis(np.array([[1.0, 1.0]]), [1.0])
    est = fit(model, dataset, H)
    assert_allclose(H.residual(est.theta), 0.0, atol=1e-12)
    assert est.objective >= fit(model, dataset).objective - 1e-12


def test_goodness_of_fit_statistic(dataset, spec2):
    model = type2_moments(spec2, dataset.max_m)
    res = goodness_of_fit(model, dataset)
    est = res.extra["estimate"]
    assert res.kind is TestKind.LR_GF
    assert res.df == model.affine_parts(dataset).independent().r - model.p
    assert res.statistic == pytest.approx(2 * (dataset.n + 1) * est.objective)
    with pytest.raises(ValueError):
        goodness_of_fit(type3_moments(spec2), dataset)


def test_sandwich_matches_formula(rng):
    # two random covariates and no intercept, so no moment component is redundant
    X = rng.standard_normal((40, 3, 2))
    y = X @ np.array([1.0, 0.5]) + rng.standard_normal((40, 3))
    data = LongitudinalDataset(y, X, [1.0, 2.0, 3.0])
    model = type2_moments(MeanSpec(2), 3)
    est = fit(model, data)
    mom = model.affine_parts(data)
    g = mom.rows(est.theta)
    V = g.T @ g / data.n
    D = -mom.slope.mean(axis=0)
    ref = np.linalg.inv(D.T @ np.linalg.solve(V, D))
    assert_allclose(sandwich_covariance(model, data, est.theta), ref, rtol=1e-8)
    assert_allclose(est.covariance, ref / data.n, rtol=1e-6)


def test_redundant_moments_are_dropped(dataset, spec2):
    # with an intercept column the intercept products x_is (y_ij - mu_ij) repeat across s
    model = type2_moments(spec2, dataset.max_m)
    mom = model.affine_parts(dataset)
    keep = independent_components(mom.offset, mom.slope)
    assert model.r == 12 and keep.size == 9
    res = goodness_of_fit(model, dataset)
    assert res.df == 9 - 2
    est = fit(model, dataset)
    assert est.covariance is not None and np.all(np.isfinite(est.standard_errors))
    # dropping redundant components leaves the criterion unchanged
    reduced = mom.independent()
    rows_full = moment_matrix_from_rows(mom.rows(est.theta))
    rows_red = moment_matrix_from_rows(reduced.rows(est.theta))
    assert solve_dual(rows_full).objective == pytest.approx(solve_dual(rows_red).objective, abs=1e-10)


def test_hypothesis_validation():
    with pytest.raises(ValueError):
        LinearHypothesis(np.array([[1.0, 0.0], [2.0, 0.0]]), [0.0, 0.0])
    with pytest.raises(ValueError):
        LinearHypothesis(np.array([[1.0, 0.0]]), [0.0, 1.0])


def test_dimension_errors(dataset, spec2):
    model = type3_moments(spec2)
    with pytest.raises(ValueError):
        aetel_objective(model, dataset, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fit(model, dataset, LinearHypothesis.coefficients(3, 0))


def test_batched_minimizer_agrees_with_single_fits():
    rng = np.random.default_rng(3)
    model = type2_moments(MeanSpec(2), 3)
    sets = [small_dataset(rng, n=25) for _ in range(4)]
    parts = [model.affine_parts(d) for d in sets]
    off = np.stack([p.offset for p in parts])
    slope = np.stack([p.slope for p in parts])
    off, slope = _engine.with_adjustment(off, slope)
    res = _engine.minimize_batch(off, slope)
    for k, d in enumerate(sets):
        assert_allclose(res.theta[k], fit(model, d).theta, atol=1e-6)
