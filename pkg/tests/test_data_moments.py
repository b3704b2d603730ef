import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tetel.data import LongitudinalDataset, Subject
from tetel.moments import (
    MeanSpec,
    WorkingCorrelation,
    full_type1_moments,
    gee_model,
    type2_moments,
    type3_moments,
    working_correlation,
)

from .conftest import small_dataset


def test_from_subjects_pads_with_zeros():
    s1 = Subject([1.0, 2.0, 3.0], np.ones((3, 1)), [1, 2, 3])
    s2 = Subject([4.0], [[1.0]], [2])
    data = LongitudinalDataset.from_subjects([s1, s2])
    assert data.n == 2 and data.q == 1 and data.max_m == 3
    assert_array_equal(data.sizes, [3, 1])
    assert_array_equal(data.y, [[1, 2, 3], [4, 0, 0]])
    assert not data.balanced
    assert data.subject(1).m == 1


def test_dataset_validation():
    with pytest.raises(ValueError):
        Subject([1.0, 2.0], np.ones((2, 1)), [2, 1])
    with pytest.raises(ValueError):
        LongitudinalDataset(np.array([[np.nan, 1.0]]), np.ones((1, 2, 1)), [1, 2])
    data = small_dataset(np.random.default_rng(0))
    with pytest.raises(ValueError):
        data.y[0, 0] = 5.0


def test_working_correlations():
    assert_allclose(working_correlation("independence", 0.0, 3), np.eye(3))
    ex = working_correlation("exchangeable", 0.3, 3)
    assert_allclose(ex, 0.7 * np.eye(3) + 0.3)
    ar = working_correlation("ar1", 0.5, 3)
    assert_allclose(ar[0], [1.0, 0.5, 0.25])
    assert_allclose(WorkingCorrelation("ar1", 0.5).matrix(3), ar)
    with pytest.raises(ValueError):
        gee_model(small_dataset(np.random.default_rng(0)), MeanSpec(2), "exchangeable", alpha=-0.9)


def test_moment_shapes(dataset, spec2):
    m = dataset.max_m
    assert type2_moments(spec2, m).r == 2 * m * (m + 1) // 2
    assert full_type1_moments(spec2, m).r == 2 * m * m
    assert type3_moments(spec2).r == 2
    assert gee_model(dataset, spec2).r == 2
    rows = type2_moments(spec2, m).evaluate_all(dataset, np.zeros(2))
    assert rows.shape == (dataset.n, 2 * m * (m + 1) // 2)


def test_type2_diagonal_blocks_sum_to_type3(dataset, spec2):
    m = dataset.max_m
    theta = np.array([0.3, -0.2])
    t2 = type2_moments(spec2, m).evaluate_all(dataset, theta).reshape(dataset.n, -1, 2)
    # blocks are ordered by j then s >= j, so the s == j blocks sit at these positions
    diag = [sum(m - k for k in range(j)) for j in range(m)]
    assert_allclose(t2[:, diag].sum(axis=1), type3_moments(spec2).evaluate_all(dataset, theta), atol=1e-12)


def test_evaluate_matches_direct_formula(dataset, spec2):
    theta = np.array([0.5, 1.5])
    W = 0.8 * np.eye(3) + 0.2
    model = gee_model(dataset, spec2, WorkingCorrelation("exchangeable", 0.2))
    rows = model.evaluate_all(dataset, theta)
    for i in (0, 7):
        s = dataset.subject(i)
        direct = s.X.T @ np.linalg.solve(model.working[2] * W, s.y - s.X @ theta)
        assert_allclose(rows[i], direct, rtol=1e-10)
        assert_allclose(model.evaluate(s, theta), direct, rtol=1e-10)


def test_type2_requires_balanced(spec2):
    s1 = Subject([1.0, 2.0], np.ones((2, 2)), [1, 2])
    s2 = Subject([1.0], np.ones((1, 2)), [1])
    data = LongitudinalDataset.from_subjects([s1, s2])
    with pytest.raises(ValueError):
        type2_moments(spec2, 2).evaluate_all(data, np.zeros(2))
