import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from tetel.fdr import fdr_adjust

pvec = arrays(np.float64, st.integers(1, 40), elements=st.floats(0.0, 1.0))


def test_bh_hand_example():
    out = fdr_adjust([0.01, 0.04], "BH")
    assert_allclose(out.adjusted, [0.02, 0.04])


def test_by_hand_example():
    # harmonic factor for m = 2 is 1.5
    out = fdr_adjust([0.01, 0.04], "BY")
    assert_allclose(out.adjusted, [0.03, 0.06])


def test_step_up_takes_running_minimum():
    out = fdr_adjust([0.04, 0.03, 0.01], "BH")
    # sorted: .01*3/1=.03, .03*3/2=.045, .04*3/3=.04 -> min from the top: .03,.04,.04
    assert_allclose(out.adjusted, [0.04, 0.04, 0.03])


def test_reject_and_shape():
    p = np.array([[0.001, 0.2], [0.5, 0.01]])
    out = fdr_adjust(p, "BH")
    assert out.adjusted.shape == (2, 2)
    assert_array_equal(out.reject(0.05), [[True, False], [False, True]])


def test_bad_input():
    with pytest.raises(ValueError):
        fdr_adjust([0.1, 1.2])
    with pytest.raises(ValueError):
        fdr_adjust([0.1], "holm")
    with pytest.raises(ValueError):
        fdr_adjust([])


@settings(max_examples=150, deadline=None)
@given(p=pvec)
def test_monotone_and_bounded(p):
    for method in ("BH", "BY"):
        adj = fdr_adjust(p, method).adjusted
        assert np.all(adj >= p - 1e-15)
        assert np.all(adj <= 1.0)
        order = np.argsort(p, kind="stable")
        assert np.all(np.diff(adj[order]) >= -1e-15)


@settings(max_examples=100, deadline=None)
@given(p=pvec, data=st.data())
def test_permutation_equivariant(p, data):
    perm = np.array(data.draw(st.permutations(range(p.size))))
    a = fdr_adjust(p, "BY").adjusted
    b = fdr_adjust(p[perm], "BY").adjusted
    assert_allclose(b, a[perm])


@settings(max_examples=100, deadline=None)
@given(p=pvec)
def test_by_at_least_bh(p):
    assert np.all(fdr_adjust(p, "BY").adjusted >= fdr_adjust(p, "BH").adjusted - 1e-15)
