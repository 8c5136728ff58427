import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otcs.ot_core import (CostKind, EmpiricalMeasure, KeypointSet, Mode, OtProblem, as_points, check_keypoint_masses,
                          cost, guiding_cost, js_divergence, keypoint_indices, mask, mask_matrix,
                          relation_vector, xi, xi_matrix)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def simplex(k):
    return arrays(float, k, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


def semi_problem(eps=0.1):
    kp = KeypointSet(np.array([[0.0], [10.0]]), np.array([[100.0], [110.0]]))
    return OtProblem(mode=Mode.SEMI_SUPERVISED, epsilon=eps, keypoints=kp)


# cost ---------------------------------------------------------------------------

def test_cost_examples():
    pr = OtProblem()
    assert cost(pr, [0, 0], [0, 0]) == 0
    assert cost(pr, [-4], [4]) == 64
    assert cost(OtProblem(cost_kind=CostKind.MEAN_SQUARED_L2), [0, 0], [3, 4]) == 12.5


def test_cost_dimension_mismatch():
    with pytest.raises(ValueError):
        cost(OtProblem(), [0, 0], [1])


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite))
def test_cost_properties(x, y):
    pr = OtProblem()
    assert cost(pr, x, y) >= 0
    assert cost(pr, x, x) == 0
    assert cost(pr, x, y) == cost(pr, y, x)


# relation vectors ----------------------------------------------------------------

def test_relation_vector_examples():
    assert relation_vector([3.0], [[1.0]], 0.1) == pytest.approx([1.0])
    assert relation_vector([0.0], [[-1.0], [1.0]], 0.1) == pytest.approx([0.5, 0.5])
    # costs (0, 0.1) at tau = 0.1 -> softmax(0, -1)
    r = relation_vector([0.0], [[0.0], [math.sqrt(0.1)]], 0.1)
    assert r == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_relation_vector_far_away_is_finite():
    r = relation_vector([1e3], [[0.0], [1.0]], 0.1)
    assert np.all(np.isfinite(r)) and r.sum() == pytest.approx(1.0)


@given(arrays(float, 2, elements=finite), arrays(float, (4, 2), elements=finite),
       st.floats(0.01, 10))
def test_relation_vector_on_simplex(z, keys, tau):
    r = relation_vector(z, keys, tau)
    assert abs(r.sum() - 1.0) <= 1e-9
    assert np.all(r >= 0)


def test_relation_vector_strictly_positive_for_moderate_costs():
    r = relation_vector([0.0, 0.0], [[0.5, 0.0], [0.0, 0.7], [-0.3, 0.2]], 0.1)
    assert np.all(r > 0)


# JS divergence -------------------------------------------------------------------

def test_js_examples():
    a = np.array([0.2, 0.8])
    assert js_divergence(a, a) == pytest.approx(0.0, abs=1e-15)
    assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-6)


@example(np.array([5e-324, 0, 0, 0, 1.0]), np.array([0, 0, 0, 0, 1.0]))   # subnormal entry
@given(simplex(5), simplex(5))
def test_js_properties(a, b):
    d = js_divergence(a, b)
    assert d == pytest.approx(js_divergence(b, a), abs=1e-12)
    assert -1e-15 <= d <= math.log(2) + 1e-12


@given(simplex(4))
def test_js_identity(a):
    assert js_divergence(a, a) <= 1e-12


# guiding cost, mask, xi -------------------------------------------------------

def test_guiding_cost_zero_at_keypoint_pair():
    pr = semi_problem()
    assert guiding_cost(pr, [0.0], [100.0]) == pytest.approx(0.0, abs=1e-12)
    assert guiding_cost(pr, [10.0], [110.0]) == pytest.approx(0.0, abs=1e-12)


def test_guiding_cost_approaches_ln2_for_crossed_points():
    pr = semi_problem()
    assert guiding_cost(pr, [0.0], [110.0]) == pytest.approx(math.log(2), abs=1e-6)


def test_guiding_cost_unsupervised_raises():
    with pytest.raises(ValueError):
        guiding_cost(OtProblem(), [0.0], [1.0])


def test_guiding_cost_role_symmetry():
    # swapping the two domains (and their keypoints) leaves g unchanged
    kp = KeypointSet(np.array([[0.0], [3.0]]), np.array([[5.0], [9.0]]))
    kp_swapped = KeypointSet(kp.target, kp.source)
    a = OtProblem(mode="semi_supervised", keypoints=kp)
    b = OtProblem(mode="semi_supervised", keypoints=kp_swapped)
    assert guiding_cost(a, [1.0], [6.5]) == pytest.approx(guiding_cost(b, [6.5], [1.0]), abs=1e-12)


def test_mask_examples():
    pr = semi_problem()
    p = EmpiricalMeasure(np.array([[0.0], [10.0], [5.0]]))
    q = EmpiricalMeasure(np.array([[100.0], [110.0], [105.0]]))
    assert mask(pr, p, q, 0, 0) == 1     # keypoint partners
    assert mask(pr, p, q, 0, 1) == 0     # keypoint with a non-partner keypoint
    assert mask(pr, p, q, 0, 2) == 0     # keypoint with a free point
    assert mask(pr, p, q, 2, 1) == 0
    assert mask(pr, p, q, 2, 2) == 1     # neither is a keypoint
    assert mask(OtProblem(), p, q, 0, 1) == 1


def test_mask_invariant_to_keypoint_order():
    src = np.array([[0.0], [10.0], [20.0]])
    tgt = np.array([[100.0], [110.0], [120.0]])
    X = np.array([[0.0], [10.0], [20.0], [5.0]])
    Y = np.array([[100.0], [110.0], [120.0], [105.0]])
    a = OtProblem(mode="semi_supervised", keypoints=KeypointSet(src, tgt))
    perm = [2, 0, 1]
    b = OtProblem(mode="semi_supervised", keypoints=KeypointSet(src[perm], tgt[perm]))
    assert np.array_equal(mask_matrix(a, X, Y), mask_matrix(b, X, Y))


def test_xi_delegates():
    assert xi(OtProblem(), [-4.0], [4.0]) == 64
    assert xi(semi_problem(), [0.0], [100.0]) == pytest.approx(0.0, abs=1e-12)


@given(arrays(float, (3, 2), elements=finite), arrays(float, (4, 2), elements=finite))
@settings(max_examples=30)
def test_unsupervised_mask_is_one_and_xi_is_cost(X, Y):
    pr = OtProblem()
    assert np.all(mask_matrix(pr, X, Y) == 1)
    for i in range(3):
        for j in range(4):
            assert xi_matrix(pr, X, Y)[i, j] == pytest.approx(cost(pr, X[i], Y[j]))


@given(arrays(float, (3, 1), elements=finite), arrays(float, (3, 1), elements=finite))
@settings(max_examples=30)
def test_xi_nonnegative(X, Y):
    assert np.all(xi_matrix(OtProblem(), X, Y) >= 0)
    assert np.all(xi_matrix(semi_problem(), X, Y) >= 0)


# types ---------------------------------------------------------------------------

def test_types_validate():
    with pytest.raises(ValueError):
        OtProblem(epsilon=0)
    with pytest.raises(ValueError):
        OtProblem(tau=-1)
    with pytest.raises(ValueError):
        OtProblem(mode="semi_supervised")
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 1)), np.array([0.3, 0.3]))
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        KeypointSet(np.array([[0.0], [0.0]]), np.array([[1.0], [2.0]]))
    assert as_points([1.0, 2.0, 3.0]).shape == (3, 1)
    assert as_points([1.0, 2.0], dim=2).shape == (1, 2)


def test_keypoint_mass_feasibility():
    pr = semi_problem()
    p = EmpiricalMeasure(np.array([[0.0], [10.0], [5.0]]), np.array([0.5, 0.25, 0.25]))
    q = EmpiricalMeasure(np.array([[100.0], [110.0], [105.0]]))
    assert keypoint_indices(pr, p, q).tolist() == [[0, 0], [1, 1]]
    with pytest.raises(ValueError, match="infeasible"):
        check_keypoint_masses(pr, p, q)
