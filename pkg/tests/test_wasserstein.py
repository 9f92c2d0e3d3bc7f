import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from sfal.wasserstein import equalize, solve_assignment, w1, w1_exact_1d, w1_exact_assignment


def brute_force(a, b):
    cost = np.linalg.norm(a[:, None] - b[None], axis=2)
    return min(cost[np.arange(len(a)), list(p)].mean() for p in itertools.permutations(range(len(a))))


def test_1d_examples():
    assert w1_exact_1d([0.3, 1.0], [1.0, 0.3]) == 0.0
    assert w1_exact_1d([0.0, 1.0], [1.0, 2.0]) == 1.0
    assert w1_exact_1d([0.0, 0.0], [-1.0, 1.0]) == 1.0


def test_empty_and_unequal_inputs():
    with pytest.raises(ValueError):
        w1_exact_1d([], [])
    with pytest.raises(ValueError):
        w1_exact_1d([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        w1_exact_assignment(np.zeros((513, 1)), np.zeros((513, 1)))


def test_single_point():
    assert w1_exact_assignment([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0


def test_triangle_configuration_against_permutations():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.1, 0.9], [1.1, 0.1], [-0.2, 0.0]])
    assert w1_exact_assignment(a, b) == brute_force(a, b)


def test_random_small_cases_against_permutations():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = rng.integers(1, 7)
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        assert w1_exact_assignment(a, b) == pytest.approx(brute_force(a, b), abs=1e-12)


def test_assignment_matches_scipy():
    rng = np.random.default_rng(1)
    for n in (5, 40, 120):
        c = rng.random((n, n))
        ours = solve_assignment(c)
        r, col = linear_sum_assignment(c)
        assert c[np.arange(n), ours].sum() == pytest.approx(c[r, col].sum(), abs=1e-10)
        assert sorted(ours) == list(range(n))


def test_assignment_agrees_with_sorted_formula():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=128), rng.normal(1.0, 2.0, size=128)
    assert w1_exact_assignment(a, b) == pytest.approx(w1_exact_1d(a, b), abs=1e-9)


def test_equalize_subsamples_to_common_size():
    rng = np.random.default_rng(3)
    a, b = equalize(np.arange(10.0), np.arange(4.0), rng)
    assert len(a) == len(b) == 4
    assert len(set(a.tolist())) == 4


def test_dispatcher_dimension():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(600, 2)), rng.normal(size=(600, 2))
    assert w1(a, b, np.random.default_rng(0)) > 0
    assert w1(a[:, 0], a[:, 0]) == 0.0
