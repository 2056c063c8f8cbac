import itertools

import numpy as np
import pytest

from conftest import random_dataset
from dmtfl_cache.discrepancy import (DiscrepancyMatrix, delta, estimate_discrepancy, subgrad_delta,
                                     subgrad_from)
from dmtfl_cache.domain import BsDataset, DimensionError
from dmtfl_cache.objective import LossConfig, empirical_loss

CACHED = LossConfig(predictor="cached")


def test_matrix_validation():
    with pytest.raises(ValueError):
        DiscrepancyMatrix([[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        DiscrepancyMatrix([[0.1, 0.0], [0.0, 0.0]])
    with pytest.raises(DimensionError):
        DiscrepancyMatrix(np.zeros((2, 3)))


def test_symmetrise_by_max():
    v = DiscrepancyMatrix.from_estimates([[5.0, 0.2], [0.7, 3.0]])
    assert np.array_equal(v.v, [[0.0, 0.7], [0.7, 0.0]])


def test_delta_examples(rng):
    d1 = random_dataset(rng, 3, 4, 0)
    d2 = random_dataset(rng, 3, 4, 1)
    phi = rng.random(4)
    assert delta(phi, d1, d1) == 0.0
    assert delta(phi, d1, d2) == delta(phi, d2, d1)


def test_delta_by_hand():
    a = BsDataset(0, [[1.0]], [[0.1]])
    b = BsDataset(1, [[1.0]], [[0.3]])
    want = abs(0.5 * np.log10(0.16) - 0.5 * np.log10(0.04))
    assert delta([0.5], a, b) == pytest.approx(want, abs=1e-14)


def test_subgrad_identical_is_zero(rng):
    d = random_dataset(rng, 3, 4)
    g = subgrad_delta(rng.random(4), d, d)
    assert np.array_equal(g, np.zeros(4))


def test_subgrad_tie_takes_negated_branch():
    gb, gi = np.array([1.0, 2.0]), np.array([0.5, 0.0])
    assert np.array_equal(subgrad_from(1.0, gb, 1.0, gi), -(gb - gi))
    assert np.array_equal(subgrad_from(2.0, gb, 1.0, gi), gb - gi)


def test_subgrad_matches_fd_and_antisymmetry(rng):
    for _ in range(20):
        d1 = random_dataset(rng, 4, 3, 0)
        d2 = random_dataset(rng, 4, 3, 1)
        phi = rng.uniform(0.1, 0.9, 3)
        if abs(empirical_loss(phi, d1) - empirical_loss(phi, d2)) < 1e-3:
            continue
        g = subgrad_delta(phi, d1, d2)
        h = 1e-6
        num = np.array([(delta(phi + h * e, d1, d2) - delta(phi - h * e, d1, d2)) / (2 * h) for e in np.eye(3)])
        assert np.allclose(g, num, rtol=1e-4, atol=1e-6)
        # |L_b - L_i| is symmetric, so swapping the datasets keeps the
        # subgradient; flipping only the branch negates it
        assert np.array_equal(subgrad_delta(phi, d2, d1), g)
        lb, gb = empirical_loss(phi, d1), g
        assert np.array_equal(subgrad_from(lb, gb, lb + 1.0, 0 * gb), -subgrad_from(lb + 1.0, gb, lb, 0 * gb))


def test_estimate_identical_is_exact_zero(rng):
    d = random_dataset(rng, 5, 4)
    for n in (1, 5, 20):
        v, _ = estimate_discrepancy(d, d, 0.1, n, np.full(4, 0.25), 1.0)
        assert v == 0.0


def test_estimate_includes_start(rng):
    d1 = random_dataset(rng, 3, 4, 0)
    d2 = random_dataset(rng, 3, 4, 1)
    phi0 = np.full(4, 0.5)
    v, phi = estimate_discrepancy(d1, d2, 0.05, 1, phi0, 2.0)
    assert v >= delta(phi0, d1, d2)
    assert np.array_equal(phi, phi0)


def test_running_max_non_decreasing(rng):
    d1 = random_dataset(rng, 4, 5, 0)
    d2 = random_dataset(rng, 4, 5, 1)
    trace = []
    v, phi = estimate_discrepancy(d1, d2, 0.05, 15, np.full(5, 0.4), 2.0, trace=trace)
    running = np.maximum.accumulate(trace)
    assert np.all(np.diff(running) >= 0)
    assert v == max(trace) == delta(phi, d1, d2)
    assert v <= 6.0 * 5


def grid_sup(d1, d2, C, loss):
    best = 0.0
    for a in np.arange(0, 1.0001, 0.01):
        phi = np.array([a, C - a])
        if phi[1] < -1e-12 or phi[1] > 1 + 1e-12:
            continue
        best = max(best, delta(np.clip(phi, 0, 1), d1, d2, loss))
    return best


def test_estimate_close_to_grid_sup_cached():
    # with the indicator predictor delta is |linear| in phi, so ascent from
    # any start reaches the maximising vertex
    rng = np.random.default_rng(3)
    for _ in range(50):
        d1 = random_dataset(rng, 2, 2, 0)
        d2 = random_dataset(rng, 2, 2, 1)
        sup = grid_sup(d1, d2, 1.0, CACHED)
        v, _ = estimate_discrepancy(d1, d2, 2.0, 100, np.array([0.5, 0.5]), 1.0, CACHED)
        assert abs(v - sup) <= 0.05 * sup + 1e-12


def test_estimate_bilinear_is_local():
    # the bilinear loss has sharp dips where phi * x = y; ascent reports a
    # local maximum that never exceeds the loss range
    rng = np.random.default_rng(3)
    for _ in range(10):
        d1 = random_dataset(rng, 2, 2, 0)
        d2 = random_dataset(rng, 2, 2, 1)
        phi0 = np.array([0.5, 0.5])
        v, phi = estimate_discrepancy(d1, d2, 0.5, 50, phi0, 1.0)
        assert delta(phi0, d1, d2) <= v <= 6.0 * 2
        assert v == delta(phi, d1, d2)


def test_estimate_argument_checks(rng):
    d = random_dataset(rng, 2, 2)
    with pytest.raises(ValueError):
        estimate_discrepancy(d, d, 0.1, 0, [0.5, 0.5], 1.0)
    with pytest.raises(ValueError):
        estimate_discrepancy(d, d, 0.0, 3, [0.5, 0.5], 1.0)
