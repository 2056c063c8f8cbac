import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from dmtfl_cache.baselines import GlobalModel, fedavg, fedprox, heuristic_popular, top_c
from dmtfl_cache.domain import BsDataset
from dmtfl_cache.numerics import project_capped_simplex
from dmtfl_cache.objective import LossConfig, empirical_loss_grad

CACHED = LossConfig(predictor="cached")


def pgd(d, rounds, eta, C, loss):
    phi = np.full(d.n_tiles, C / d.n_tiles)
    path = []
    for _ in range(rounds):
        phi = project_capped_simplex(phi - eta * empirical_loss_grad(phi, d, loss)[1], C)
        path.append(phi)
    return path


@pytest.mark.parametrize("loss", [LossConfig(), CACHED], ids=["bilinear", "cached"])
def test_fedavg_single_bs_is_pgd(rng, loss):
    d = random_dataset(rng, 10, 6)
    hist = []
    fedavg([d], 15, 0.05, 1, 2.0, loss, history=hist)
    for a, b in zip(hist, pgd(d, 15, 0.05, 2.0, loss)):
        assert np.array_equal(a, b)


def test_fedavg_identical_datasets(rng):
    d = random_dataset(rng, 10, 6)
    copies = [BsDataset(b, d.X, d.Y) for b in range(3)]
    one, many = [], []
    fedavg([d], 10, 0.05, 2, 2.0, history=one)
    fedavg(copies, 10, 0.05, 2, 2.0, history=many)
    assert all(np.array_equal(a, b) for a, b in zip(one, many))


def test_fedavg_one_round_by_hand(rng):
    d1 = random_dataset(rng, 4, 5, 0)
    d2 = random_dataset(rng, 12, 5, 1)
    C, eta = 2.0, 0.1
    phi = np.full(5, C / 5)
    m1 = phi - eta * empirical_loss_grad(phi, d1)[1]
    m2 = phi - eta * empirical_loss_grad(phi, d2)[1]
    want = project_capped_simplex(0.25 * m1 + 0.75 * m2, C)
    got = fedavg([d1, d2], 1, eta, 1, C)
    assert np.allclose(got.phi, want, atol=1e-12)


def test_fedprox_zero_mu_is_fedavg(rng):
    data = [random_dataset(rng, 8, 6, b) for b in range(3)]
    for steps in (1, 3):
        a, b = [], []
        fedavg(data, 12, 0.05, steps, 2.0, history=a)
        fedprox(data, 12, 0.05, steps, 0.0, 2.0, history=b)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_fedprox_large_mu_pins(rng):
    data = [random_dataset(rng, 8, 6, b) for b in range(2)]
    hist = []
    fedprox(data, 10, 0.05, 5, 1e6, 2.0, history=hist)
    start = np.full(6, 2.0 / 6)
    for prev, cur in zip([start] + hist[:-1], hist):
        assert np.abs(cur - prev).max() <= 1e-3


def test_fedprox_one_step_by_hand(rng):
    data = [random_dataset(rng, 6, 4, b) for b in range(2)]
    C, eta, mu = 1.0, 0.1, 0.5
    phi = np.full(4, 0.25)
    local = [(phi / eta + mu * phi - empirical_loss_grad(phi, d)[1]) / (1 / eta + mu) for d in data]
    want = project_capped_simplex(0.5 * local[0] + 0.5 * local[1], C)
    assert np.allclose(fedprox(data, 1, eta, 1, mu, C).phi, want, atol=1e-12)


def test_budget_respected(rng):
    data = [random_dataset(rng, 8, 6, b) for b in range(2)]
    for g in (fedavg(data, 5, 0.1, 2, 3.0), fedprox(data, 5, 0.1, 2, 0.1, 3.0)):
        assert isinstance(g, GlobalModel)
        assert abs(g.phi.sum() - 3.0) < 1e-9 and np.all((g.phi >= 0) & (g.phi <= 1))


def test_argument_checks(rng):
    data = [random_dataset(rng, 4, 3)]
    with pytest.raises(ValueError):
        fedavg(data, 0, 0.1, 1, 1.0)
    with pytest.raises(ValueError):
        fedprox(data, 1, 0.1, 1, -1.0, 1.0)
    with pytest.raises(ValueError):
        fedavg(data, 1, 0.1, 1, 4.0)
    with pytest.raises(ValueError):
        heuristic_popular(data, 4)


def test_heuristic_examples():
    Y = np.zeros((3, 4))
    Y[:, 2] = 1.0
    d = BsDataset(0, np.zeros((3, 4)), Y)
    assert heuristic_popular([d], 1) == {2}
    u = BsDataset(0, np.zeros((2, 4)), np.full((2, 4), 0.5))
    assert heuristic_popular([u], 2) == {0, 1}


def test_heuristic_brute_force(rng):
    for _ in range(20):
        data = [BsDataset(b, np.zeros((5, 6)), rng.integers(0, 3, (5, 6)) / 2) for b in range(2)]
        C = int(rng.integers(1, 6))
        total = {f: sum(float(d.Y[j, f]) for d in data for j in range(d.size)) for f in range(6)}
        want = sorted(total, key=lambda f: (-total[f], f))[:C]
        assert heuristic_popular(data, C) == set(want)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_heuristic_order_invariant(seed):
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, 7, 5)
    perm = rng.permutation(7)
    shuffled = BsDataset(0, d.X[perm], d.Y[perm])
    assert heuristic_popular([d], 3) == heuristic_popular([shuffled], 3)


def test_top_c_ties():
    assert list(top_c([0.2, 0.9, 0.9, 0.1], 2)) == [1, 2]
    assert list(top_c([0.5, 0.5, 0.5], 1)) == [0]
