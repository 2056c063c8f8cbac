import math

import numpy as np
import pytest

from dmtfl_cache.bounds import (BoundReport, SyntheticSource, capped_simplex_sampler, coverage_trial,
                                evaluate_bound, max_rademacher_over_cover, mc_rademacher,
                                rademacher_draws, read_bound_csv, write_bound_csv)
from dmtfl_cache.data import GenConfig, synth_noniid
from dmtfl_cache.domain import AlphaMatrix, BsDataset, HyperParams, MixtureWeights, TileGrid
from dmtfl_cache.numerics import EpsCover, build_eps_cover
from dmtfl_cache.objective import LossConfig, loss_matrix, penalty_P, weighted_from_losses

from conftest import random_dataset

LOSS = LossConfig()


def tiny(rng, B=2, m=6, F=3):
    return [random_dataset(rng, m, F, bs_id=b) for b in range(B)]


def fixed_sampler(P):
    P = np.asarray(P, dtype=float)
    return lambda rng: P


def brute_rademacher(datasets, w, sets, sigma):
    """Direct evaluation of the definition for one sigma draw and an explicit
    list of model sets, with the alpha sup taken over the simplex vertices."""
    B = len(datasets)
    best = -math.inf
    for P in sets:
        total = 0.0
        for b, d in enumerate(datasets):
            row = []
            for i in range(B):
                ls = [float(np.sum(P[i] * np.log10(np.maximum((np.clip(P[i] * x, 0, 1) - y) ** 2, 1e-6))
                                   .clip(-6, 6))) for x, y in zip(d.X, d.Y)]
                row.append(np.dot(sigma[b][i], ls) / d.size)
            total += w[b] * max(row)
        best = max(best, total)
    return best


def test_zero_loss_class_gives_zero(rng):
    ds = tiny(rng)
    z = np.zeros((2, 3))
    assert mc_rademacher(ds, np.array([0.5, 0.5]), fixed_sampler(z), K=20, seed=0, S=3) == 0.0


def test_singleton_class_concentrates():
    H = 6.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d = random_dataset(rng, 10_000, 1)
        est = mc_rademacher([d], np.array([1.0]), fixed_sampler([[1.0]]), K=20, seed=seed, S=1)
        assert abs(est) <= 0.02 * H


def test_matches_definition_by_brute_force(rng):
    ds = tiny(rng, B=2, m=5, F=2)
    sets = [np.array([[0.3, 0.7], [1.0, 0.0]]), np.array([[0.5, 0.5], [0.2, 0.8]])]
    it = iter(sets)
    sampler = lambda r: next(it)
    w = np.array([0.3, 0.7])
    K, seed = 4, 11
    got = rademacher_draws(ds, w[None, :], sampler, K, seed, S=2, loss=LOSS)[:, 0]
    # replay the generator: the sampler consumes nothing, sigma draws follow per BS
    r = np.random.default_rng(seed)
    sig = [r.choice(np.array([-1.0, 1.0]), size=(K, 2, d.size)) for d in ds]
    for k in range(K):
        assert got[k] == pytest.approx(brute_rademacher(ds, w, sets, [sig[b][k] for b in range(2)]), abs=1e-12)


def test_long_run_mean_within_three_se(rng):
    ds = tiny(rng, B=2, m=4, F=2)
    # a fixed class of eight model sets, so sigma is the only randomness
    r = np.random.default_rng(5)
    draw = capped_simplex_sampler(2, 2, 1.0)
    sets = [draw(r) for _ in range(8)]
    calls = []

    def sampler(_):
        calls.append(None)
        return sets[(len(calls) - 1) % 8]

    w = np.array([0.5, 0.5])
    long_run = mc_rademacher(ds, w, sampler, K=200_000, seed=1, S=8)
    est, se = mc_rademacher(ds, w, sampler, K=1000, seed=2, S=8, return_se=True)
    one = mc_rademacher(ds, w, sampler, K=1, seed=3, S=8)
    assert abs(est - long_run) <= 3 * se
    assert math.isfinite(one)


def test_nonnegative_bias_with_zero_model(rng):
    ds = tiny(rng)
    sampler = capped_simplex_sampler(2, 3, 1.0)
    est, se = mc_rademacher(ds, np.array([0.5, 0.5]), sampler, K=200, seed=1, S=8,
                            extra_models=[np.zeros((2, 3))], return_se=True)
    assert est >= -3 * se


def test_single_center_cover_equals_mc(rng):
    ds = tiny(rng)
    sampler = capped_simplex_sampler(2, 3, 1.0)
    w = np.array([0.25, 0.75])
    cover = EpsCover(np.array([w]), 0.1)
    a = max_rademacher_over_cover(cover, ds, sampler, K=50, seed=4, S=8)
    assert a == mc_rademacher(ds, w, sampler, K=50, seed=4, S=8)


def test_adding_center_never_decreases(rng):
    ds = tiny(rng)
    sampler = capped_simplex_sampler(2, 3, 1.0)
    full = build_eps_cover(2, 0.2)
    prev = -math.inf
    for k in range(1, full.size + 1):
        cur = max_rademacher_over_cover(EpsCover(full.centers[:k], full.epsilon), ds, sampler, K=30, seed=2, S=8)
        assert cur >= prev
        prev = cur


def test_cover_max_equals_exhaustive_centres(rng):
    ds = tiny(rng)
    sampler = capped_simplex_sampler(2, 3, 1.0)
    cover = build_eps_cover(2, 0.1)
    per = [mc_rademacher(ds, c, sampler, K=40, seed=8, S=8) for c in cover.centers]
    assert max_rademacher_over_cover(cover, ds, sampler, K=40, seed=8, S=8) == pytest.approx(max(per), abs=1e-12)


# -- reports

def test_degenerate_bound_is_theta_hat():
    r = BoundReport.from_parts(1.5, 0.0, 0.0, 0.0, 6, 0.1, 0.0, 1, (3, 3))
    assert r.total == 1.5


def test_non_finite_component_rejected():
    with pytest.raises(FloatingPointError):
        BoundReport.from_parts(1.0, math.nan, 0.0, 0.0, 6, 0.1, 0.1, 1, (1,))


def desk_instance():
    ds = synth_noniid(GenConfig(B=2, grid=TileGrid(4, 4), samples_per_bs=40, seed=2))
    rng = np.random.default_rng(0)
    P = np.stack([rng.dirichlet(np.ones(16)) for _ in range(2)])
    return ds, P


def test_cover_term_and_decomposition():
    ds, P = desk_instance()
    hp = HyperParams(H=6.0, eps_cover=0.1)
    w = MixtureWeights(np.array([0.4, 0.6]))
    A = AlphaMatrix(np.array([[0.7, 0.3], [0.2, 0.8]]))
    v = np.array([[0.0, 0.5], [0.5, 0.0]])
    rep = evaluate_bound(P, w, A, ds, v, hp, K=20, S=4)
    assert rep.cover_term == pytest.approx(1.2, abs=1e-12)
    assert rep.total == pytest.approx(rep.theta_hat + 2 * rep.rademacher + rep.penalty + rep.cover_term, abs=1e-9)
    # each part independently
    loss = LossConfig(hp.e_floor, hp.H, hp.predictor)
    assert rep.theta_hat == weighted_from_losses(w.w, A.alpha, loss_matrix(P, ds, loss))
    cover = build_eps_cover(2, 0.1)
    assert rep.penalty == pytest.approx(6.0 * penalty_P(w.w, A.alpha, v, [40, 40], 6.0, 0.1, cover.size))
    assert rep.rademacher == max_rademacher_over_cover(
        cover, ds, capped_simplex_sampler(2, 16, 1.0), 20, hp.seed, 4, loss, extra_models=[P])
    assert rep.cover_size == cover.size and rep.m == (40, 40)


def test_bound_csv_round_trip(tmp_path):
    ds, P = desk_instance()
    hp = HyperParams()
    reps = [evaluate_bound(P, np.array([0.5, 0.5]), np.eye(2), ds, np.zeros((2, 2)), hp, K=5, S=2, seed=s)
            for s in range(3)]
    p = tmp_path / "b.csv"
    write_bound_csv(p, reps)
    assert read_bound_csv(p) == reps


# -- coverage

def zero_loss_trainer(datasets, hp):
    B, F = len(datasets), datasets[0].n_tiles
    return np.zeros((B, F)), MixtureWeights.uniform(B), AlphaMatrix.uniform(B), np.zeros((B, B))


def test_zero_loss_full_coverage():
    src = SyntheticSource(GenConfig(B=2, grid=TileGrid(3, 3), fov_deg=60.0, samples_per_bs=10, seed=1))
    res = coverage_trial(src, HyperParams(), trials=5, sizes=(20, 20), trainer=zero_loss_trainer,
                         holdout_factor=5, K=5, S=2)
    assert res.fraction == 1.0 and res.violations == 0
    assert np.all(res.true_theta == 0.0)


def test_coverage_deterministic_and_threaded():
    src = SyntheticSource(GenConfig(B=2, grid=TileGrid(3, 3), fov_deg=60.0, samples_per_bs=10, seed=1))
    hp = HyperParams(T=3)
    a = coverage_trial(src, hp, trials=3, sizes=(20, 20), holdout_factor=5, K=5, S=2, seed=3)
    b = coverage_trial(src, hp, trials=3, sizes=(20, 20), holdout_factor=5, K=5, S=2, seed=3, threads=3)
    assert np.array_equal(a.bounds, b.bounds) and np.array_equal(a.true_theta, b.true_theta)


def test_coverage_rejects_zero_trials():
    with pytest.raises(ValueError):
        coverage_trial(lambda r, s: None, HyperParams(), trials=0)
