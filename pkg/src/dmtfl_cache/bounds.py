"""Numerical evaluation of the generalisation bound

    theta <= theta_hat + 2 R + H P + H B eps

and Monte-Carlo checks of its coverage.

The Rademacher term is the empirical (data-conditional) complexity. Its inner
supremum over the model class is approximated by the best of ``S`` random
feasible model sets plus any supplied trained models; for a fixed model set
the supremum over alpha is exact (per row, the best column). The estimate is
therefore a lower estimate of the true complexity.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import GenConfig, _drop_first, popularity_profiles, synth_window_counts
from .domain import AlphaMatrix, BsDataset, HyperParams, MixtureWeights
from .numerics import EpsCover, build_eps_cover, project_capped_simplex
from .objective import (
    LossConfig,
    as_models,
    loss_terms,
    loss_matrix,
    penalty_P,
    weighted_from_losses,
)

CSV_FIELDS = ("theta_hat", "rademacher", "penalty", "cover_term", "total",
              "H", "delta", "epsilon", "cover_size", "m")


@dataclass(frozen=True)
class BoundReport:
    theta_hat: float
    rademacher: float
    penalty: float
    cover_term: float
    total: float
    H: float
    delta: float
    epsilon: float
    cover_size: int
    m: tuple

    @classmethod
    def from_parts(cls, theta_hat, rademacher, penalty, cover_term, H, delta, epsilon, cover_size, m):
        parts = [float(theta_hat), float(rademacher), float(penalty), float(cover_term)]
        if not all(math.isfinite(p) for p in parts):
            raise FloatingPointError(f"non-finite bound component in {parts}")
        total = parts[0] + 2.0 * parts[1] + parts[2] + parts[3]
        return cls(*parts, total, float(H), float(delta), float(epsilon), int(cover_size),
                   tuple(int(x) for x in m))

    def csv_row(self) -> list:
        d = asdict(self)
        d["m"] = " ".join(str(x) for x in self.m)
        return [d[k] if isinstance(d[k], str) else repr(d[k]) for k in CSV_FIELDS]


def write_bound_csv(path, reports: Sequence[BoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CSV_FIELDS)
        for r in reports:
            out.writerow(r.csv_row())


def read_bound_csv(path) -> list[BoundReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(BoundReport(
            float(r["theta_hat"]), float(r["rademacher"]), float(r["penalty"]), float(r["cover_term"]),
            float(r["total"]), float(r["H"]), float(r["delta"]), float(r["epsilon"]),
            int(r["cover_size"]), tuple(int(x) for x in r["m"].split())))
    return out


def capped_simplex_sampler(n_bs: int, n_tiles: int, C: float) -> Callable:
    """Random feasible model sets: uniform noise projected onto the cache polytope."""
    def draw(rng: np.random.Generator) -> np.ndarray:
        raw = rng.random((n_bs, n_tiles)) * (2.0 * C / n_tiles)
        return np.stack([project_capped_simplex(r, C) for r in raw])
    return draw


def _per_sample_losses(phi, d: BsDataset, loss: LossConfig) -> np.ndarray:
    terms, _ = loss_terms(phi, d.X, d.Y, loss)
    return terms.sum(axis=1)


def _row_sups(datasets, model_sets, K, rng, loss):
    """``M[k, s, b] = max_i (1/m_b) sum_j sigma_{k,b,i,j} l(phi_{s,i}; z_{b,j})``."""
    B = len(datasets)
    S = len(model_sets)
    M = np.empty((K, S, B))
    for b, d in enumerate(datasets):
        # losses of every candidate model on BS b's samples: (S, B, m_b)
        Lb = np.stack([[_per_sample_losses(P[i], d, loss) for i in range(B)] for P in model_sets])
        sigma = rng.choice(np.array([-1.0, 1.0]), size=(K, B, d.size))
        c = np.einsum("kij,sij->ksi", sigma, Lb) / d.size
        M[:, :, b] = c.max(axis=2)
    return M


def _candidate_sets(datasets, sampler, S, rng, extra_models):
    sets = [np.asarray(sampler(rng), dtype=float) for _ in range(S)]
    for P in extra_models or ():
        sets.append(as_models(P))
    if not sets:
        raise ValueError("empty model class")
    return sets


def rademacher_draws(datasets: Sequence[BsDataset], centers, sampler: Callable, K: int, seed: int,
                     S: int = 64, loss: LossConfig | None = None, extra_models=None) -> np.ndarray:
    """Per-draw suprema, shape ``(K, n_centers)``. Sigma draws are shared
    across centers."""
    if K < 1:
        raise ValueError("K must be >= 1")
    loss = LossConfig() if loss is None else loss
    rng = np.random.default_rng(seed)
    sets = _candidate_sets(datasets, sampler, S, rng, extra_models)
    M = _row_sups(datasets, sets, K, rng, loss)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    out = np.empty((K, centers.shape[0]))
    for start in range(0, centers.shape[0], 2048):
        block = centers[start:start + 2048]
        out[:, start:start + 2048] = np.einsum("ksb,db->ksd", M, block).max(axis=1)
    return out


def mc_rademacher(datasets, w, model_class_sampler: Callable, K: int, seed: int, S: int = 64,
                  loss: LossConfig | None = None, extra_models=None, return_se: bool = False):
    """Monte-Carlo empirical Rademacher complexity at mixture ``w``."""
    w = w.w if isinstance(w, MixtureWeights) else np.asarray(w, dtype=float)
    r = rademacher_draws(datasets, w[None, :], model_class_sampler, K, seed, S, loss, extra_models)[:, 0]
    est = float(r.mean())
    if return_se:
        return est, float(r.std(ddof=1) / math.sqrt(K)) if K > 1 else math.inf
    return est


def max_rademacher_over_cover(cover: EpsCover, datasets, model_class_sampler: Callable, K: int, seed: int,
                              S: int = 64, loss: LossConfig | None = None, extra_models=None) -> float:
    """Largest Monte-Carlo complexity over the cover centers (shared sigma)."""
    if cover.size < 1:
        raise ValueError("empty cover")
    r = rademacher_draws(datasets, cover.centers, model_class_sampler, K, seed, S, loss, extra_models)
    return float(r.mean(axis=0).max())


def evaluate_bound(models, w, alpha, datasets: Sequence[BsDataset], v, hp: HyperParams,
                   K: int = 100, S: int = 64, sampler: Optional[Callable] = None,
                   cover: Optional[EpsCover] = None, seed: Optional[int] = None) -> BoundReport:
    """Assemble the four terms of the bound for the given models and weights."""
    loss = LossConfig(hp.e_floor, hp.H, hp.predictor)
    P = as_models(models)
    B, F = P.shape
    w_arr = w.w if isinstance(w, MixtureWeights) else np.asarray(w, dtype=float)
    A = alpha.alpha if isinstance(alpha, AlphaMatrix) else np.asarray(alpha, dtype=float)
    cover = build_eps_cover(B, hp.eps_cover, hp.w_box) if cover is None else cover
    sampler = capped_simplex_sampler(B, F, hp.cache_budget) if sampler is None else sampler
    m = [d.size for d in datasets]
    theta = weighted_from_losses(w_arr, A, loss_matrix(P, datasets, loss))
    rad = max_rademacher_over_cover(cover, datasets, sampler, K, hp.seed if seed is None else seed, S,
                                    loss, extra_models=[P])
    pen = hp.H * penalty_P(w_arr, A, v, m, hp.H, hp.delta, cover.size)
    return BoundReport.from_parts(theta, rad, pen, hp.H * B * cover.epsilon, hp.H, hp.delta,
                                  cover.epsilon, cover.size, m)


class SyntheticSource:
    """A fixed synthetic distribution: per-BS popularity profiles drawn once,
    then any number of independent datasets drawn from them."""

    def __init__(self, cfg: GenConfig):
        self.cfg = cfg
        self.profiles = popularity_profiles(cfg, np.random.default_rng(cfg.seed))

    def __call__(self, rng: np.random.Generator, sizes: Sequence[int]) -> list[BsDataset]:
        counts = synth_window_counts(self.cfg, self.profiles, list(sizes), rng)
        return [_drop_first(b, c, self.cfg.features) for b, c in enumerate(counts)]


@dataclass
class CoverageResult:
    fraction: float             # trials where true theta <= bound
    violations: int
    trials: int
    bounds: np.ndarray
    true_theta: np.ndarray
    reports: list = field(default_factory=list)
    mutated_fraction: float = math.nan   # same trials, every slack term zeroed

    @property
    def violation_rate(self) -> float:
        return self.violations / self.trials


def _default_trainer(datasets, hp):
    from .dmtfl import run_dmtfl

    r = run_dmtfl(datasets, hp)
    return r.phi, r.weights, r.alpha, r.discrepancy


def coverage_trial(generator: Callable, hp: HyperParams, trials: int, sizes: Sequence[int] = (200, 200),
                   seed: int = 0, holdout_factor: int = 50, mutate: bool = False, K: int = 50, S: int = 16,
                   trainer: Optional[Callable] = None, threads: int = 1) -> CoverageResult:
    """Fraction of trials in which the bound holds for freshly trained models.

    Each trial draws datasets of the given sizes, trains (DMTFL by default),
    evaluates the bound at the trained models and mixture, and estimates the
    true weighted loss on an independent sample ``holdout_factor`` times
    larger. ``mutate=True`` drops every slack term, leaving the bare
    empirical loss, which must fail far more often.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    trainer = _default_trainer if trainer is None else trainer
    B = len(sizes)
    cover = build_eps_cover(B, hp.eps_cover, hp.w_box)
    loss = LossConfig(hp.e_floor, hp.H, hp.predictor)
    seeds = np.random.SeedSequence(seed).spawn(trials)

    def one(ss):
        rng = np.random.default_rng(ss)
        train = generator(rng, sizes)
        held = generator(rng, [holdout_factor * s for s in sizes])
        P, w, A, V = trainer(train, hp)
        rep = evaluate_bound(P, w, A, train, V, hp, K=K, S=S, cover=cover,
                             seed=int(rng.integers(2**31)))
        w_arr = w.w if isinstance(w, MixtureWeights) else np.asarray(w, dtype=float)
        A_arr = A.alpha if isinstance(A, AlphaMatrix) else np.asarray(A, dtype=float)
        true = weighted_from_losses(w_arr, A_arr, loss_matrix(P, held, loss))
        return rep, true

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(ss) for ss in seeds]
    reports = [r for r, _ in results]
    true = np.array([t for _, t in results])
    bound = np.array([r.theta_hat if mutate else r.total for r in reports])
    ok = true <= bound
    bare = true <= np.array([r.theta_hat for r in reports])
    return CoverageResult(float(ok.mean()), int((~ok).sum()), trials, bound, true, reports,
                          float(bare.mean()))
