"""Comparison methods trained with the same loss, data and cache budget as
DMTFL: FedAvg, FedProx and a global popularity heuristic."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import BsDataset
from .numerics import project_capped_simplex
from .objective import DEFAULT_LOSS, LossConfig, empirical_loss_grad


@dataclass(frozen=True, eq=False)
class GlobalModel:
    """One cache vector shared by every base station."""

    phi: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 1 or np.any(phi < -1e-12) or np.any(phi > 1 + 1e-12):
            raise ValueError("global model entries must lie in [0, 1]")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)


def _check(datasets, rounds, C):
    if not datasets:
        raise ValueError("need at least one dataset")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    F = datasets[0].n_tiles
    if any(d.n_tiles != F for d in datasets):
        raise ValueError("datasets disagree on tile count")
    if not 1 <= C <= F:
        raise ValueError(f"cache budget {C} outside [1, {F}]")
    return F


def _local_update(phi_g, d, eta, steps, C, loss, mu_prox):
    # Intermediate local iterates are projected; the last one is left for the
    # server projection, so one local step reproduces plain projected GD.
    phi = phi_g
    for s in range(steps):
        if s > 0:
            phi = project_capped_simplex(phi, C)
        _, g = empirical_loss_grad(phi, d, loss)
        if mu_prox == 0.0:
            phi = phi - eta * g
        else:
            # linearised loss, exact proximal term: stable for any mu_prox
            phi = (phi / eta + mu_prox * phi_g - g) / (1.0 / eta + mu_prox)
    return phi


def _federate(datasets, rounds, eta, local_steps, C, loss, mu_prox, history):
    F = _check(datasets, rounds, C)
    if local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    m = np.array([d.size for d in datasets], dtype=float)
    share = m / m.sum()
    phi_g = np.full(F, C / F)
    for _ in range(rounds):
        local = [_local_update(phi_g, d, eta, local_steps, C, loss, mu_prox) for d in datasets]
        # weighted mean written as an offset from the first local model, so
        # identical local models average to exactly that model
        agg = local[0]
        for b in range(1, len(local)):
            agg = agg + share[b] * (local[b] - local[0])
        phi_g = project_capped_simplex(agg, C)
        if history is not None:
            history.append(phi_g)
    return GlobalModel(np.clip(phi_g, 0.0, 1.0))


def fedavg(datasets: Sequence[BsDataset], rounds: int, eta: float, local_steps: int = 1, C: float = 1.0,
           loss: LossConfig = DEFAULT_LOSS, history: list | None = None) -> GlobalModel:
    """Local gradient steps from the global model, ``m_b``-weighted average,
    projection onto the cache polytope."""
    return _federate(datasets, rounds, eta, local_steps, C, loss, 0.0, history)


def fedprox(datasets: Sequence[BsDataset], rounds: int, eta: float, local_steps: int = 1,
            mu_prox: float = 0.01, C: float = 1.0, loss: LossConfig = DEFAULT_LOSS,
            history: list | None = None) -> GlobalModel:
    """FedAvg whose local objective adds ``mu_prox/2 * ||phi - phi_global||^2``."""
    if mu_prox < 0:
        raise ValueError("mu_prox must be nonnegative")
    return _federate(datasets, rounds, eta, local_steps, C, loss, float(mu_prox), history)


def top_c(scores, C: int) -> np.ndarray:
    """Indices of the ``C`` largest scores, ties to the lowest index, sorted."""
    scores = np.asarray(scores, dtype=float)
    C = int(C)
    if not 0 <= C <= scores.size:
        raise ValueError(f"cannot pick {C} of {scores.size} tiles")
    return np.sort(np.argsort(-scores, kind="stable")[:C])


def heuristic_popular(datasets: Sequence[BsDataset], C: int) -> frozenset:
    """The ``C`` tiles with the highest total normalised demand over all BSs."""
    if not datasets:
        raise ValueError("need at least one dataset")
    total = np.zeros(datasets[0].n_tiles)
    for d in datasets:
        total = total + np.sort(d.Y, axis=0).sum(axis=0)  # sorted: order-free sum
    return frozenset(int(f) for f in top_c(total, C))
