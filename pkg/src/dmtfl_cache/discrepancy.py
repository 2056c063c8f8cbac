"""Pairwise discrepancy estimates ``sup_phi |L_b(phi) - L_i(phi)|`` by projected
subgradient ascent."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import BsDataset, DimensionError
from .numerics import project_capped_simplex
from .objective import DEFAULT_LOSS, LossConfig, as_phi, empirical_loss, empirical_loss_grad


@dataclass(frozen=True, eq=False)
class DiscrepancyMatrix:
    v: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DimensionError(f"discrepancy matrix must be square, got {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("discrepancies must be finite and nonnegative")
        if np.any(np.diag(v) != 0):
            raise ValueError("self-discrepancy must be zero")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, n: int) -> "DiscrepancyMatrix":
        return cls(np.zeros((n, n)))

    @classmethod
    def from_estimates(cls, raw) -> "DiscrepancyMatrix":
        """Symmetrise one-sided estimates as ``max(v_bi, v_ib)``."""
        raw = np.asarray(raw, dtype=float)
        sym = np.maximum(raw, raw.T)
        np.fill_diagonal(sym, 0.0)
        return cls(sym)


def delta(phi, d_b: BsDataset, d_i: BsDataset, loss: LossConfig = DEFAULT_LOSS) -> float:
    return abs(empirical_loss(phi, d_b, loss) - empirical_loss(phi, d_i, loss))


def subgrad_from(loss_b, grad_b, loss_i, grad_i) -> np.ndarray:
    """Subgradient of ``|L_b - L_i|``; a tie takes the negated branch."""
    diff = np.asarray(grad_b) - np.asarray(grad_i)
    return diff if loss_b > loss_i else -diff


def subgrad_delta(phi, d_b: BsDataset, d_i: BsDataset, loss: LossConfig = DEFAULT_LOSS) -> np.ndarray:
    lb, gb = empirical_loss_grad(phi, d_b, loss)
    li, gi = empirical_loss_grad(phi, d_i, loss)
    return subgrad_from(lb, gb, li, gi)


def ascent_step(phi, sub, mu, budget) -> np.ndarray:
    return project_capped_simplex(np.asarray(phi) + mu * sub, budget)


def ascend(phi0, evaluate, mu: float, Ninner: int, budget: float, both_signs: bool = True, trace=None):
    """Projected subgradient ascent on ``|L_b(phi) - L_i(phi)|``.

    ``evaluate(phi)`` returns ``(L_b, grad_b, L_i, grad_i)``. The first run
    follows the sign of the difference at every iterate. With ``both_signs``
    a second run of ``Ninner`` iterates ascends the opposite signed
    difference from the same start, since ``sup |f| = max(sup f, sup -f)``
    and sign-following alone stops at the nearer of the two. Returns the
    largest value seen over all iterates and the iterate that produced it.
    """
    if Ninner < 1:
        raise ValueError("Ninner must be >= 1")
    if not mu > 0:
        raise ValueError("mu must be positive")
    start = as_phi(phi0).astype(float, copy=True)
    best, best_phi = -np.inf, start
    first_sign = None
    for sign in ((None, "opposite") if both_signs else (None,)):
        phi = start
        for _ in range(Ninner):
            lb, gb, li, gi = evaluate(phi)
            value = abs(lb - li)
            if first_sign is None:
                first_sign = 1.0 if lb > li else -1.0
            if trace is not None:
                trace.append(value)
            if value > best:
                best, best_phi = value, phi
            if sign is None:
                sub = subgrad_from(lb, gb, li, gi)
            else:
                sub = -first_sign * (np.asarray(gb) - np.asarray(gi))
            phi = ascent_step(phi, sub, mu, budget)
    return float(best), best_phi


def estimate_discrepancy(d_b: BsDataset, d_i: BsDataset, mu: float, Ninner: int, phi0, budget: float,
                         loss: LossConfig = DEFAULT_LOSS, trace: list | None = None, both_signs: bool = True):
    """Discrepancy estimate between two datasets, starting from ``phi0``.

    Returns the largest value seen with the iterate that produced it. Pass a
    list as ``trace`` to collect the value at every iterate.
    """
    def evaluate(phi):
        lb, gb = empirical_loss_grad(phi, d_b, loss)
        li, gi = empirical_loss_grad(phi, d_i, loss)
        return lb, gb, li, gi

    return ascend(phi0, evaluate, mu, Ninner, budget, both_signs, trace)
