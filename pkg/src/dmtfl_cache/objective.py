"""Caching loss, weighted multi-task objective, generalisation penalty and
their gradients.

Models are passed either as a list of :class:`CachingModel` or as a
``(B, F)`` array whose row ``i`` is the cache vector of base station ``i``.
All reductions run in a fixed order (base station, then sample) so results
are reproducible bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import AlphaMatrix, BsDataset, CachingModel, DimensionError, MixtureWeights, Sample

LN10 = math.log(10.0)
DEFAULT_E_FLOOR = 1e-6
DEFAULT_H = 6.0
PREDICTORS = ("bilinear", "cached")


@dataclass(frozen=True)
class LossConfig:
    """How the per-tile error is formed.

    ``bilinear`` predicts ``clamp(phi_f * x_f, 0, 1)``. ``cached`` treats every
    weighted tile as cached (indicator 1), so the error is ``(1 - y_f)^2`` and
    the loss is linear in ``phi``.
    """

    e_floor: float = DEFAULT_E_FLOOR
    H: float = DEFAULT_H
    predictor: str = "bilinear"

    def __post_init__(self):
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}")
        if not self.e_floor > 0 or not self.H > 0:
            raise ValueError("e_floor and H must be positive")


DEFAULT_LOSS = LossConfig()


@dataclass(frozen=True, eq=False)
class LossReport:
    value: float
    per_tile: np.ndarray


def as_phi(phi) -> np.ndarray:
    if isinstance(phi, CachingModel):
        return phi.phi
    return np.asarray(phi, dtype=float)


def as_models(models) -> np.ndarray:
    if isinstance(models, np.ndarray):
        return np.atleast_2d(models.astype(float, copy=False))
    return np.stack([as_phi(m) for m in models])


def _w(w) -> np.ndarray:
    return w.w if isinstance(w, MixtureWeights) else np.asarray(w, dtype=float)


def _alpha(a) -> np.ndarray:
    return a.alpha if isinstance(a, AlphaMatrix) else np.asarray(a, dtype=float)


def _v(v) -> np.ndarray:
    return np.asarray(getattr(v, "v", v), dtype=float)


def predict(phi, x) -> np.ndarray:
    """Relaxed cache indicator ``clamp(phi * x, 0, 1)``."""
    phi = as_phi(phi)
    x = np.asarray(x, dtype=float)
    if phi.shape[-1] != x.shape[-1]:
        raise DimensionError(f"model has {phi.shape[-1]} tiles, features have {x.shape[-1]}")
    return np.clip(phi * x, 0.0, 1.0)


def loss_terms(phi, X, Y, loss: LossConfig = DEFAULT_LOSS):
    """Per-sample, per-tile addends ``phi_f * log10(e_f)`` clamped to [-H, H].

    Returns the addend matrix together with the intermediates the gradient
    needs.
    """
    phi = as_phi(phi)
    if loss.predictor == "cached":
        pred = np.ones_like(Y)
    else:
        pred = predict(phi, X)
    r = pred - Y
    sq = r * r
    e = np.maximum(sq, loss.e_floor)
    log_e = np.log10(e)
    raw = phi * log_e
    terms = np.clip(raw, -loss.H, loss.H)
    return terms, (r, sq, e, log_e, raw)


def sample_loss(phi, s: Sample, e_floor=DEFAULT_E_FLOOR, H=DEFAULT_H, predictor="bilinear") -> LossReport:
    loss = LossConfig(e_floor, H, predictor)
    terms, _ = loss_terms(phi, s.x[None, :], s.y[None, :], loss)
    per_tile = terms[0]
    return LossReport(float(per_tile.sum()), per_tile)


def _check(phi, d: BsDataset):
    if phi.shape[-1] != d.n_tiles:
        raise DimensionError(f"model has {phi.shape[-1]} tiles, dataset has {d.n_tiles}")


def empirical_loss(phi, d: BsDataset, loss: LossConfig = DEFAULT_LOSS) -> float:
    """Mean per-sample loss of one model on one dataset."""
    phi = as_phi(phi)
    _check(phi, d)
    if d.size == 0:
        raise ValueError("empty dataset")
    terms, _ = loss_terms(phi, d.X, d.Y, loss)
    return float(terms.sum(axis=1).mean())


def empirical_loss_grad(phi, d: BsDataset, loss: LossConfig = DEFAULT_LOSS):
    """Loss value and its gradient with respect to ``phi``.

    Subgradient conventions at kinks: the prediction clamp counts as active
    once ``phi*x >= 1``; the MSE floor counts as active once
    ``(p-y)^2 <= e_floor``; an addend clamped at +-H contributes nothing.
    """
    phi = as_phi(phi)
    _check(phi, d)
    terms, (r, sq, e, log_e, raw) = loss_terms(phi, d.X, d.Y, loss)
    g = log_e
    if loss.predictor == "bilinear":
        dpred = np.where(phi * d.X < 1.0, d.X, 0.0)
        de = np.where(sq > loss.e_floor, 2.0 * r * dpred, 0.0)
        g = g + phi * de / (e * LN10)
    g = np.where(np.abs(raw) > loss.H, 0.0, g)
    return float(terms.sum(axis=1).mean()), g.mean(axis=0)


def loss_matrix(models, data: Sequence[BsDataset], loss: LossConfig = DEFAULT_LOSS) -> np.ndarray:
    """``L[b, i]`` = empirical loss of model ``i`` on the data of base station ``b``."""
    P = as_models(models)
    B = len(data)
    if P.shape[0] != B:
        raise DimensionError(f"{P.shape[0]} models for {B} datasets")
    L = np.empty((B, B))
    for b, d in enumerate(data):
        for i in range(B):
            L[b, i] = empirical_loss(P[i], d, loss)
    return L


def weighted_from_losses(w, A, L) -> float:
    """``sum_b w_b sum_i A_bi L_bi`` with a fixed summation order."""
    return float(sum(w[b] * float(A[b] @ L[b]) for b in range(len(w))))


def weighted_objective(models, w, a, data, loss: LossConfig = DEFAULT_LOSS) -> float:
    """Mixture-weighted multi-task empirical loss
    ``sum_b w_b sum_i alpha_bi L_b(phi_i, D_b)``."""
    w, A = _w(w), _alpha(a)
    B = len(data)
    if w.size != B or A.shape != (B, B):
        raise DimensionError(f"w {w.shape} / alpha {A.shape} do not match {B} datasets")
    return weighted_from_losses(w, A, loss_matrix(models, data, loss))


def _sqrt_inner(w, A, m, log_term):
    coef = (w[:, None] * A) / np.asarray(m, dtype=float)[:, None]
    return 0.5 * float((coef ** 2).sum()) * log_term


def penalty_P(w, a, v, m, H, delta, cover_size) -> float:
    """Sample-size and discrepancy penalty of the generalisation bound
    (the quantity multiplied by ``H`` in the bound)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if cover_size < 1:
        raise ValueError("cover size must be >= 1")
    w, A, V = _w(w), _alpha(a), _v(v)
    m = np.asarray(m, dtype=float)
    if np.any(m < 1):
        raise ValueError("sample sizes must be >= 1")
    log_term = math.log(cover_size / delta)
    first = math.sqrt(_sqrt_inner(w, A, m, log_term))
    second = float((w[:, None] * A * V).sum()) / H
    return first + second


def regulariser(models, rho) -> float:
    P = as_models(models)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (P.shape[0],))
    return float(sum(rho[b] * np.linalg.norm(P[b]) for b in range(P.shape[0])))


def full_objective(models, w, a, data, rho, H, delta, cover_size, v,
                   loss: LossConfig | None = None) -> float:
    """Weighted objective plus per-BS l2 regulariser plus ``H * P``."""
    loss = LossConfig(H=H) if loss is None else loss
    m = [d.size for d in data]
    theta = weighted_objective(models, w, a, data, loss)
    return theta + regulariser(models, rho) + H * penalty_P(w, a, v, m, H, delta, cover_size)


def norm_grad(phi) -> np.ndarray:
    """Gradient of ``||phi||_2``; zero subgradient at the origin."""
    n = float(np.linalg.norm(phi))
    return np.zeros_like(phi) if n == 0.0 else phi / n


def grad_phi(models, w, a, data, rho, b, loss: LossConfig = DEFAULT_LOSS) -> np.ndarray:
    """Gradient of the full objective with respect to model ``b``.

    Model ``b`` enters through every term ``w_k alpha_kb L_k(phi_b, D_k)``
    plus its own regulariser; the penalty does not depend on the models.
    """
    P = as_models(models)
    w, A = _w(w), _alpha(a)
    grads = [empirical_loss_grad(P[b], d, loss)[1] for d in data]
    return combine_phi_grad(P[b], [w[k] * A[k, b] for k in range(len(data))], grads,
                            np.broadcast_to(np.asarray(rho, dtype=float), (P.shape[0],))[b])


def combine_phi_grad(phi, weights, grads, rho_b) -> np.ndarray:
    """Weighted sum of per-dataset loss gradients plus the l2 regulariser.

    Shared by the analytic gradient and the message-passing engine so both
    produce identical floating-point results.
    """
    g = np.zeros(phi.shape[0])
    for weight, gk in zip(weights, grads):
        if weight != 0.0:
            g = g + weight * gk
    if rho_b != 0.0:
        g = g + rho_b * norm_grad(phi)
    return g


def penalty_grad_row(w, A, v, m, H, delta, cover_size, b) -> np.ndarray:
    """Gradient of ``H * P`` with respect to row ``b`` of alpha."""
    w, A, V = _w(w), _alpha(A), _v(v)
    m = np.asarray(m, dtype=float)
    log_term = math.log(cover_size / delta)
    inner = _sqrt_inner(w, A, m, log_term)
    g = w[b] * V[b]
    if inner > 0.0:
        c2 = (w[b] / m[b]) ** 2
        g = g + H * 0.5 * log_term * c2 * A[b] / math.sqrt(inner)
    return g


def grad_alpha(models, w, a, data, H, delta, cover_size, v, b,
               loss: LossConfig | None = None) -> np.ndarray:
    """Gradient of the full objective with respect to row ``b`` of alpha."""
    loss = LossConfig(H=H) if loss is None else loss
    P = as_models(models)
    w, A = _w(w), _alpha(a)
    losses = np.array([empirical_loss(P[i], data[b], loss) for i in range(P.shape[0])])
    m = [x.size for x in data]
    return w[b] * losses + penalty_grad_row(w, A, v, m, H, delta, cover_size, b)
