"""Simplex geometry: Euclidean projections and a lattice epsilon-cover."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .domain import DimensionError, MixtureWeights

MAX_COVER_SIZE = 2_000_000


def project_simplex(v) -> MixtureWeights:
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-and-threshold: find the largest k such that the k largest entries,
    shifted by a common threshold, stay positive.
    """
    return MixtureWeights(_simplex_array(v))


def _simplex_array(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector must be finite")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    k = np.nonzero(u - css / ks > 0)[0][-1]
    x = np.maximum(v - css[k] / (k + 1), 0.0)
    # renormalise away the last ulp so sum(x) == 1 within 1e-15
    return x / x.sum()


def project_rows_simplex(M) -> np.ndarray:
    """Row-wise simplex projection of a matrix."""
    M = np.asarray(M, dtype=float)
    return np.stack([_simplex_array(row) for row in M])


def project_capped_simplex(v, total: float, cap: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{x : 0 <= x_f <= cap, sum(x) = total}``.

    The solution is ``clip(v - tau, 0, cap)`` for the unique shift ``tau``
    matching the total; ``tau`` is bracketed by bisection and then solved
    exactly on the resulting active set.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector must be finite")
    n = v.size
    if not 0 <= total <= n * cap + 1e-12:
        raise ValueError(f"infeasible total {total} for {n} entries capped at {cap}")
    if total >= n * cap - 1e-12:
        return np.full(n, cap)
    if total <= 0:
        return np.zeros(n)

    def mass(tau):
        return np.clip(v - tau, 0.0, cap).sum()

    lo, hi = v.min() - cap, v.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) > total:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(lo)):
            break
    tau = 0.5 * (lo + hi)
    shifted = v - tau
    free = (shifted > 0) & (shifted < cap)
    n_full = np.count_nonzero(shifted >= cap)
    if free.any():
        tau = (v[free].sum() - (total - n_full * cap)) / free.sum()
    x = np.clip(v - tau, 0.0, cap)
    # exact-solve can drift by an ulp at the active-set boundary
    err = x.sum() - total
    if abs(err) > 1e-12:
        x = np.clip(v - (tau + err / max(free.sum(), 1)), 0.0, cap)
    return x


@dataclass(frozen=True, eq=False)
class EpsCover:
    """Finite set of simplex points covering the mixture set in l1."""

    centers: np.ndarray  # (d, B)
    epsilon: float

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    def __len__(self):
        return self.size

    def weights(self, k: int) -> MixtureWeights:
        return MixtureWeights(self.centers[k])

    def nearest_distance(self, points) -> np.ndarray:
        """l1 distance from each point to its closest center."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        best = np.full(points.shape[0], np.inf)
        for start in range(0, self.size, 4096):
            block = self.centers[start:start + 4096]
            d = np.abs(points[:, None, :] - block[None, :, :]).sum(axis=2)
            best = np.minimum(best, d.min(axis=1))
        return best


def _compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``
    (stars-and-bars enumeration order)."""
    if parts == 1:
        return np.array([[total]])
    rows = []
    for bars in combinations(range(total + parts - 1), parts - 1):
        edges = (-1,) + bars + (total + parts - 1,)
        rows.append([edges[j + 1] - edges[j] - 1 for j in range(parts)])
    return np.array(rows, dtype=float)


def build_eps_cover(n_bs: int, epsilon: float, box: Optional[tuple] = None) -> EpsCover:
    """Regular simplex lattice with spacing ``1/K``, ``K = ceil(B / epsilon)``.

    Rounding any simplex point to the lattice (largest-remainder rule) moves
    each coordinate by less than ``1/K``, so the l1 covering radius is below
    ``B/K <= epsilon``. With ``box=(lo, hi)`` only centers within ``1/K`` of
    the box are kept, which preserves the covering of the restricted set.
    """
    if n_bs < 1:
        raise ValueError("need at least one base station")
    if not 0 < epsilon <= 2:
        raise ValueError("epsilon must lie in (0, 2]")
    if n_bs == 1:
        return EpsCover(np.ones((1, 1)), float(epsilon))
    K = math.ceil(n_bs / epsilon - 1e-12)
    size = math.comb(K + n_bs - 1, n_bs - 1)
    if size > MAX_COVER_SIZE:
        raise ValueError(f"cover would hold {size} centers; raise epsilon")
    centers = _compositions(K, n_bs) / K
    if box is not None:
        lo, hi = box
        keep = np.all((centers >= lo - 1.0 / K) & (centers <= hi + 1.0 / K), axis=1)
        centers = centers[keep]
        if centers.size == 0:
            raise ValueError(f"box {box} does not meet the simplex")
    centers.setflags(write=False)
    return EpsCover(centers, float(epsilon))


def sample_simplex(rng: np.random.Generator, n_bs: int, size: int, box: Optional[tuple] = None) -> np.ndarray:
    """Uniform draws from the simplex (optionally rejected outside a box)."""
    pts = rng.dirichlet(np.ones(n_bs), size=size)
    if box is None:
        return pts
    lo, hi = box
    out = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
    while out.shape[0] < size:
        more = rng.dirichlet(np.ones(n_bs), size=size)
        out = np.vstack([out, more[np.all((more >= lo) & (more <= hi), axis=1)]])
    return out[:size]
