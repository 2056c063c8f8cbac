"""Core data types shared by the rest of the package.

Every type validates its invariants on construction and freezes its arrays,
so instances can be shared freely between workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

SUM_TOL = 1e-9


class DimensionError(ValueError):
    """Vector or matrix has the wrong shape."""


class LabelRangeError(ValueError):
    """A label or weight lies outside its admissible range."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TileGrid:
    """N x P tiling of the equirectangular frame, tiles numbered row-major
    from the top-left corner."""

    rows: int
    cols: int

    def __post_init__(self):
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise ValueError("grid dimensions must be integers")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    def tile_id(self, row: int, col: int) -> int:
        return row * self.cols + col


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = _frozen(self.x)
        y = _frozen(self.y)
        if x.ndim != 1 or y.ndim != 1:
            raise DimensionError("features and labels must be vectors")
        if x.shape != y.shape:
            raise DimensionError(f"feature length {x.size} != label length {y.size}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if np.any(x < 0):
            raise ValueError("features must be nonnegative")
        if not np.all(np.isfinite(y)) or np.any((y < 0) | (y > 1)):
            raise LabelRangeError("labels must lie in [0, 1]")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_tiles(self) -> int:
        return self.x.size


@dataclass(frozen=True, eq=False)
class BsDataset:
    """Labelled samples held by one base station.

    Samples are stored stacked: ``X`` and ``Y`` are ``(m, F)`` arrays.
    ``counts`` optionally keeps the raw per-tile request counts behind each
    label row; hit-rate metrics use them when present.
    """

    bs_id: int
    X: np.ndarray
    Y: np.ndarray
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.bs_id) != self.bs_id or self.bs_id < 0:
            raise ValueError("bs_id must be a nonnegative integer")
        X = _frozen(self.X)
        Y = _frozen(self.Y)
        if X.ndim != 2 or Y.ndim != 2 or X.shape != Y.shape:
            raise DimensionError(f"X {X.shape} and Y {Y.shape} must be matching (m, F) arrays")
        if X.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if not np.all(np.isfinite(X)) or np.any(X < 0):
            raise ValueError("features must be finite and nonnegative")
        if not np.all(np.isfinite(Y)) or np.any((Y < 0) | (Y > 1)):
            raise LabelRangeError("labels must lie in [0, 1]")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        if self.counts is not None:
            c = _frozen(self.counts)
            if c.shape != Y.shape or np.any(c < 0):
                raise DimensionError("counts must be a nonnegative (m, F) array")
            object.__setattr__(self, "counts", c)

    @classmethod
    def from_samples(cls, bs_id: int, samples: Sequence[Sample]) -> "BsDataset":
        if len(samples) == 0:
            raise ValueError("dataset must hold at least one sample")
        sizes = {s.n_tiles for s in samples}
        if len(sizes) != 1:
            raise DimensionError(f"samples disagree on tile count: {sorted(sizes)}")
        return cls(bs_id, np.stack([s.x for s in samples]), np.stack([s.y for s in samples]))

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @property
    def n_tiles(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return list(iter(self))

    def __iter__(self) -> Iterator[Sample]:
        for x, y in zip(self.X, self.Y):
            yield Sample(x, y)

    def __len__(self) -> int:
        return self.size

    def requests(self) -> np.ndarray:
        """Per-sample tile request weights used by the hit metrics."""
        return self.Y if self.counts is None else self.counts

    def subset(self, idx) -> "BsDataset":
        idx = np.asarray(idx)
        counts = None if self.counts is None else self.counts[idx]
        return BsDataset(self.bs_id, self.X[idx], self.Y[idx], counts)


def validate_dataset(d: BsDataset, grid: TileGrid) -> None:
    """Raise if ``d`` is inconsistent with ``grid``; return None otherwise."""
    if d.n_tiles != grid.n_tiles:
        raise DimensionError(f"dataset has {d.n_tiles} tiles, grid has {grid.n_tiles}")
    if d.size < 1:
        raise ValueError("empty dataset")
    if np.any((d.Y < 0) | (d.Y > 1)):
        raise LabelRangeError("labels must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class CachingModel:
    bs_id: int
    phi: np.ndarray
    budget: Optional[float] = None

    def __post_init__(self):
        phi = _frozen(self.phi)
        if phi.ndim != 1:
            raise DimensionError("phi must be a vector")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi must be finite")
        if np.any(phi < -SUM_TOL) or np.any(phi > 1 + SUM_TOL):
            raise LabelRangeError("cache weights must lie in [0, 1]")
        if self.budget is not None and phi.sum() > self.budget + 1e-7:
            raise LabelRangeError(f"cache weights sum {phi.sum():.6g} exceeds budget {self.budget}")
        object.__setattr__(self, "phi", phi)


@dataclass(frozen=True, eq=False)
class MixtureWeights:
    w: np.ndarray

    def __post_init__(self):
        w = _frozen(self.w)
        if w.ndim != 1 or w.size < 1:
            raise DimensionError("mixture weights must be a nonempty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > SUM_TOL:
            raise LabelRangeError(f"mixture weights must lie on the simplex (sum={w.sum()!r})")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, n: int) -> "MixtureWeights":
        return cls(np.full(n, 1.0 / n))

    def __len__(self):
        return self.w.size


@dataclass(frozen=True, eq=False)
class AlphaMatrix:
    alpha: np.ndarray

    def __post_init__(self):
        a = _frozen(self.alpha)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise DimensionError(f"alpha must be square, got shape {a.shape}")
        if np.any(a < 0):
            raise LabelRangeError("alpha entries must be nonnegative")
        if np.any(np.abs(a.sum(axis=1) - 1.0) > SUM_TOL):
            raise LabelRangeError("alpha rows must sum to one")
        object.__setattr__(self, "alpha", a)

    @classmethod
    def uniform(cls, n: int) -> "AlphaMatrix":
        return cls(np.full((n, n), 1.0 / n))

    @classmethod
    def identity(cls, n: int) -> "AlphaMatrix":
        return cls(np.eye(n))

    @property
    def n(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True)
class HyperParams:
    """Training and bound hyperparameters.

    ``upsilon`` is the base alpha step; round ``t`` uses ``upsilon / sqrt(t)``.
    ``rho`` is either a scalar shared by all base stations or a per-BS tuple.
    ``w_box`` optionally restricts the mixture set to ``{w : lo <= w_b <= hi}``
    intersected with the simplex.
    """

    T: int = 40
    Ninner: int = 5
    mu: float = 0.05
    eta: float = 0.05
    upsilon: float = 0.5
    rho: float | tuple = 0.0
    H: float = 6.0
    delta: float = 0.1
    eps_cover: float = 0.1
    cache_budget: float = 1.0
    e_floor: float = 1e-6
    seed: int = 0
    link_capacity: Optional[int] = None
    w_box: Optional[tuple] = field(default=None)
    predictor: str = "bilinear"

    def __post_init__(self):
        if self.T < 0 or int(self.T) != self.T:
            raise ValueError("T must be a nonnegative integer")
        if self.Ninner < 1:
            raise ValueError("Ninner must be >= 1")
        for name in ("mu", "eta", "upsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"step size {name} must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 < self.eps_cover <= 2:
            raise ValueError("eps_cover must lie in (0, 2]")
        if not self.H > 0:
            raise ValueError("H must be positive")
        if not self.e_floor > 0:
            raise ValueError("e_floor must be positive")
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if np.any(rho < 0):
            raise ValueError("rho must be nonnegative")
        if self.cache_budget < 1:
            raise ValueError("cache budget must be >= 1")
        if self.predictor not in ("bilinear", "cached"):
            raise ValueError("predictor must be 'bilinear' or 'cached'")

    def rho_for(self, n_bs: int) -> np.ndarray:
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if rho.size == 1:
            return np.full(n_bs, rho[0])
        if rho.size != n_bs:
            raise DimensionError(f"rho has {rho.size} entries for {n_bs} base stations")
        return rho

    def check_tiles(self, n_tiles: int) -> None:
        if not 1 <= self.cache_budget <= n_tiles:
            raise ValueError(f"cache budget {self.cache_budget} outside [1, {n_tiles}]")
