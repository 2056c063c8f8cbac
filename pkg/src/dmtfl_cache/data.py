"""Equirectangular tiling, FOV-to-tile mapping, synthetic non-iid demand and
head-trace ingestion.

Angles are in degrees: yaw in [-180, 180) increasing left to right, pitch in
[-90, 90] with +90 at the top of the frame. Tiles are numbered row-major from
the top-left corner.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import BsDataset, TileGrid


class TraceFormatError(ValueError):
    """A head-trace file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class HeadSample:
    user_id: str
    timestamp: float
    yaw: float
    pitch: float

    def __post_init__(self):
        if not (-180.0 <= self.yaw < 180.0):
            raise ValueError(f"yaw {self.yaw} outside [-180, 180)")
        if not (-90.0 <= self.pitch <= 90.0):
            raise ValueError(f"pitch {self.pitch} outside [-90, 90]")
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")


@dataclass(frozen=True)
class GenConfig:
    """Synthetic demand generator settings.

    ``samples_per_bs`` is an int shared by all base stations or one count per
    base station (unequal data volumes). Smaller ``gamma`` gives more skewed
    and more heterogeneous per-BS popularity profiles.
    """

    B: int = 4
    grid: TileGrid = TileGrid(8, 8)
    users_per_bs: int = 10
    samples_per_bs: int | tuple = 100
    gamma: float = 0.3
    fov_deg: float = 100.0
    seed: int = 0
    features: str = "lag"
    jitter: float = 0.0

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("need at least one base station")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.fov_deg <= 180:
            raise ValueError("fov_deg must lie in (0, 180]")
        if self.users_per_bs < 1:
            raise ValueError("users_per_bs must be >= 1")
        if not 0 <= self.jitter <= 1:
            raise ValueError("jitter must lie in [0, 1]")
        if self.features not in FEATURE_MODES:
            raise ValueError(f"features must be one of {sorted(FEATURE_MODES)}")
        sizes = self.sizes()
        if len(sizes) != self.B:
            raise ValueError(f"{len(sizes)} sample counts for {self.B} base stations")
        if min(sizes) < 1:
            raise ValueError("empty dataset: samples_per_bs must be >= 1")

    def sizes(self) -> list[int]:
        if isinstance(self.samples_per_bs, (int, np.integer)):
            return [int(self.samples_per_bs)] * self.B
        return [int(s) for s in self.samples_per_bs]


def _check_angle(yaw, pitch):
    if math.isnan(yaw) or math.isnan(pitch):
        raise ValueError("angle is NaN")


def tile_index(yaw: float, pitch: float, grid: TileGrid) -> int:
    _check_angle(yaw, pitch)
    col = min(int(math.floor((yaw + 180.0) / 360.0 * grid.cols)), grid.cols - 1)
    row = min(int(math.floor((90.0 - pitch) / 180.0 * grid.rows)), grid.rows - 1)
    return grid.tile_id(max(row, 0), max(col, 0))


def _wrap_yaw(yaw: float) -> float:
    return (yaw + 180.0) % 360.0 - 180.0


def fov_columns(yaw: float, fov_deg: float, cols: int) -> list[int]:
    """Columns whose yaw span overlaps ``[yaw - fov/2, yaw + fov/2]`` (with
    wraparound). A zero-width window maps to the column ``tile_index`` uses."""
    if fov_deg >= 360.0:
        return list(range(cols))
    width = 360.0 / cols
    yaw = _wrap_yaw(yaw)
    lo = (yaw - fov_deg / 2.0 + 180.0) / width
    hi = (yaw + fov_deg / 2.0 + 180.0) / width
    c_lo = math.floor(lo)
    c_hi = max(math.ceil(hi) - 1, c_lo)
    if c_hi - c_lo + 1 >= cols:
        return list(range(cols))
    return sorted({c % cols for c in range(c_lo, c_hi + 1)})


def fov_rows(pitch: float, fov_deg: float, rows: int) -> list[int]:
    height = 180.0 / rows
    top = min(pitch + fov_deg / 2.0, 90.0)
    bottom = max(pitch - fov_deg / 2.0, -90.0)
    r_lo = math.floor((90.0 - top) / height)
    r_hi = max(math.ceil((90.0 - bottom) / height) - 1, r_lo)
    return list(range(max(r_lo, 0), min(r_hi, rows - 1) + 1))


def fov_tiles(yaw: float, pitch: float, fov_deg: float, grid: TileGrid) -> frozenset[int]:
    """Tiles whose EQR rectangle overlaps the planar FOV window.

    Overlap means a shared region of positive area; tiles that only touch the
    window edge are excluded. The window wraps horizontally at +-180 degrees
    and is clamped at the poles.
    """
    _check_angle(yaw, pitch)
    cols = fov_columns(yaw, fov_deg, grid.cols)
    rows = fov_rows(pitch, fov_deg, grid.rows)
    return frozenset(grid.tile_id(r, c) for r in rows for c in cols)


def fov_mask(yaw, pitch, fov_deg, grid: TileGrid) -> np.ndarray:
    mask = np.zeros(grid.n_tiles)
    mask[list(fov_tiles(yaw, pitch, fov_deg, grid))] = 1.0
    return mask


FEATURE_MODES = {"lag", "unit"}


def _windows_to_dataset(bs_id: int, counts: np.ndarray, features: str = "lag") -> BsDataset:
    """Turn ``(W, F)`` per-window request counts into a dataset of W samples.

    Labels are counts normalised by the window maximum. ``lag`` features are
    the previous window's labels (zeros for the first window); ``unit``
    features are all ones, which makes the prediction the cache weight itself.
    """
    peak = counts.max(axis=1, keepdims=True)
    Y = np.divide(counts, peak, out=np.zeros_like(counts), where=peak > 0)
    if features == "unit":
        X = np.ones_like(Y)
    else:
        X = np.vstack([np.zeros((1, Y.shape[1])), Y[:-1]])
    return BsDataset(bs_id, X, Y, counts)


def popularity_profiles(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet tile-popularity profile per base station, ``(B, F)``."""
    F = cfg.grid.n_tiles
    return rng.dirichlet(np.full(F, cfg.gamma), size=cfg.B)


def centred_fov_masks(grid: TileGrid, fov_deg: float) -> np.ndarray:
    """``(F, F)`` matrix whose row ``t`` is the FOV mask of a head looking at
    the centre of tile ``t``."""
    out = np.zeros((grid.n_tiles, grid.n_tiles))
    for t in range(grid.n_tiles):
        row, col = divmod(t, grid.cols)
        yaw = -180.0 + (col + 0.5) * 360.0 / grid.cols
        pitch = 90.0 - (row + 0.5) * 180.0 / grid.rows
        out[t] = fov_mask(yaw, pitch, fov_deg, grid)
    return out


def _draw_window(profile, cfg: GenConfig, rng: np.random.Generator, masks=None) -> np.ndarray:
    grid = cfg.grid
    tiles = rng.choice(grid.n_tiles, size=cfg.users_per_bs, p=profile)
    if masks is not None:
        return masks[tiles].sum(axis=0)
    counts = np.zeros(grid.n_tiles)
    u = 0.5 + cfg.jitter * (rng.random((cfg.users_per_bs, 2)) - 0.5)
    for t, (uy, up) in zip(tiles, u):
        row, col = divmod(int(t), grid.cols)
        yaw = -180.0 + (col + uy) * 360.0 / grid.cols
        pitch = 90.0 - (row + up) * 180.0 / grid.rows
        counts += fov_mask(yaw, min(max(pitch, -90.0), 90.0), cfg.fov_deg, grid)
    return counts


def synth_window_counts(cfg: GenConfig, profiles=None, sizes=None, rng=None) -> list[np.ndarray]:
    """Raw per-window request counts, one ``(m_b + 1, F)`` array per BS.

    The extra leading window only provides the lag features of the first
    sample.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if profiles is None:
        profiles = popularity_profiles(cfg, rng)
    sizes = cfg.sizes() if sizes is None else sizes
    masks = centred_fov_masks(cfg.grid, cfg.fov_deg) if cfg.jitter == 0 else None
    out = []
    for b in range(cfg.B):
        # head centre: a tile drawn from the BS profile, offset from the tile
        # centre by at most jitter/2 of a tile
        out.append(np.stack([_draw_window(profiles[b], cfg, rng, masks) for _ in range(sizes[b] + 1)]))
    return out


def synth_noniid(cfg: GenConfig) -> list[BsDataset]:
    """Synthetic per-BS datasets with Dirichlet-skewed tile popularity."""
    return [_drop_first(b, c, cfg.features) for b, c in enumerate(synth_window_counts(cfg))]


def _drop_first(bs_id, counts, features):
    full = _windows_to_dataset(bs_id, counts, features)
    return full.subset(np.arange(1, full.size))


TRACE_HEADER = ("user_id", "timestamp", "yaw_deg", "pitch_deg")


def read_trace(path) -> list[HeadSample]:
    """Parse a ``user_id,timestamp,yaw_deg,pitch_deg`` CSV head trace."""
    samples: list[HeadSample] = []
    last_ts: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceFormatError("empty trace file")
        if tuple(h.strip() for h in header) != TRACE_HEADER:
            raise TraceFormatError(f"expected header {','.join(TRACE_HEADER)}", line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise TraceFormatError(f"expected 4 fields, got {len(row)}", line=line_no)
            try:
                user, ts, yaw, pitch = row[0].strip(), float(row[1]), float(row[2]), float(row[3])
                s = HeadSample(user, ts, yaw, pitch)
            except ValueError as exc:
                raise TraceFormatError(str(exc), line=line_no) from None
            if user in last_ts and ts < last_ts[user]:
                raise TraceFormatError(f"timestamp decreases for user {user}", line=line_no)
            last_ts[user] = ts
            samples.append(s)
    if not samples:
        raise TraceFormatError("trace holds no head samples")
    return samples


def trace_window_counts(samples: Sequence[HeadSample], grid: TileGrid, fov_deg: float,
                        window_sec: float) -> np.ndarray:
    """Per-window tile request counts; empty windows are dropped."""
    if not window_sec > 0:
        raise ValueError("window_sec must be positive")
    t0 = min(s.timestamp for s in samples)
    idx = [int(math.floor((s.timestamp - t0) / window_sec)) for s in samples]
    counts = np.zeros((max(idx) + 1, grid.n_tiles))
    for s, k in zip(samples, idx):
        counts[k] += fov_mask(s.yaw, s.pitch, fov_deg, grid)
    return counts[counts.sum(axis=1) > 0]


def ingest_trace(path, grid: TileGrid, fov_deg: float = 100.0, window_sec: float = 1.0,
                 bs_id: int = 0, features: str = "lag") -> BsDataset:
    """Build one base station's dataset from a head-trace CSV.

    Each non-empty time window becomes one sample; the first window's lag
    features are zero.
    """
    samples = read_trace(path)
    counts = trace_window_counts(samples, grid, fov_deg, window_sec)
    return _windows_to_dataset(bs_id, counts, features)


def write_dataset_csv(path, datasets: Sequence[BsDataset]) -> None:
    """Dump datasets as rows ``bs_id,sample,kind,v0..v{F-1}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        F = datasets[0].n_tiles
        w.writerow(["bs_id", "sample", "kind"] + [f"t{f}" for f in range(F)])
        for d in datasets:
            for j in range(d.size):
                w.writerow([d.bs_id, j, "x"] + [repr(float(v)) for v in d.X[j]])
                w.writerow([d.bs_id, j, "y"] + [repr(float(v)) for v in d.Y[j]])


def train_test_split(d: BsDataset, train_frac: float = 0.8) -> tuple[BsDataset, BsDataset]:
    """Split by sample order: the first ``train_frac`` for training."""
    if d.size < 2:
        raise ValueError("need at least two samples to split")
    n_train = min(max(int(round(train_frac * d.size)), 1), d.size - 1)
    return d.subset(np.arange(n_train)), d.subset(np.arange(n_train, d.size))
