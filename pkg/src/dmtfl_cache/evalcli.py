"""Experiment runner: cache-hit metrics, INI configs, CSV output and the
command-line entry point."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .baselines import fedavg, fedprox, heuristic_popular, top_c
from .data import GenConfig, ingest_trace, synth_noniid, train_test_split, write_dataset_csv
from .domain import BsDataset, HyperParams, TileGrid
from .objective import LossConfig, empirical_loss

ALGORITHMS = ("dmtfl", "fedavg", "fedprox", "heuristic")


# ---------------------------------------------------------------- metrics

def cache_set_from_model(phi, C: int) -> frozenset:
    """Binary cache: the ``C`` largest weights, ties to the lowest tile id."""
    phi = np.asarray(getattr(phi, "phi", phi), dtype=float)
    return frozenset(int(f) for f in top_c(phi, C))


def _requests(t) -> np.ndarray:
    return t.requests() if isinstance(t, BsDataset) else np.atleast_2d(np.asarray(t, dtype=float))


def _hits(cache_sets, tests):
    if len(cache_sets) != len(tests):
        raise ValueError(f"{len(cache_sets)} caches for {len(tests)} test sets")
    hit, req = [], []
    for S, t in zip(cache_sets, tests):
        R = _requests(t)
        idx = np.array(sorted(S), dtype=int)
        hit.append(float(R[:, idx].sum()) if idx.size else 0.0)
        req.append(float(R.sum()))
    return np.array(hit), np.array(req)


def avg_cache_hit(cache_sets: Sequence, tests: Sequence) -> float:
    """Network-wide fraction of requested tiles found in the serving BS's cache."""
    hit, req = _hits(cache_sets, tests)
    if req.sum() <= 0:
        raise ValueError("empty test set: no requests")
    return float(hit.sum() / req.sum())


def min_per_bs_hit(cache_sets: Sequence, tests: Sequence) -> float:
    """Worst per-BS hit fraction; BSs without test requests are skipped."""
    hit, req = _hits(cache_sets, tests)
    keep = req > 0
    if not keep.any():
        raise ValueError("no base station has test requests")
    return float((hit[keep] / req[keep]).min())


# ---------------------------------------------------------------- config

class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep: algorithms x cache sizes x repetitions.

    With ``vary_seed`` the data and training seeds of repetition ``r`` are
    ``seed + r``; otherwise every repetition reuses the same seed.
    """

    algorithms: tuple = ALGORITHMS
    gen: GenConfig = GenConfig()
    hp: HyperParams = HyperParams(predictor="cached")
    cache_sizes: tuple = (6, 13, 19, 26, 32)
    repetitions: int = 5
    out: Optional[str] = None
    traces: tuple = ()
    window_sec: float = 1.0
    vary_seed: bool = True
    fedprox_mu: float = 0.1
    local_steps: int = 1
    w_policy: str = "adversarial"
    threads: int = 1
    record_wall_time: bool = False
    train_frac: float = 0.8

    def __post_init__(self):
        if not self.cache_sizes:
            raise ConfigError("cache size sweep is empty")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
        F = self.gen.grid.n_tiles
        if any(not 1 <= c <= F for c in self.cache_sizes):
            raise ConfigError(f"cache sizes must lie in [1, {F}]")


def desk_config(**overrides) -> ExperimentConfig:
    """Default desk-scale sweep: 4 BSs, 8x8 tiles, C/F from 0.1 to 0.5, 5 seeds."""
    return dataclasses.replace(ExperimentConfig(), **overrides)


_GEN_KEYS = {"B": int, "users_per_bs": int, "gamma": float, "fov_deg": float, "seed": int,
             "features": str, "jitter": float}
_HP_KEYS = {f.name: f.type for f in fields(HyperParams)}


def _line_of(text: str, section: str, key: str) -> int:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return n
    return 0


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in re.split(r"[,\s]+", s.strip()) if x)


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in re.split(r"[,\s]+", s.strip()) if x)


def _names(s: str) -> tuple:
    return tuple(x for x in re.split(r"[,\s]+", s.strip()) if x)


def _hp_value(name, raw):
    if name == "rho":
        vals = _floats(raw)
        return vals[0] if len(vals) == 1 else vals
    if name == "w_box":
        lo, hi = _floats(raw)
        return (lo, hi)
    if name == "link_capacity":
        return None if raw.lower() in ("", "none") else int(raw)
    if name == "predictor":
        return raw
    if name in ("T", "Ninner", "seed"):
        return int(raw)
    return float(raw)


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from INI text with sections
    ``[experiment]``, ``[data]`` and ``[hyperparams]``. Missing keys keep
    their defaults."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(cp.sections()) - {"experiment", "data", "hyperparams"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")

    def get(section, key, conv):
        raw = cp[section][key]
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            line = _line_of(text, section, key)
            raise ConfigError(f"{path}:{line}: bad value for {section}.{key} = {raw!r} ({exc})") from None

    base = ExperimentConfig()
    exp, gen, hp = {}, {}, {}
    if cp.has_section("experiment"):
        conv = {"algorithms": _names, "cache_sizes": _ints, "repetitions": int, "out": str,
                "vary_seed": _bool, "fedprox_mu": float, "local_steps": int, "w_policy": str,
                "threads": int, "record_wall_time": _bool, "train_frac": float}
        for key in cp["experiment"]:
            if key not in conv:
                raise ConfigError(f"{path}:{_line_of(text, 'experiment', key)}: unknown key experiment.{key}")
            exp[key] = get("experiment", key, conv[key])
    if cp.has_section("data"):
        rows, cols = base.gen.grid.rows, base.gen.grid.cols
        for key in cp["data"]:
            if key in _GEN_KEYS:
                gen[key] = get("data", key, _GEN_KEYS[key])
            elif key == "rows":
                rows = get("data", key, int)
            elif key == "cols":
                cols = get("data", key, int)
            elif key == "samples_per_bs":
                sizes = get("data", key, _ints)
                gen[key] = sizes[0] if len(sizes) == 1 else sizes
            elif key == "traces":
                exp["traces"] = get("data", key, _names)
            elif key == "window_sec":
                exp["window_sec"] = get("data", key, float)
            else:
                raise ConfigError(f"{path}:{_line_of(text, 'data', key)}: unknown key data.{key}")
        gen["grid"] = TileGrid(rows, cols)
    if cp.has_section("hyperparams"):
        for key in cp["hyperparams"]:
            if key not in _HP_KEYS:
                raise ConfigError(f"{path}:{_line_of(text, 'hyperparams', key)}: unknown key hyperparams.{key}")
            hp[key] = get("hyperparams", key, lambda raw, k=key: _hp_value(k, raw))
    try:
        g = dataclasses.replace(base.gen, **gen)
        h = dataclasses.replace(base.hp, **hp)
        return dataclasses.replace(base, gen=g, hp=h, **exp)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def config_summary(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """Every effective setting, flattened to ``key = value`` pairs. The
    thread count is left out: it never changes the results."""
    out = []
    for f in fields(cfg):
        if f.name == "threads":
            continue
        value = getattr(cfg, f.name)
        if f.name in ("gen", "hp"):
            for g in fields(value):
                out.append((f"{f.name}.{g.name}", repr(getattr(value, g.name))))
        else:
            out.append((f.name, repr(value)))
    return out


# ---------------------------------------------------------------- experiment

@dataclass(frozen=True)
class MetricRow:
    algorithm: str
    C: int
    C_frac: float
    repetition: int
    avg_cache_hit: float
    min_per_bs_hit: float
    final_objective: float
    wall_time: float

    def __post_init__(self):
        for name in ("avg_cache_hit", "min_per_bs_hit"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


METRIC_FIELDS = tuple(f.name for f in fields(MetricRow))


def _datasets_for(cfg: ExperimentConfig, rep: int) -> list[BsDataset]:
    if cfg.traces:
        return [ingest_trace(p, cfg.gen.grid, cfg.gen.fov_deg, cfg.window_sec, bs_id=b, features=cfg.gen.features)
                for b, p in enumerate(cfg.traces)]
    seed = cfg.gen.seed + rep if cfg.vary_seed else cfg.gen.seed
    return synth_noniid(dataclasses.replace(cfg.gen, seed=seed))


def _indicator(tiles, F):
    phi = np.zeros(F)
    phi[sorted(tiles)] = 1.0
    return phi


def _train_point(cfg: ExperimentConfig, algo: str, C: int, rep: int, train, test) -> MetricRow:
    from .dmtfl import run_dmtfl

    seed = cfg.hp.seed + rep if cfg.vary_seed else cfg.hp.seed
    hp = dataclasses.replace(cfg.hp, cache_budget=float(C), seed=seed)
    loss = LossConfig(hp.e_floor, hp.H, hp.predictor)
    F = train[0].n_tiles
    B = len(train)
    start = time.perf_counter()
    if algo == "dmtfl":
        res = run_dmtfl(train, hp, w_policy=cfg.w_policy, threads=1)
        deployed = [m.phi for m in res.models]
        caches = [cache_set_from_model(p, C) for p in deployed]
    elif algo in ("fedavg", "fedprox"):
        if algo == "fedavg":
            g = fedavg(train, hp.T, hp.eta, cfg.local_steps, hp.cache_budget, loss)
        else:
            g = fedprox(train, hp.T, hp.eta, cfg.local_steps, cfg.fedprox_mu, hp.cache_budget, loss)
        deployed = [g.phi] * B
        caches = [cache_set_from_model(g.phi, C)] * B
    else:
        tiles = heuristic_popular(train, C)
        deployed = [_indicator(tiles, F)] * B
        caches = [tiles] * B
    elapsed = time.perf_counter() - start if cfg.record_wall_time else 0.0
    # training loss of each BS's deployed cache vector, averaged over BSs
    objective = float(np.mean([empirical_loss(p, d, loss) for p, d in zip(deployed, train)]))
    return MetricRow(algo, int(C), C / F, rep, avg_cache_hit(caches, test), min_per_bs_hit(caches, test),
                     objective, elapsed)


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None) -> list[MetricRow]:
    """Train and evaluate every (algorithm, C, repetition) point.

    Each BS's data is split 80/20 by sample order; models are trained on the
    first part and scored on the second. Rows are sorted by algorithm, C and
    repetition. When an output path is given (argument or config) the rows
    are written as CSV.
    """
    splits = {}
    for rep in range(cfg.repetitions):
        parts = [train_test_split(d, cfg.train_frac) for d in _datasets_for(cfg, rep)]
        splits[rep] = ([a for a, _ in parts], [b for _, b in parts])
    jobs = [(a, C, r) for r in range(cfg.repetitions) for C in cfg.cache_sizes for a in cfg.algorithms]

    def job(j):
        a, C, r = j
        return _train_point(cfg, a, C, r, *splits[r])

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            rows = list(pool.map(job, jobs))
    else:
        rows = [job(j) for j in jobs]
    order = {a: k for k, a in enumerate(ALGORITHMS)}
    rows.sort(key=lambda r: (order[r.algorithm], r.C, r.repetition))
    path = out or cfg.out
    if path:
        write_metrics_csv(path, rows, cfg)
    return rows


def write_metrics_csv(path, rows: Sequence[MetricRow], cfg: Optional[ExperimentConfig] = None) -> None:
    with open(path, "w", newline="") as fh:
        if cfg is not None:
            for key, value in config_summary(cfg):
                fh.write(f"# {key} = {value}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(METRIC_FIELDS)
        for r in rows:
            out.writerow([r.algorithm, r.C, repr(r.C_frac), r.repetition, repr(r.avg_cache_hit),
                          repr(r.min_per_bs_hit), repr(r.final_objective), repr(r.wall_time)])


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append(MetricRow(r["algorithm"], int(r["C"]), float(r["C_frac"]), int(r["repetition"]),
                              float(r["avg_cache_hit"]), float(r["min_per_bs_hit"]),
                              float(r["final_objective"]), float(r["wall_time"])))
    return rows


def summarise(rows: Sequence[MetricRow]) -> dict:
    """Seed-averaged ``(avg_cache_hit, min_per_bs_hit)`` keyed by ``(algorithm, C)``."""
    acc: dict = {}
    for r in rows:
        acc.setdefault((r.algorithm, r.C), []).append((r.avg_cache_hit, r.min_per_bs_hit))
    return {k: tuple(np.mean(v, axis=0)) for k, v in acc.items()}


# ---------------------------------------------------------------- CLI

def _with_seed(cfg: ExperimentConfig, seed: Optional[int], threads: Optional[int]) -> ExperimentConfig:
    if seed is not None:
        cfg = dataclasses.replace(cfg, gen=dataclasses.replace(cfg.gen, seed=seed),
                                  hp=dataclasses.replace(cfg.hp, seed=seed))
    if threads is not None:
        cfg = dataclasses.replace(cfg, threads=threads)
    return cfg


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else desk_config()
    cfg = _with_seed(cfg, args.seed, args.threads)
    out = args.out or cfg.out or "metrics.csv"
    rows = run_experiment(cfg, out)
    for (algo, C), (avg, worst) in sorted(summarise(rows).items()):
        print(f"{algo:10s} C={C:3d}  avg_hit={avg:.4f}  min_bs_hit={worst:.4f}")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _cmd_gen(args) -> int:
    cfg = load_config(args.config) if args.config else desk_config()
    cfg = _with_seed(cfg, args.seed, None)
    data = synth_noniid(cfg.gen)
    out = args.out or "datasets.csv"
    write_dataset_csv(out, data)
    print(f"wrote {len(data)} datasets ({', '.join(str(d.size) for d in data)} samples) to {out}")
    return 0


def _cmd_bound(args) -> int:
    from .bounds import evaluate_bound, write_bound_csv
    from .dmtfl import run_dmtfl

    cfg = load_config(args.config) if args.config else desk_config()
    cfg = _with_seed(cfg, args.seed, args.threads)
    C = args.cache_size if args.cache_size is not None else cfg.cache_sizes[0]
    hp = dataclasses.replace(cfg.hp, cache_budget=float(C))
    data = synth_noniid(cfg.gen)
    res = run_dmtfl(data, hp, w_policy=cfg.w_policy, threads=cfg.threads)
    rep = evaluate_bound(res.phi, res.weights, res.alpha, data, res.discrepancy, hp, K=args.draws)
    out = args.out or "bound.csv"
    write_bound_csv(out, [rep])
    print(f"theta_hat={rep.theta_hat:.4f} rademacher={rep.rademacher:.4f} penalty={rep.penalty:.4f} "
          f"cover_term={rep.cover_term:.4f} total={rep.total:.4f}")
    print(f"wrote {out}")
    return 0


def _cmd_cover_trial(args) -> int:
    from .bounds import SyntheticSource, coverage_trial

    seed = 0 if args.seed is None else args.seed
    gen = GenConfig(B=args.bs, samples_per_bs=args.m, seed=seed)
    hp = HyperParams(cache_budget=float(args.cache_size), delta=args.delta, seed=seed, predictor="cached")
    res = coverage_trial(SyntheticSource(gen), hp, args.trials, sizes=[args.m] * args.bs, seed=seed,
                         threads=args.threads or 1)
    out = args.out or "coverage.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "true_theta", "theta_hat", "bound", "covered"])
        for k, (t, r) in enumerate(zip(res.true_theta, res.reports)):
            w.writerow([k, repr(float(t)), repr(r.theta_hat), repr(r.total), int(t <= r.total)])
    print(f"coverage={res.fraction:.3f} violations={res.violations}/{res.trials} "
          f"bare_empirical_coverage={res.mutated_fraction:.3f}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmtfl-cache", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=True):
        sp.add_argument("--seed", type=int, default=None, help="override every seed")
        sp.add_argument("--out", default=None, help="output CSV path")
        if threads:
            sp.add_argument("--threads", type=int, default=None, help="worker threads")

    sp = sub.add_parser("run", help="run a cache-size sweep and write metrics CSV")
    sp.add_argument("config", nargs="?", help="INI config (default: desk sweep)")
    common(sp)
    sp.set_defaults(func=_cmd_run)

    sp = sub.add_parser("gen", help="write synthetic datasets as CSV")
    sp.add_argument("config", nargs="?")
    common(sp, threads=False)
    sp.set_defaults(func=_cmd_gen)

    sp = sub.add_parser("bound", help="train DMTFL and evaluate the generalisation bound")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--cache-size", type=int, default=None)
    sp.add_argument("--draws", type=int, default=100, help="Rademacher sign draws")
    common(sp)
    sp.set_defaults(func=_cmd_bound)

    sp = sub.add_parser("cover-trial", help="Monte-Carlo coverage of the bound")
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--bs", type=int, default=2)
    sp.add_argument("--m", type=int, default=200)
    sp.add_argument("--delta", type=float, default=0.1)
    sp.add_argument("--cache-size", type=int, default=6)
    common(sp)
    sp.set_defaults(func=_cmd_cover_trial)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
