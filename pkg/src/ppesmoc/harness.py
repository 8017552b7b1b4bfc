"""Experiment runner: the batch BO loop, persistence and aggregation.

Config files use INI syntax with a single ``[experiment]`` section whose
keys mirror :class:`ExperimentConfig`, e.g.::

    [experiment]
    problem = constr
    method = ppesmoc
    batch_size = 4
    iterations = 15
    repetitions = 25
    seed = 1
    output_dir = runs/constr_ppesmoc
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import torch

from . import __version__
from .acquisition import build_context, optimize_batch
from .baselines import parallel_sequential, random_batch
from .gp import HyperPrior, KernelParams, SurrogateSet, fit, output_normalization, \
    slice_sample_hypers
from .metrics import (log_relative_hv_gap, recommend, reference_point,
                      score_recommendation, true_hypervolume)
from .problems import evaluate_noisy_many, get_problem

logger = logging.getLogger(__name__)

METHODS = ("ppesmoc", "ps_pesmoc", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "constr"
    method: str = "ppesmoc"
    batch_size: int = 4
    iterations: int = 15
    repetitions: int = 1
    seed: int = 0
    noisy: bool = False
    n_pareto: int = 10
    n_hypers: int = 10
    burn_in: int = 20
    pareto_grid: int = 1000
    max_pareto: int = 50
    num_features: int = 500
    n_restarts: int = 5
    max_iters: int = 100
    recommend_grid: int = 10_000
    truth_grid: int = 1000
    feasibility_threshold: float = 0.95
    infeasible_policy: str = "zero"
    synthetic_dim: int = 2
    synthetic_K: int = 2
    synthetic_J: int = 2
    synthetic_seed: int = 0
    output_dir: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.batch_size < 1 or self.iterations < 1 or self.repetitions < 1:
            raise ValueError("batch_size, iterations and repetitions must be >= 1")

    def make_problem(self):
        return get_problem(self.problem, noisy=self.noisy, seed=self.synthetic_seed,
                           dim=self.synthetic_dim, K=self.synthetic_K, J=self.synthetic_J)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        parser.read_file(fh)
    if "experiment" not in parser:
        raise ValueError("config needs an [experiment] section")
    sec = parser["experiment"]
    kw = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name not in sec:
            continue
        if f.type in ("bool", bool):
            kw[f.name] = sec.getboolean(f.name)
        elif f.type in ("int", int):
            kw[f.name] = sec.getint(f.name)
        elif f.type in ("float", float):
            kw[f.name] = sec.getfloat(f.name)
        else:
            kw[f.name] = sec.get(f.name)
    unknown = set(sec) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**kw)


@dataclass
class IterationRow:
    iteration: int
    seconds: float
    batch: np.ndarray          # (B, d) in problem coordinates
    observations: np.ndarray   # (B, K+J) noisy values
    hv: float
    log_gap: float
    gp_refits: int


@dataclass
class RunRecord:
    config: ExperimentConfig
    repetition: int
    rows: list = field(default_factory=list)
    status: str = "ok"
    hv_truth: float = float("nan")

    def deterministic_view(self):
        """Everything except wall-clock timings (used for reproducibility checks)."""
        return [(r.iteration, r.batch.tobytes(), r.observations.tobytes(), r.hv,
                 r.log_gap, r.gp_refits) for r in self.rows]


class _Surrogates:
    """Data set plus hyper-sample state for all black-boxes (unit-cube inputs)."""

    def __init__(self, K, J, dim, cfg: ExperimentConfig, rng):
        self.K, self.J, self.dim = K, J, dim
        self.cfg = cfg
        self.rng = rng
        self.prior = HyperPrior()
        self.X = np.zeros((0, dim))
        self.Y = np.zeros((0, K + J))
        self.last = [None] * (K + J)
        self.sets = None
        self.refit_cycles = 0

    def add(self, U, Y):
        self.X = np.vstack([self.X, U])
        self.Y = np.vstack([self.Y, Y])

    def refit(self):
        H = self.cfg.n_hypers
        per_box = []
        for p in range(self.K + self.J):
            y = self.Y[:, p]
            mean, scale = output_normalization(y)
            start = self.last[p] or self.prior.point(self.dim)
            base = fit(self.X, y, start, mean=mean, scale=scale)
            burn = self.cfg.burn_in if self.last[p] is None else max(self.cfg.burn_in // 2, 1)
            post = slice_sample_hypers(base, self.prior, H, self.rng, burn_in=burn,
                                       start=start)
            self.last[p] = post.samples[-1]
            per_box.append([fit(self.X, y, prm, mean=mean, scale=scale)
                            for prm in post.samples])
        self.sets = tuple(SurrogateSet([per_box[p][h] for p in range(self.K)],
                                       [per_box[p][h] for p in range(self.K, self.K + self.J)])
                          for h in range(H))
        self.refit_cycles += 1
        return self.sets


def _select(cfg: ExperimentConfig, sur: _Surrogates, rng, t: int):
    """Return (unit-cube batch, hallucination refit cycles)."""
    B, d = cfg.batch_size, sur.dim
    unit = np.tile([0.0, 1.0], (d, 1))
    if t == 1 or cfg.method == "random":
        return random_batch(unit, B, rng), 0
    ep_kwargs = {}
    if cfg.method == "ppesmoc":
        ctx = build_context(sur.sets, rng, cfg.n_pareto, B, cfg.pareto_grid, cfg.max_pareto,
                            cfg.num_features, ep_kwargs)
        prop = optimize_batch(ctx, cfg.n_restarts, cfg.max_iters, rng)
        return prop.X, 0

    def rebuild(sets, r):
        return build_context(sets, r, cfg.n_pareto, 1, cfg.pareto_grid, cfg.max_pareto,
                             cfg.num_features, ep_kwargs)

    ctx = rebuild(sur.sets, rng)
    return parallel_sequential(ctx, B, rebuild, rng, cfg.n_restarts, cfg.max_iters)


def run_experiment(cfg: ExperimentConfig, repetition: int = 0, problem=None) -> RunRecord:
    """One repetition of the batch BO loop, deterministic given the config seed."""
    import warnings

    problem = cfg.make_problem() if problem is None else problem
    ss = np.random.SeedSequence([cfg.seed, repetition])
    r_select, r_noise, r_hyper, r_rec = (np.random.default_rng(s) for s in ss.spawn(4))
    rec = RunRecord(cfg, repetition)
    try:
        ref = reference_point(problem)
        hv_truth = true_hypervolume(problem, cfg.truth_grid, ref)
        rec.hv_truth = hv_truth
        sur = _Surrogates(problem.K, problem.J, problem.dim, cfg, r_hyper)
        for t in range(1, cfg.iterations + 1):
            cycles_before = sur.refit_cycles
            t0 = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                U, hallucinations = _select(cfg, sur, r_select, t)
            seconds = time.perf_counter() - t0
            X = problem.from_unit(U)
            F, C = evaluate_noisy_many(problem, X, r_noise)
            Y = np.hstack([F, C])
            sur.add(U, Y)
            sur.refit()
            recm = recommend(sur.sets, cfg.recommend_grid, cfg.feasibility_threshold, r_rec)
            hv = score_recommendation(problem, recm, ref, cfg.infeasible_policy)
            gap = log_relative_hv_gap(hv_truth, hv)
            refits = sur.refit_cycles - cycles_before + hallucinations
            rec.rows.append(IterationRow(t, seconds, X, Y, hv, gap, refits))
            logger.info("rep %d iter %d: hv=%.6g log_gap=%.3f (%.2fs)",
                        repetition, t, hv, gap, seconds)
    except Exception as err:  # one bad repetition must not kill the others
        logger.exception("repetition %d aborted", repetition)
        rec.status = f"error: {type(err).__name__}: {err}"
    return rec


# ---------------------------------------------------------------------------
# Persistence


def csv_header(B, d, P):
    cols = ["iter", "seconds", "hv", "log_gap"]
    cols += [f"x{b}_{i}" for b in range(B) for i in range(d)]
    cols += [f"y{b}_{p}" for b in range(B) for p in range(P)]
    return cols


def write_record(rec: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"rep_{rec.repetition:03d}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if rec.rows:
            B, d = rec.rows[0].batch.shape
            P = rec.rows[0].observations.shape[1]
        else:
            B, d, P = rec.config.batch_size, 0, 0
        w.writerow(csv_header(B, d, P))
        for r in rec.rows:
            w.writerow([r.iteration, f"{r.seconds:.6f}", repr(float(r.hv)),
                        repr(float(r.log_gap))]
                       + [repr(float(v)) for v in r.batch.ravel()]
                       + [repr(float(v)) for v in r.observations.ravel()])
    return path


def write_manifest(cfg: ExperimentConfig, records, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": dataclasses.asdict(cfg),
        "seed": cfg.seed,
        "versions": {"ppesmoc": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "torch": torch.__version__},
        "repetitions": [{"repetition": r.repetition, "status": r.status,
                         "hv_truth": r.hv_truth, "total_evaluations": len(r.rows) * cfg.batch_size,
                         "gp_refits": [row.gp_refits for row in r.rows]} for r in records],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def run_all(cfg: ExperimentConfig):
    problem = cfg.make_problem()
    records = []
    for rep in range(cfg.repetitions):
        rec = run_experiment(cfg, rep, problem)
        records.append(rec)
        if cfg.output_dir:
            write_record(rec, cfg.output_dir)
    if cfg.output_dir:
        write_manifest(cfg, records, cfg.output_dir)
        write_summary(aggregate(records), Path(cfg.output_dir) / "summary.csv")
    return records


# ---------------------------------------------------------------------------
# Aggregation


def _summary_rows(gaps, secs):
    """gaps, secs: (R, T) arrays with NaN for missing rows."""
    rows = []
    for t in range(gaps.shape[1]):
        g = gaps[:, t][np.isfinite(gaps[:, t])]
        s = secs[:, t][np.isfinite(secs[:, t])]
        n = len(g)
        mean = float(np.mean(g)) if n else float("nan")
        se = float(np.std(g, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        med = float(np.median(s)) if len(s) else float("nan")
        mad = float(np.median(np.abs(s - med))) if len(s) else float("nan")
        rows.append({"iter": t + 1, "n": n, "mean_log_gap": mean, "stderr_log_gap": se,
                     "median_seconds": med, "mad_seconds": mad})
    return rows


def aggregate(records) -> list:
    """Per-iteration mean/stderr of the log gap and median/MAD of selection time."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    T = max(len(r.rows) for r in records)
    gaps = np.full((len(records), T), np.nan)
    secs = np.full((len(records), T), np.nan)
    for i, r in enumerate(records):
        for j, row in enumerate(r.rows):
            gaps[i, j] = row.log_gap
            secs[i, j] = row.seconds
    return _summary_rows(gaps, secs)


def aggregate_dir(path) -> list:
    files = sorted(Path(path).glob("rep_*.csv"))
    if not files:
        raise FileNotFoundError(f"no rep_*.csv files in {path}")
    tables = []
    for f in files:
        with open(f) as fh:
            tables.append(list(csv.DictReader(fh)))
    T = max(len(t) for t in tables)
    gaps = np.full((len(tables), T), np.nan)
    secs = np.full((len(tables), T), np.nan)
    for i, tab in enumerate(tables):
        for j, row in enumerate(tab):
            gaps[i, j] = float(row["log_gap"])
            secs[i, j] = float(row["seconds"])
    return _summary_rows(gaps, secs)


def write_summary(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path
