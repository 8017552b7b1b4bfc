"""Hypervolume, recommendations and the log relative hypervolume gap."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .pareto import feasible_pareto_indices, pareto_front
from .problems import ProblemSpec, evaluate_many

EPS = 1e-12


def hypervolume_2d(front, ref) -> float:
    """Area dominated by ``front`` inside the box bounded above by ``ref``."""
    Y = np.asarray(front, dtype=float).reshape(-1, np.size(ref))
    ref = np.asarray(ref, dtype=float)
    if ref.shape != (2,):
        raise ValueError("hypervolume_2d supports two objectives only")
    Y = Y[np.all(Y < ref, axis=1)]
    if len(Y) == 0:
        return 0.0
    Y = Y[pareto_front(Y)]
    Y = np.unique(Y, axis=0)
    Y = Y[np.argsort(Y[:, 0])]
    widths = np.diff(np.r_[Y[:, 0], ref[0]])
    return float(np.sum(widths * (ref[1] - Y[:, 1])))


def log_relative_hv_gap(hv_truth: float, hv_rec: float, eps: float = EPS) -> float:
    if not hv_truth > 0:
        raise ValueError("hv_truth must be positive")
    hv_rec = min(max(hv_rec, 0.0), hv_truth)
    return float(np.log((hv_truth - hv_rec) / hv_truth + eps))


@dataclass(frozen=True)
class Recommendation:
    points: np.ndarray            # unit-cube inputs
    predicted: np.ndarray         # (n, K) hyper-averaged predicted objectives
    feasibility: np.ndarray       # (n, J) probabilities


def recommend(surrogates, grid_size: int = 10_000, feasibility_threshold: float = 0.95,
              rng: np.random.Generator = None, X_extra=None) -> Recommendation:
    """Non-dominated set of predicted objectives among probably-feasible grid points.

    Feasibility probability of each constraint is the hyper-averaged
    Gaussian probability of c_j(x) >= 0.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    first = surrogates[0]
    K, J = first.K, first.J
    parts = [rng.uniform(size=(grid_size, first.dim)), first.X]
    if X_extra is not None:
        parts.append(np.atleast_2d(X_extra))
    G = np.vstack(parts)
    obj_mean = np.zeros((K, len(G)))
    logp = np.zeros((J, len(G)))
    probs = np.zeros((J, len(G)))
    for sset in surrogates:
        for k, m in enumerate(sset.objectives):
            obj_mean[k] += m.predict_marginal(G)[0]
        for j, m in enumerate(sset.constraints):
            mu, var = m.predict_marginal(G)
            probs[j] += np.exp(log_ndtr(mu / np.sqrt(np.maximum(var, 1e-300))))
    obj_mean /= len(surrogates)
    probs /= len(surrogates)
    ok = np.all(probs >= feasibility_threshold, axis=0) if J else np.ones(len(G), bool)
    idx = np.flatnonzero(ok)
    F = obj_mean.T
    idx = idx[pareto_front(F[idx])]
    return Recommendation(G[idx], F[idx], probs[:, idx].T)


def unit_grid(dim: int, grid_size: int, max_points: int = 2_000_000, seed: int = 0):
    """Regular grid with ``grid_size`` nodes per axis, or a seeded random design
    of ``max_points`` points when the full grid would be larger."""
    if grid_size ** dim <= max_points:
        axes = [np.linspace(0.0, 1.0, grid_size)] * dim
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, dim)
    return np.random.default_rng(seed).uniform(size=(max_points, dim))


def _evaluate_unit(problem: ProblemSpec, U, chunk: int = 50_000):
    Fs, Cs = [], []
    for i in range(0, len(U), chunk):
        F, C = evaluate_many(problem, problem.from_unit(U[i:i + chunk]))
        Fs.append(F)
        Cs.append(C)
    return np.vstack(Fs), np.vstack(Cs)


_REF_CACHE: dict = {}
_HV_CACHE: dict = {}


def reference_point(problem: ProblemSpec, n_probe: int = 100_000, seed: int = 0,
                    margin: float = 0.01) -> np.ndarray:
    """Componentwise max of the objectives over a seeded probe, plus a margin."""
    key = (problem.name, n_probe, seed, margin)
    if key not in _REF_CACHE:
        U = np.random.default_rng(seed).uniform(size=(n_probe, problem.dim))
        F, _ = _evaluate_unit(problem, U)
        hi, lo = F.max(0), F.min(0)
        _REF_CACHE[key] = hi + margin * (hi - lo)
    return _REF_CACHE[key].copy()


def true_front(problem: ProblemSpec, grid_size: int = 400):
    U = unit_grid(problem.dim, grid_size)
    F, C = _evaluate_unit(problem, U)
    idx = feasible_pareto_indices(F, C)
    return U[idx], F[idx]


def true_hypervolume(problem: ProblemSpec, grid_size: int = 400, ref=None) -> float:
    ref = reference_point(problem) if ref is None else np.asarray(ref, dtype=float)
    key = (problem.name, grid_size, tuple(ref))
    if key not in _HV_CACHE:
        _, F = true_front(problem, grid_size)
        _HV_CACHE[key] = hypervolume_2d(F, ref)
    return _HV_CACHE[key]


def score_recommendation(problem: ProblemSpec, rec: Recommendation, ref,
                         infeasible_policy: str = "zero") -> float:
    """Hypervolume of the true objective values at the recommended points.

    With ``infeasible_policy="zero"`` a recommendation containing any truly
    infeasible point scores 0; with ``"drop"`` such points are ignored.
    """
    if len(rec.points) == 0:
        return 0.0
    F, C = _evaluate_unit(problem, rec.points)
    feas = np.all(C >= 0, axis=1)
    if not feas.all():
        if infeasible_policy == "zero":
            return 0.0
        if infeasible_policy != "drop":
            raise ValueError(f"unknown infeasible policy {infeasible_policy!r}")
        F = F[feas]
    return hypervolume_2d(F, ref)
