"""Dominance tests and sampling of feasible Pareto sets from GP posteriors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gp import FunctionSample, SurrogateSet, sample_function


def dominates(a, b) -> bool:
    """True if ``a`` Pareto-dominates ``b`` (minimization)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return bool(np.all(a <= b) and np.any(a < b))


def _front_2d(Y):
    order = np.lexsort((Y[:, 1], Y[:, 0]))
    f1, f2 = Y[order, 0], Y[order, 1]
    starts = np.flatnonzero(np.r_[True, f1[1:] != f1[:-1]])
    group_min = np.minimum.reduceat(f2, starts)
    # best f2 among groups with strictly smaller f1
    prev = np.r_[np.inf, np.minimum.accumulate(group_min)[:-1]]
    keep_group = group_min < prev
    sizes = np.diff(np.r_[starts, len(f1)])
    gid = np.repeat(np.arange(len(starts)), sizes)
    keep = keep_group[gid] & (f2 == group_min[gid])
    return np.sort(order[keep])


def pareto_front(values) -> np.ndarray:
    """Sorted indices of the rows not dominated by any other row."""
    Y = np.asarray(values, dtype=float)
    if Y.ndim != 2:
        Y = Y.reshape(len(Y), -1)
    n = len(Y)
    if n == 0:
        return np.zeros(0, dtype=int)
    if Y.shape[1] == 1:
        return np.flatnonzero(Y[:, 0] == Y[:, 0].min())
    if Y.shape[1] == 2:
        return _front_2d(Y)
    alive = np.ones(n, dtype=bool)
    for i in np.lexsort(Y.T[::-1]):
        if not alive[i]:
            continue
        le = np.all(Y[i] <= Y, axis=1)
        lt = np.any(Y[i] < Y, axis=1)
        alive &= ~(le & lt)
    return np.flatnonzero(alive)


@dataclass(frozen=True)
class ParetoSample:
    points: np.ndarray
    objective_values: np.ndarray
    function_samples: tuple = field(repr=False)
    candidates: np.ndarray = field(default=None, repr=False)
    infeasible_fallback: bool = False

    @property
    def M(self) -> int:
        return len(self.points)


def feasible_pareto_indices(F, C) -> np.ndarray:
    """Indices of the non-dominated rows among those with all C >= 0."""
    feas = np.flatnonzero(np.all(C >= 0, axis=1)) if C.shape[1] else np.arange(len(F))
    return feas[pareto_front(F[feas])]


def sample_pareto_set(models: SurrogateSet, grid_size: int = 1000, M_max: int = 50,
                      rng: np.random.Generator = None, num_features: int = 500,
                      X_extra=None) -> ParetoSample:
    """Solve one joint posterior function sample on a random grid.

    The candidate set is ``grid_size`` uniform points in the unit cube plus
    the observed inputs (and any ``X_extra``).
    """
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    d = models.dim
    fs = tuple(sample_function(m, num_features, rng) for m in models.models)
    parts = [rng.uniform(size=(grid_size, d)), models.X]
    if X_extra is not None:
        parts.append(np.atleast_2d(X_extra))
    cand = np.vstack(parts)
    vals = np.stack([f(cand) for f in fs], axis=1)
    F, C = vals[:, :models.K], vals[:, models.K:]
    idx = feasible_pareto_indices(F, C)
    fallback = False
    if len(idx) == 0:
        violation = np.sum(np.maximum(0.0, -C), axis=1)
        idx = np.array([int(np.argmin(violation))])
        fallback = True
    if len(idx) > M_max:
        idx = np.sort(rng.choice(idx, size=M_max, replace=False))
    return ParetoSample(cand[idx], F[idx], fs, cand, fallback)
