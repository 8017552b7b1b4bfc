"""Constrained multi-objective test problems.

All problems are minimization problems with constraints in slack form
``c_j(x) >= 0``.  Evaluators are vectorized over rows of ``X``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from .gp import KernelParams, fit, sample_function


class DomainError(ValueError):
    """Input outside the problem's box."""


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    bounds: np.ndarray
    num_objectives: int
    num_constraints: int
    evaluator: Callable = field(repr=False)
    noise_std_objectives: np.ndarray = None
    noise_std_constraints: np.ndarray = None

    def __post_init__(self):
        bounds = np.asarray(self.bounds, dtype=float)
        if bounds.ndim != 2 or bounds.shape[1] != 2:
            raise ValueError("bounds must have shape (d, 2)")
        if np.any(bounds[:, 0] >= bounds[:, 1]):
            raise ValueError("need lo < hi in every dimension")
        if self.num_objectives < 1 or self.num_constraints < 0:
            raise ValueError("need K >= 1 and J >= 0")
        object.__setattr__(self, "bounds", bounds)
        for attr, n in (("noise_std_objectives", self.num_objectives),
                        ("noise_std_constraints", self.num_constraints)):
            v = getattr(self, attr)
            v = np.zeros(n) if v is None else np.broadcast_to(
                np.asarray(v, dtype=float), (n,)).copy()
            if np.any(v < 0):
                raise ValueError("noise std must be >= 0")
            object.__setattr__(self, attr, v)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def K(self) -> int:
        return self.num_objectives

    @property
    def J(self) -> int:
        return self.num_constraints

    @property
    def noise_std(self) -> np.ndarray:
        return np.concatenate([self.noise_std_objectives, self.noise_std_constraints])

    def to_unit(self, X):
        lo, hi = self.bounds.T
        return (np.asarray(X, dtype=float) - lo) / (hi - lo)

    def from_unit(self, U):
        lo, hi = self.bounds.T
        return lo + np.clip(np.asarray(U, dtype=float), 0.0, 1.0) * (hi - lo)


def _check_domain(problem: ProblemSpec, X, tol=1e-12):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != problem.dim:
        raise DomainError(f"expected dimension {problem.dim}, got {X.shape[1]}")
    lo, hi = problem.bounds.T
    span = hi - lo
    if np.any(X < lo - tol * span) or np.any(X > hi + tol * span) or not np.all(np.isfinite(X)):
        raise DomainError(f"point outside the bounds of {problem.name}")
    return X


def evaluate_many(problem: ProblemSpec, X):
    """Noiseless values at each row of X: arrays (n, K) and (n, J)."""
    X = _check_domain(problem, X)
    F, C = problem.evaluator(X)
    return (np.asarray(F, dtype=float).reshape(len(X), problem.K),
            np.asarray(C, dtype=float).reshape(len(X), problem.J))


def evaluate(problem: ProblemSpec, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DomainError("evaluate expects a single point")
    F, C = evaluate_many(problem, x[None])
    return F[0], C[0]


def evaluate_noisy(problem: ProblemSpec, x, rng: np.random.Generator):
    f, c = evaluate(problem, x)
    f = f + problem.noise_std_objectives * rng.standard_normal(problem.K)
    c = c + problem.noise_std_constraints * rng.standard_normal(problem.J)
    return f, c


def evaluate_noisy_many(problem: ProblemSpec, X, rng: np.random.Generator):
    F, C = evaluate_many(problem, X)
    F = F + problem.noise_std_objectives * rng.standard_normal(F.shape)
    C = C + problem.noise_std_constraints * rng.standard_normal(C.shape)
    return F, C


# ---------------------------------------------------------------------------
# Analytic benchmarks


def _bnh(X):
    x1, x2 = X.T
    f = np.stack([4 * x1**2 + 4 * x2**2, (x1 - 5) ** 2 + (x2 - 5) ** 2], 1)
    c = np.stack([25 - ((x1 - 5) ** 2 + x2**2),
                  (x1 - 8) ** 2 + (x2 + 3) ** 2 - 7.7], 1)
    return f, c


def _srn(X):
    x1, x2 = X.T
    f = np.stack([2 + (x1 - 2) ** 2 + (x2 - 2) ** 2, 9 * x1 - (x2 - 1) ** 2], 1)
    c = np.stack([225 - (x1**2 + x2**2), 3 * x2 - x1 - 10], 1)
    return f, c


def _tnk(X):
    x1, x2 = X.T
    f = np.stack([x1, x2], 1)
    c = np.stack([x1**2 + x2**2 - 1 - 0.1 * np.cos(16 * np.arctan2(x1, x2)),
                  0.5 - ((x1 - 0.5) ** 2 + (x2 - 0.5) ** 2)], 1)
    return f, c


def _osy(X):
    x1, x2, x3, x4, x5, x6 = X.T
    f1 = -(25 * (x1 - 2) ** 2 + (x2 - 2) ** 2 + (x3 - 1) ** 2
           + (x4 - 4) ** 2 + (x5 - 1) ** 2)
    f2 = np.sum(X**2, axis=1)
    c = np.stack([x1 + x2 - 2,
                  6 - x1 - x2,
                  2 - x2 + x1,
                  2 - x1 + 3 * x2,
                  4 - (x3 - 3) ** 2 - x4,
                  (x5 - 3) ** 2 + x6 - 4], 1)
    return np.stack([f1, f2], 1), c


def _constr(X):
    x1, x2 = X.T
    f = np.stack([x1, (1 + x2) / x1], 1)
    c = np.stack([x2 + 9 * x1 - 6, -x2 + 9 * x1 - 1], 1)
    return f, c


_TRUSS_LO = np.array([0.0, 0.0, 1.0])


def _two_bar_truss(X):
    # bars of zero cross-section divide by zero; nudge off the lower bound
    X = np.maximum(X, _TRUSS_LO + 1e-9)
    x1, x2, x3 = X.T
    f1 = x1 * np.sqrt(16 + x3**2) + x2 * np.sqrt(1 + x3**2)
    f2 = np.maximum(20 * np.sqrt(16 + x3) / (x1 * x3),
                    80 * np.sqrt(1 + x3**2) / (x2 * x3))
    c = (1e5 - f2)[:, None]
    return np.stack([f1, f2], 1), c


_BENCHMARKS = {
    "bnh": ([[0, 5], [0, 3]], 2, 2, _bnh),
    "srn": ([[-20, 20], [-20, 20]], 2, 2, _srn),
    "tnk": ([[0, np.pi], [0, np.pi]], 2, 2, _tnk),
    "osy": ([[0, 10], [0, 10], [1, 5], [0, 6], [1, 5], [0, 10]], 2, 6, _osy),
    "constr": ([[0.1, 10], [0, 5]], 2, 2, _constr),
    "two_bar_truss": ([[0, 0.01], [0, 0.01], [1, 3]], 2, 1, _two_bar_truss),
}


def benchmark_names():
    return sorted(_BENCHMARKS)


def get_benchmark(name: str, noisy: bool = False) -> ProblemSpec:
    key = name.lower().replace("-", "_")
    if key not in _BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {benchmark_names()}")
    bounds, K, J, fn = _BENCHMARKS[key]
    prob = ProblemSpec(key, np.array(bounds, dtype=float), K, J, fn)
    if noisy:
        std = benchmark_noise_std(key)
        prob = replace(prob, noise_std_objectives=std[:K], noise_std_constraints=std[K:])
    return prob


@lru_cache(maxsize=None)
def _probe_ranges(name: str, n_probe: int, seed: int):
    prob = get_benchmark(name)
    rng = np.random.default_rng(seed)
    U = rng.uniform(size=(n_probe, prob.dim))
    F, C = evaluate_many(prob, prob.from_unit(U))
    Y = np.hstack([F, C])
    return tuple(Y.max(0) - Y.min(0))


def benchmark_noise_std(name: str, n_probe: int = 100_000, seed: int = 0,
                        fraction: float = 0.01) -> np.ndarray:
    """Per-black-box noise std whose variance is ``fraction`` of the value range.

    The range of each function is estimated on a seeded uniform probe.
    """
    ranges = np.array(_probe_ranges(name.lower(), n_probe, seed))
    return np.sqrt(fraction * ranges)


# ---------------------------------------------------------------------------
# GP-prior synthetic problems


@dataclass(frozen=True)
class SyntheticGPProblem(ProblemSpec):
    seed: int = 0
    kernel_params: KernelParams = None
    samples: tuple = field(default=(), repr=False)


def make_synthetic(seed: int, dim: int, K: int = 2, J: int = 2,
                   kernel_params: KernelParams | None = None,
                   num_features: int = 500, noise_var: float = 0.0) -> SyntheticGPProblem:
    """Black-boxes drawn once from a zero-mean GP prior on the unit cube."""
    if num_features < 1:
        raise ValueError("num_features must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if kernel_params is None:
        kernel_params = KernelParams(1.0, np.full(dim, 0.25))
    if kernel_params.dim != dim:
        raise ValueError("kernel lengthscales do not match dim")
    rng = np.random.default_rng(seed)
    prior = fit(np.zeros((0, dim)), np.zeros(0), kernel_params)
    samples = tuple(sample_function(prior, num_features, rng) for _ in range(K + J))

    def evaluator(X):
        vals = np.stack([s(X) for s in samples], axis=1)
        return vals[:, :K], vals[:, K:]

    std = np.sqrt(noise_var)
    return SyntheticGPProblem(
        name=f"synthetic_d{dim}_k{K}_j{J}_s{seed}", bounds=np.tile([0.0, 1.0], (dim, 1)),
        num_objectives=K, num_constraints=J, evaluator=evaluator,
        noise_std_objectives=np.full(K, std), noise_std_constraints=np.full(J, std),
        seed=seed, kernel_params=kernel_params, samples=samples)


def get_problem(name: str, noisy: bool = False, **synthetic_kw) -> ProblemSpec:
    """Resolve a benchmark name or ``synthetic`` (with keyword settings)."""
    if name.lower().startswith("synthetic"):
        kw = dict(seed=0, dim=2, K=2, J=2)
        kw.update(synthetic_kw)
        if noisy and "noise_var" not in kw:
            kw["noise_var"] = 0.1
        return make_synthetic(**kw)
    return get_benchmark(name, noisy=noisy)
