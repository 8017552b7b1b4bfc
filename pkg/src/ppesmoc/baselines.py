"""Comparison strategies: random batches and parallel-sequential selection."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .acquisition import AcquisitionContext, optimize_batch
from .gp import SurrogateSet, fit


def random_batch(bounds, B: int, rng: np.random.Generator) -> np.ndarray:
    if B < 1:
        raise ValueError("B must be >= 1")
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds.T
    return lo + rng.uniform(size=(B, len(bounds))) * (hi - lo)


def hallucinate(surrogates: Sequence[SurrogateSet], x) -> tuple:
    """Condition every model on its own posterior mean at ``x``.

    Hyper-parameters and output normalization are kept fixed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = []
    for sset in surrogates:
        new = []
        for m in sset.models:
            h = m.predict_marginal(x)[0]
            new.append(fit(np.vstack([m.X, x]), np.r_[m.y, h], m.params,
                           mean=m.mean, scale=m.scale))
        out.append(SurrogateSet(new[:sset.K], new[sset.K:]))
    return tuple(out)


def parallel_sequential(ctx: AcquisitionContext, B: int,
                        rebuild: Callable[[tuple, np.random.Generator], AcquisitionContext],
                        rng: np.random.Generator, n_restarts: int = 5,
                        max_iters: int = 100):
    """Greedy batch built from single-point acquisitions with hallucinations.

    ``rebuild(surrogates, rng)`` must return a fresh single-point context for
    the hallucinated models (new Pareto samples and EP).  Returns the batch
    and the number of hallucination refit cycles performed (equal to B).
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    chosen = []
    surrogates = ctx.surrogates
    cur = ctx
    n_refits = 0
    for i in range(B):
        prop = optimize_batch(cur, n_restarts=n_restarts, max_iters=max_iters, rng=rng, B=1)
        chosen.append(prop.X[0])
        surrogates = hallucinate(surrogates, prop.X[0])
        n_refits += 1
        if i + 1 < B:
            cur = rebuild(surrogates, rng)
    return np.array(chosen), n_refits
