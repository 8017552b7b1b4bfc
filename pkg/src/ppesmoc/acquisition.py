"""PPESMOC acquisition over batches, its gradient and its optimization.

The EP factors on Pareto and observed points are fixed once EP has
converged.  For a candidate batch X, only the Omega factors between the
batch and each Pareto point are refined, once and undamped, starting
from zero.  That part is written in torch so the gradient w.r.t. X is
obtained by automatic differentiation.

Inputs live in the unit cube unless ``bounds`` says otherwise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import linalg, optimize
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .ep import EPResult, ep_priors, run_ep, site_naturals
from .gp import SurrogateSet, matern52
from .pareto import ParetoSample, feasible_pareto_indices, sample_pareto_set

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SQRT5 = 5.0 ** 0.5
LOG_2PI_E = float(np.log(2 * np.pi * np.e))


class AcquisitionError(RuntimeError):
    pass


class InsufficientSamplesError(AcquisitionError):
    pass


def entropy_gaussian(cov, n_blocks: int = 1) -> float:
    """Differential entropy of independent Gaussian blocks.

    ``cov`` is a single (B, B) matrix or a stack (n_blocks, B, B).
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 2:
        cov = np.broadcast_to(cov, (n_blocks,) + cov.shape)
    total = 0.0
    for C in cov:
        B = C.shape[0]
        try:
            L = linalg.cholesky(C, lower=True)
        except linalg.LinAlgError:
            try:
                L = linalg.cholesky(C + 1e-10 * np.eye(B), lower=True)
            except linalg.LinAlgError:
                raise AcquisitionError("covariance not positive definite") from None
        total += 0.5 * (B * LOG_2PI_E + 2.0 * np.sum(np.log(np.diag(L))))
    return float(total)


# ---------------------------------------------------------------------------
# Context


@dataclass
class _Group:
    """Stacked per-(sample, black-box) tensors for objectives or constraints."""

    O: torch.Tensor          # (S, n_o, d) Pareto points (padded) then observations
    ls: torch.Tensor         # (S, P, d)
    amp2: torch.Tensor       # (S, P)
    mean: torch.Tensor       # (S, P)
    scale: torch.Tensor      # (S, P)
    noise: torch.Tensor      # (S, P) raw observation noise variance
    w: torch.Tensor          # (S, P, N)
    L: torch.Tensor          # (S, P, N, N) Cholesky factor of K + noise
    W: torch.Tensor          # (S, P, N, n_o) L^-1 k(X_train, O)
    G: torch.Tensor          # (S, P, n_o, n_o)
    v: torch.Tensor          # (S, P, n_o)
    R: torch.Tensor          # (S, P, n_o, M)
    m0: torch.Tensor         # (S, P, M) CPD means at Pareto points
    C0: torch.Tensor         # (S, P, M, M) CPD covariance at Pareto points

    @property
    def P(self) -> int:
        return self.amp2.shape[1]


@dataclass
class AcquisitionContext:
    surrogates: tuple
    samples: tuple            # ParetoSample per s
    ep_results: tuple         # EPResult per s
    hyper_index: tuple        # hyper sample used by Pareto sample s
    X_train: np.ndarray
    B: int = 1
    bounds: np.ndarray = None
    obj: _Group = field(default=None, repr=False)
    con: _Group = field(default=None, repr=False)
    mask: torch.Tensor = field(default=None, repr=False)   # (S, M) valid Pareto slots

    @property
    def S(self) -> int:
        return len(self.samples)

    @property
    def K(self) -> int:
        return self.surrogates[0].K

    @property
    def J(self) -> int:
        return self.surrogates[0].J

    @property
    def dim(self) -> int:
        return self.X_train.shape[1]


def _group_tensors(sets, samples, results, X_train, M_max, which):
    S = len(samples)
    N, d = X_train.shape
    n_o = M_max + N
    models = [getattr(st, which) for st in sets]
    P = len(models[0])
    O = np.zeros((S, n_o, d))
    ls = np.ones((S, P, d))
    amp2, mean, scale, noise = (np.ones((S, P)) for _ in range(4))
    w = np.zeros((S, P, N))
    Lc = np.tile(np.eye(N), (S, P, 1, 1))
    W = np.zeros((S, P, N, n_o))
    G = np.zeros((S, P, n_o, n_o))
    v = np.zeros((S, P, n_o))
    R = np.zeros((S, P, n_o, M_max))
    m0 = np.zeros((S, P, M_max))
    C0 = np.tile(np.eye(M_max), (S, P, 1, 1))
    for s in range(S):
        ps, res = samples[s], results[s]
        M = ps.M
        real = np.r_[np.arange(M), M_max + np.arange(N)]
        O[s, :M] = ps.points
        O[s, M:M_max] = ps.points[0]
        O[s, M_max:] = X_train
        Lam, eta, cL, ceta = site_naturals(res.factors, res.priors.n)
        pri = res.priors
        for p, m in enumerate(models[s]):
            prm = m.params
            ls[s, p] = prm.lengthscales
            amp2[s, p] = prm.amplitude2
            mean[s, p] = m.mean
            scale[s, p] = m.scale
            noise[s, p] = m.noise_var_raw
            if N:
                w[s, p] = m.weights
                Lc[s, p] = m.chol
                W[s, p] = linalg.solve_triangular(m.chol, matern52(X_train, O[s], prm),
                                                  lower=True)
            if which == "objectives":
                L_o, e_o = Lam[p], eta[p]
                mu, Sig = pri.obj_mean[p], pri.obj_cov[p]
                cm, cc = res.cpd.obj_mean[p], res.cpd.obj_cov[p]
            else:
                L_o, e_o = np.diag(cL[p]), ceta[p]
                mu, Sig = pri.con_mean[p], pri.con_cov[p]
                cm, cc = res.cpd.con_mean[p], res.cpd.con_cov[p]
            n = len(mu)
            Gr = np.linalg.solve(np.eye(n) + L_o @ Sig, L_o)
            Gr = 0.5 * (Gr + Gr.T)
            vr = e_o - L_o @ cm
            Rr = np.eye(n) - Gr @ Sig
            G[s, p][np.ix_(real, real)] = Gr
            v[s, p, real] = vr
            R[s, p][np.ix_(real, np.arange(M))] = Rr[:, :M]
            m0[s, p, :M] = cm[:M]
            C0[s, p, :M, :M] = cc[:M, :M]
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return _Group(t(O), t(ls), t(amp2), t(mean), t(scale), t(noise), t(w), t(Lc),
                  t(W), t(G), t(v), t(R), t(m0), t(C0))


def make_context(surrogates: Sequence[SurrogateSet], samples: Sequence[ParetoSample],
                 ep_results: Sequence[EPResult], hyper_index=None, B: int = 1,
                 bounds=None) -> AcquisitionContext:
    surrogates = tuple(surrogates)
    S = len(samples)
    if S < 1:
        raise ValueError("need at least one Pareto sample")
    hyper_index = tuple(hyper_index) if hyper_index is not None else \
        tuple(s % len(surrogates) for s in range(S))
    sets = [surrogates[h] for h in hyper_index]
    X_train = np.asarray(surrogates[0].X, dtype=float)
    d = X_train.shape[1]
    M_max = max(ps.M for ps in samples)
    mask = np.zeros((S, M_max), dtype=bool)
    for s, ps in enumerate(samples):
        mask[s, :ps.M] = True
    bounds = np.tile([0.0, 1.0], (d, 1)) if bounds is None else np.asarray(bounds, float)
    ctx = AcquisitionContext(surrogates, tuple(samples), tuple(ep_results), hyper_index,
                             X_train, B, bounds)
    ctx.obj = _group_tensors(sets, samples, ep_results, X_train, M_max, "objectives")
    if surrogates[0].J:
        ctx.con = _group_tensors(sets, samples, ep_results, X_train, M_max, "constraints")
    ctx.mask = torch.as_tensor(mask)
    return ctx


def build_context(surrogates: Sequence[SurrogateSet], rng: np.random.Generator,
                  n_pareto: int = 10, B: int = 1, grid_size: int = 1000,
                  M_max: int = 50, num_features: int = 500, ep_kwargs=None,
                  bounds=None) -> AcquisitionContext:
    """Draw Pareto samples (sample s uses hyper sample s mod H) and run EP on each."""
    surrogates = tuple(surrogates)
    ep_kwargs = ep_kwargs or {}
    samples, results, hidx = [], [], []
    for s in range(n_pareto):
        h = s % len(surrogates)
        ps = sample_pareto_set(surrogates[h], grid_size, M_max, rng, num_features)
        res = run_ep(ep_priors(surrogates[h], ps.points), **ep_kwargs)
        samples.append(ps)
        results.append(res)
        hidx.append(h)
    return make_context(surrogates, samples, results, hidx, B, bounds)


# ---------------------------------------------------------------------------
# Batch path (torch)


def _matern(X, Y, ls, amp2):
    """X: (B, d), Y: (S, n, d), ls: (S, P, d), amp2: (S, P) -> (S, P, B, n)."""
    Xs = X[None, None] / ls[:, :, None, :]
    Ys = Y[:, None] / ls[:, :, None, :]
    d2 = ((Xs[:, :, :, None, :] - Ys[:, :, None, :, :]) ** 2).sum(-1)
    r = torch.sqrt(torch.clamp(d2, min=1e-30))
    return amp2[..., None, None] * (1 + SQRT5 * r + 5.0 / 3.0 * d2) * torch.exp(-SQRT5 * r)


def _log1mexp(x):
    x = torch.clamp(x, max=-1e-30)
    lo = torch.clamp(x, max=-np.log(2.0))
    hi = torch.clamp(x, min=-np.log(2.0))
    return torch.where(x > -np.log(2.0), torch.log(-torch.expm1(hi)),
                       torch.log1p(-torch.exp(lo)))


def _log_npdf(x):
    return -0.5 * x * x - 0.5 * np.log(2 * np.pi)


def _omega_core_t(alpha, beta):
    """Torch twin of ep.omega_core; alpha (..., K), beta (..., J)."""
    lphi = torch.special.log_ndtr(alpha)
    lgam = torch.special.log_ndtr(beta)
    sphi = lphi.sum(-1)
    sgam = lgam.sum(-1)
    log_eta = sgam + _log1mexp(sphi)
    log_lam = _log1mexp(sgam) if beta.shape[-1] else torch.full_like(sgam, -np.inf)
    logz = torch.logaddexp(log_eta, log_lam)
    rho = -torch.exp(_log_npdf(alpha) + (sphi[..., None] - lphi)
                     + sgam[..., None] - logz[..., None])
    omega = -torch.exp(_log_npdf(beta) + (sgam[..., None] - lgam)
                       + sphi[..., None] - logz[..., None])
    return logz, rho, omega


def _univariate_update_t(m, v, d1, d2):
    den = 1.0 + d2 * v
    return -d2 / den, (d1 - m * d2) / den


def _prior_and_cpd0(g: _Group, X):
    """GP predictive at the batch and the CPD (with data/Pareto factors) there."""
    S, P = g.amp2.shape
    k_bo = _matern(X, g.O, g.ls, g.amp2)
    N = g.w.shape[-1]
    k_bb = _matern(X, X[None].expand(S, -1, -1), g.ls, g.amp2)
    c = (g.scale ** 2)[..., None, None]
    if N:
        k_bt = k_bo[..., -N:]
        mu = g.mean[..., None] + g.scale[..., None] * (k_bt @ g.w[..., None])[..., 0]
        V = torch.linalg.solve_triangular(g.L, k_bt.transpose(-1, -2), upper=False)
        Vt = V.transpose(-1, -2)
        Sbb = c * (k_bb - Vt @ V)
        Sbo = c * (k_bo - Vt @ g.W)
    else:
        mu = g.mean[..., None].expand(S, P, X.shape[0])
        Sbb = c * k_bb
        Sbo = c * k_bo
    Sbb = 0.5 * (Sbb + Sbb.transpose(-1, -2))
    mean_b = mu + (Sbo @ g.v[..., None])[..., 0]
    C0bb = Sbb - Sbo @ g.G @ Sbo.transpose(-1, -2)
    C0bb = 0.5 * (C0bb + C0bb.transpose(-1, -2))
    C0bP = Sbo @ g.R
    return Sbb, mean_b, C0bb, C0bP


def _chol_logdet(A):
    n = A.shape[-1]
    eye = torch.eye(n, dtype=A.dtype)
    for jitter in (0.0, 1e-10, 1e-8, 1e-6, 1e-4):
        L, info = torch.linalg.cholesky_ex(A + jitter * eye)
        if not torch.any(info > 0):
            return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    raise AcquisitionError("batch covariance not positive definite after jitter")


def _separate_duplicates(X, bounds, tol=1e-6):
    X = np.array(X, dtype=float)
    span = bounds[:, 1] - bounds[:, 0]
    for _ in range(len(X)):
        moved = False
        for i in range(1, len(X)):
            for j in range(i):
                if np.linalg.norm((X[i] - X[j]) / span) < tol:
                    step = tol * span[0]
                    X[i, 0] += step if X[i, 0] + step <= bounds[0, 1] else -step
                    moved = True
        if not moved:
            break
    return X


def _batch_terms(ctx: AcquisitionContext, X):
    """Per-sample, per-black-box log-det differences, shape (S, K+J)."""
    mask = ctx.mask
    S, M = mask.shape
    B = X.shape[0]
    eye_B = torch.eye(B, dtype=DTYPE)
    o = ctx.obj
    Sbb_o, mb_o, C0bb_o, C0bP_o = _prior_and_cpd0(o, X)
    dm = o.m0[:, :, None, :] - mb_o[..., None]                       # (S,K,B,M)
    s = (torch.diagonal(o.C0, dim1=-2, dim2=-1)[:, :, None, :]
         + torch.diagonal(C0bb_o, dim1=-2, dim2=-1)[..., None] - 2.0 * C0bP_o)
    if ctx.J:
        c = ctx.con
        Sbb_c, mb_c, C0bb_c, _ = _prior_and_cpd0(c, X)
        vb_c = torch.diagonal(C0bb_c, dim1=-2, dim2=-1)               # (S,J,B)
    else:
        mb_c = torch.zeros((S, 0, B), dtype=DTYPE)
        vb_c = torch.ones((S, 0, B), dtype=DTYPE)

    with torch.no_grad():
        bad = ~mask[:, None, :].expand(S, B, M)                       # (S,B,M)
        bad = bad | (s <= 0).any(1) | (vb_c <= 0).any(1)[..., None]
        # a batch point equal to x*_i cannot dominate it: no factor
        bad = bad | (X[None, :, None, :] == o.O[:, None, :M, :]).all(-1)
    s_safe = torch.where(bad[:, None], torch.ones_like(s), s)
    dm_safe = torch.where(bad[:, None], torch.zeros_like(dm), dm)
    v_safe = torch.where(vb_c <= 0, torch.ones_like(vb_c), vb_c)
    alpha = dm_safe / torch.sqrt(s_safe)                                # (S,K,B,M)
    beta = (mb_c / torch.sqrt(v_safe))[..., None].expand(-1, -1, -1, M)  # (S,J,B,M)
    a_in = alpha.permute(0, 2, 3, 1)
    b_in = beta.permute(0, 2, 3, 1)
    with torch.no_grad():
        logz, _, _ = _omega_core_t(a_in, b_in)
        bad = bad | ~torch.isfinite(logz)
    a_in = torch.where(bad[..., None], torch.zeros_like(a_in), a_in)
    b_in = torch.where(bad[..., None], torch.zeros_like(b_in), b_in)
    logz, rho, omega = _omega_core_t(a_in, b_in)
    rho = rho.permute(0, 3, 1, 2)                                       # (S,K,B,M)
    omega = omega.permute(0, 3, 1, 2)                                   # (S,J,B,M)
    al = a_in.permute(0, 3, 1, 2)
    g = rho / torch.sqrt(s_safe)
    h = -rho * (al + rho) / s_safe
    a_obj, _ = _univariate_update_t(dm_safe, s_safe, g, h)
    if ctx.J:
        be = b_in.permute(0, 3, 1, 2)
        vexp = v_safe[..., None]
        gc = omega / torch.sqrt(vexp)
        hc = -omega * (be + omega) / vexp
        a_con, _ = _univariate_update_t(mb_c[..., None], vexp, gc, hc)
    with torch.no_grad():
        fin = torch.isfinite(a_obj).all(1)
        if ctx.J:
            fin &= torch.isfinite(a_con).all(1)
        bad = bad | ~fin
    keep = (~bad)[:, None]
    a_obj = torch.where(keep, a_obj, torch.zeros_like(a_obj))        # (S,K,B,M)

    # objectives: rank-one pair factors on U = [Pareto (M), batch (B)]
    A = a_obj.transpose(-1, -2)                                       # (S,K,M,B)
    C0UU = torch.cat([torch.cat([o.C0, C0bP_o.transpose(-1, -2)], -1),
                      torch.cat([C0bP_o, C0bb_o], -1)], -2)
    C0bU = torch.cat([C0bP_o, C0bb_o], -1)
    eye_U = torch.eye(M + B, dtype=DTYPE)
    noise_o = o.noise[..., None, None] * eye_B

    def objective_cpd(scale):
        As = A * scale[..., None, None]
        Lam = torch.cat([torch.cat([torch.diag_embed(As.sum(-1)), -As], -1),
                         torch.cat([-As.transpose(-1, -2), torch.diag_embed(As.sum(-2))], -1)],
                        -2)
        corr = C0bU @ Lam @ torch.linalg.solve(eye_U + C0UU @ Lam, C0bU.transpose(-1, -2))
        C1 = C0bb_o - corr
        return 0.5 * (C1 + C1.transpose(-1, -2))

    C1_o = _with_psd_repair(objective_cpd, noise_o, (S, ctx.K))
    terms = [_chol_logdet(Sbb_o + noise_o) - _chol_logdet(C1_o + noise_o)]
    if ctx.J:
        a_con = torch.where(keep, a_con, torch.zeros_like(a_con))
        dsum = a_con.sum(-1)                                            # (S,J,B)
        noise_c = c.noise[..., None, None] * eye_B

        def constraint_cpd(scale):
            D = torch.diag_embed(dsum * scale[..., None])
            C1 = torch.linalg.solve(eye_B + C0bb_c @ D, C0bb_c)
            return 0.5 * (C1 + C1.transpose(-1, -2))

        C1_c = _with_psd_repair(constraint_cpd, noise_c, (S, ctx.J))
        terms.append(_chol_logdet(Sbb_c + noise_c) - _chol_logdet(C1_c + noise_c))
    return torch.cat(terms, 1), (Sbb_o, C1_o, Sbb_c if ctx.J else None,
                                 C1_c if ctx.J else None)


def _with_psd_repair(build, noise, shape, max_halvings=30):
    """Evaluate ``build(scale)`` with all batch factors at full strength, halving
    the factor scale of any black-box whose covariance is not PD."""
    scale = torch.ones(shape, dtype=DTYPE)
    for _ in range(max_halvings + 1):
        C1 = build(scale)
        with torch.no_grad():
            _, info = torch.linalg.cholesky_ex(C1 + noise)
            bad = (info > 0) | ~torch.isfinite(C1).all(-1).all(-1)
        if not bad.any():
            return C1
        scale = torch.where(bad, 0.5 * scale, scale)
    logger.debug("batch factors dropped after %d halvings", max_halvings)
    return build(torch.where(bad, torch.zeros_like(scale), scale))


def _prepare(ctx: AcquisitionContext, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != ctx.dim:
        raise ValueError("batch dimension mismatch")
    lo, hi = ctx.bounds.T
    if np.any(X < lo - 1e-12) or np.any(X > hi + 1e-12):
        raise ValueError("batch outside bounds")
    return _separate_duplicates(X, ctx.bounds)


def alpha_terms(ctx: AcquisitionContext, X) -> np.ndarray:
    """Per-black-box contributions (K objectives then J constraints); sum = alpha."""
    Xt = torch.as_tensor(_prepare(ctx, X), dtype=DTYPE)
    with torch.no_grad():
        terms, _ = _batch_terms(ctx, Xt)
    return terms.mean(0).numpy()


def alpha(ctx: AcquisitionContext, X) -> float:
    return float(alpha_terms(ctx, X).sum())


def alpha_with_grad(ctx: AcquisitionContext, X):
    Xt = torch.as_tensor(_prepare(ctx, X), dtype=DTYPE).requires_grad_(True)
    terms, _ = _batch_terms(ctx, Xt)
    val = terms.mean(0).sum()
    (grad,) = torch.autograd.grad(val, Xt)
    return float(val.detach()), grad.numpy().copy()


def alpha_sequential(ctx: AcquisitionContext, x) -> float:
    return alpha(ctx, np.asarray(x, dtype=float).reshape(1, -1))


def batch_covariances(ctx: AcquisitionContext, X):
    """Prior and conditioned batch covariances incl. noise, shape (S, K+J, B, B)."""
    Xt = torch.as_tensor(_prepare(ctx, X), dtype=DTYPE)
    with torch.no_grad():
        _, (So, Co, Sc, Cc) = _batch_terms(ctx, Xt)
    eye = torch.eye(Xt.shape[0], dtype=DTYPE)
    prior = [So + ctx.obj.noise[..., None, None] * eye]
    cpd = [Co + ctx.obj.noise[..., None, None] * eye]
    if ctx.J:
        prior.append(Sc + ctx.con.noise[..., None, None] * eye)
        cpd.append(Cc + ctx.con.noise[..., None, None] * eye)
    return torch.cat(prior, 1).numpy(), torch.cat(cpd, 1).numpy()


# ---------------------------------------------------------------------------
# Optimization


@dataclass(frozen=True)
class BatchProposal:
    X: np.ndarray
    value: float
    gradient: np.ndarray
    n_starts: int = 1


def optimize_batch(ctx: AcquisitionContext, n_restarts: int = 5, max_iters: int = 100,
                   rng: np.random.Generator = None, B: int | None = None) -> BatchProposal:
    """Multi-start L-BFGS-B ascent of alpha over the batch."""
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    B = ctx.B if B is None else B
    d = ctx.dim
    lo, hi = ctx.bounds.T
    box = list(zip(np.tile(lo, B), np.tile(hi, B)))
    best = None

    def negative(z):
        v, g = alpha_with_grad(ctx, z.reshape(B, d))
        if not np.isfinite(v):
            return 1e10, np.zeros_like(z)
        return -v, -g.ravel()

    for _ in range(n_restarts):
        X0 = lo + rng.uniform(size=(B, d)) * (hi - lo)
        try:
            v0, g0 = alpha_with_grad(ctx, X0)
        except (AcquisitionError, np.linalg.LinAlgError, RuntimeError) as err:
            logger.warning("acquisition failed at a random start: %s", err)
            continue
        cands = [(v0, X0, g0)]
        if max_iters > 0:
            try:
                res = optimize.minimize(negative, X0.ravel(), jac=True, method="L-BFGS-B",
                                        bounds=box, options={"maxiter": max_iters})
                Xo = np.clip(res.x.reshape(B, d), lo, hi)
                vo, go = alpha_with_grad(ctx, Xo)
                if np.isfinite(vo):
                    cands.append((vo, Xo, go))
            except (AcquisitionError, np.linalg.LinAlgError, RuntimeError) as err:
                logger.warning("L-BFGS-B restart failed: %s", err)
        for c in cands:
            if np.isfinite(c[0]) and (best is None or c[0] > best[0]):
                best = c
    if best is None:
        raise AcquisitionError("acquisition could not be evaluated at any start point")
    return BatchProposal(best[1], float(best[0]), best[2], n_restarts)


# ---------------------------------------------------------------------------
# Monte Carlo oracle


def knn_entropy(Y, k: int = 1) -> float:
    """Kozachenko-Leonenko nearest-neighbour estimate of differential entropy."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, D = Y.shape
    dist, _ = cKDTree(Y).query(Y, k=k + 1)
    eps = np.maximum(dist[:, -1], 1e-300)
    log_vball = D / 2 * np.log(np.pi) - gammaln(D / 2 + 1)
    return float(digamma(n) - digamma(k) + log_vball + D * np.mean(np.log(eps)))


def _joint_draws(models, Z, n, rng):
    """Joint posterior draws of every black-box at the rows of Z: (P, n, |Z|)."""
    out = []
    for m in models:
        mu, C = m.predict(Z)
        jit = 1e-10 * max(np.mean(np.diag(C)), 1e-12)
        L = None
        for j in (1, 10, 100, 1e3, 1e4, 1e5):
            try:
                L = np.linalg.cholesky(C + j * jit * np.eye(len(Z)))
                break
            except np.linalg.LinAlgError:
                continue
        if L is None:
            raise AcquisitionError("joint draw covariance not positive definite")
        out.append(mu + rng.standard_normal((n, len(Z))) @ L.T)
    return np.array(out)


def _conditioning_indicator(F, C, M, K):
    """Exact p(X*|F, C) indicator on draws.

    F: (K, n, |Z|), C: (J, n, |Z|) with the M Pareto points first.
    Pareto points must be feasible and no feasible other point may
    dominate or tie-dominate any of them (i.e. x* beats it in some objective).
    """
    n = F.shape[1]
    feas = np.all(C >= 0, axis=0) if len(C) else np.ones(F.shape[1:], dtype=bool)
    ok = np.all(feas[:, :M], axis=1)
    for i in range(M):
        # Psi: some objective where x*_i is strictly better than x'
        better = np.any(F[:, :, i:i + 1] < F, axis=0)             # (n, |Z|)
        others = np.ones(F.shape[2], dtype=bool)
        others[i] = False
        viol = feas[:, others] & ~better[:, others]
        ok &= ~np.any(viol, axis=1)
    return ok


def _distinct_rows(Z):
    """Rows of Z without repeats, first occurrences in their original order."""
    _, first = np.unique(Z, axis=0, return_index=True)
    return Z[np.sort(first)]


def exact_alpha_mc_many(ctx: AcquisitionContext, batches, n_samples: int = 10_000,
                        rng: np.random.Generator = None, accept_all: bool = False,
                        X_cond=None, k: int = 1):
    """Sampling-based estimate of alpha for several batches with shared draws.

    For each Pareto sample, joint posterior draws over the conditioning
    points (observations, Pareto points and ``X_cond``) and all batch points
    are rejection-filtered with the exact Pareto indicator.  Entropies of the
    noisy batch outputs before and after filtering are estimated with the
    nearest-neighbour estimator.  The result is on the scale of ``alpha``
    (twice the entropy difference).
    """
    rng = np.random.default_rng() if rng is None else rng
    batches = [np.atleast_2d(np.asarray(b, dtype=float)) for b in batches]
    allb = np.unique(np.vstack(batches), axis=0)
    B = max(len(b) for b in batches)
    out = np.zeros((ctx.S, len(batches)))
    for s in range(ctx.S):
        sset = ctx.surrogates[ctx.hyper_index[s]]
        ps = ctx.samples[s]
        parts = [ps.points, sset.X]
        if X_cond is not None:
            parts.append(np.atleast_2d(X_cond))
        Zc = _distinct_rows(np.vstack(parts))
        Z = np.vstack([Zc, allb])
        draws = _joint_draws(sset.models, Z, n_samples, rng)
        noise = np.array([m.noise_var_raw for m in sset.models])
        draws_b = draws[:, :, len(Zc):]
        # observation noise is independent per batch slot, shared across batches
        eps = np.sqrt(noise)[:, None, None] * rng.standard_normal((len(noise), n_samples, B))
        if accept_all:
            acc = np.ones(n_samples, dtype=bool)
        else:
            acc = _conditioning_indicator(draws[:sset.K], draws[sset.K:], ps.M, sset.K)
        if acc.mean() < 1e-4 or acc.sum() < 2 * k + 2:
            raise InsufficientSamplesError(f"acceptance rate {acc.mean():.2e} too low")
        for bi, b in enumerate(batches):
            cols = [int(np.flatnonzero(np.all(allb == x, axis=1))[0]) for x in b]
            Y = (draws_b[:, :, cols] + eps[:, :, :len(cols)]).transpose(1, 0, 2)
            Y = Y.reshape(n_samples, -1)
            out[s, bi] = knn_entropy(Y, k) - knn_entropy(Y[acc], k)
    return 2.0 * out.mean(0)


def exact_alpha_mc(ctx: AcquisitionContext, X, n_samples: int = 10_000,
                   rng: np.random.Generator = None, **kw) -> float:
    return float(exact_alpha_mc_many(ctx, [X], n_samples, rng, **kw)[0])
