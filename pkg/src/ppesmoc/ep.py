"""Expectation propagation for the Pareto-conditioned predictive distribution.

Index layout for every black-box: the M Pareto points first, then the N
observed inputs, then (optionally) the B batch points.

Objective factors live on pairs ``(x*_i, x_p)`` with the Pareto value
first.  They only depend on the difference ``u_i - u_p``, so each factor
is a rank-one bivariate Gaussian ``exp(-a/2 (u_i - u_p)^2 + b (u_i - u_p))``
and is stored as the two scalars ``(a, b)``.  Constraint factors are
univariate on ``c_j(x_p)`` for every pair, plus one factor on
``c_j(x*_i)`` per Pareto point.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import log_ndtr

from .gp import SurrogateSet

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class CavityError(ValueError):
    """Cavity with non-positive precision; the factor update must be skipped."""


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Reconstructed CPD covariance is not positive definite."""


def log_npdf(x):
    return -0.5 * np.square(x) - 0.5 * LOG_2PI


def log1mexp(x):
    """log(1 - exp(x)) for x <= 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


# ---------------------------------------------------------------------------
# Gaussian divisions


@dataclass(frozen=True)
class NatGauss1:
    nat_mean: float
    nat_prec: float

    @classmethod
    def from_moments(cls, m, v):
        return cls(m / v, 1.0 / v)


@dataclass(frozen=True)
class NatGauss2:
    nat_mean: np.ndarray
    nat_prec: np.ndarray

    @classmethod
    def from_moments(cls, m, V):
        P = np.linalg.inv(np.asarray(V, dtype=float))
        P = 0.5 * (P + P.T)
        return cls(P @ np.asarray(m, dtype=float), P)


def cavity_1d(m, v, factor: NatGauss1):
    """Remove ``factor`` from the marginal N(m, v); returns cavity (mean, var)."""
    if not v > 0:
        raise ValueError("marginal variance must be positive")
    prec = 1.0 / v - factor.nat_prec
    if not prec > 0:
        raise CavityError("non-positive cavity precision")
    return (m / v - factor.nat_mean) / prec, 1.0 / prec


def cavity_2d(m, V, factor: NatGauss2):
    marg = NatGauss2.from_moments(m, V)
    P = marg.nat_prec - factor.nat_prec
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise CavityError("cavity precision not positive definite") from None
    Vc = np.linalg.inv(P)
    Vc = 0.5 * (Vc + Vc.T)
    return Vc @ (marg.nat_mean - factor.nat_mean), Vc


# ---------------------------------------------------------------------------
# Log normalizers and their derivatives


def logz_phi(m, v):
    """log Phi(m / sqrt(v)) and its first two derivatives w.r.t. m."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    sv = np.sqrt(v)
    z = m / sv
    logz = log_ndtr(z)
    r = np.exp(log_npdf(z) - logz)
    d1 = r / sv
    d2 = -r * (z + r) / v
    return logz, d1, d2


def tilted_from_logz(m, v, d1, d2):
    """Tilted mean and variance from derivatives of log Z w.r.t. the cavity mean."""
    return m + v * d1, v + v * v * d2


class OmegaLogZ(NamedTuple):
    logz: np.ndarray
    alpha: np.ndarray        # (..., K)
    s: np.ndarray            # (..., K)
    rho: np.ndarray          # (..., K)
    beta: np.ndarray         # (..., J)
    omega: np.ndarray        # (..., J)
    grad_obj: np.ndarray     # (..., K, 2) d logZ / d (m_x*, m_x')
    hess_obj: np.ndarray     # (..., K, 2, 2)
    grad_con: np.ndarray     # (..., J)
    hess_con: np.ndarray     # (..., J)


def omega_core(alpha, beta):
    """log Z of the Omega factor and the ratios rho, omega.

    ``alpha`` has shape (..., K) and ``beta`` shape (..., J).  Returns
    ``(logz, rho, omega)``; entries with Z = 0 come back as -inf / nan.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    lphi = log_ndtr(alpha)
    lgam = log_ndtr(beta)
    sphi = lphi.sum(-1)
    sgam = lgam.sum(-1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_zeta = log1mexp(sphi)
        log_eta = sgam + log_zeta
        log_lam = log1mexp(sgam)
        logz = np.logaddexp(log_eta, log_lam)
        rho = -np.exp(log_npdf(alpha) + (sphi[..., None] - lphi)
                      + sgam[..., None] - logz[..., None])
        omega = -np.exp(log_npdf(beta) + (sgam[..., None] - lgam)
                        + sphi[..., None] - logz[..., None])
    return logz, rho, omega


def logz_omega(obj_mean, obj_cov, con_mean, con_var) -> OmegaLogZ:
    """log Z of Omega under Gaussian cavities, with mean derivatives.

    ``obj_mean``: (..., K, 2) cavity means of (f_k(x*), f_k(x')),
    ``obj_cov``: (..., K, 2, 2), ``con_mean``/``con_var``: (..., J) cavity
    moments of c_j(x').
    """
    obj_mean = np.asarray(obj_mean, dtype=float)
    obj_cov = np.asarray(obj_cov, dtype=float)
    con_mean = np.asarray(con_mean, dtype=float)
    con_var = np.asarray(con_var, dtype=float)
    s = obj_cov[..., 0, 0] + obj_cov[..., 1, 1] - 2.0 * obj_cov[..., 0, 1]
    if np.any(s <= 0) or np.any(con_var <= 0):
        raise CavityError("cavity variances must be positive")
    ss = np.sqrt(s)
    sv = np.sqrt(con_var)
    alpha = (obj_mean[..., 0] - obj_mean[..., 1]) / ss
    beta = con_mean / sv
    logz, rho, omega = omega_core(alpha, beta)
    g = rho / ss
    h = -rho * (alpha + rho) / s
    dvec = np.array([1.0, -1.0])
    grad_obj = g[..., None] * dvec
    hess_obj = h[..., None, None] * np.outer(dvec, dvec)
    grad_con = omega / sv
    hess_con = -omega * (beta + omega) / con_var
    return OmegaLogZ(logz, alpha, s, rho, beta, omega, grad_obj, hess_obj,
                     grad_con, hess_con)


def _univariate_update(m, v, d1, d2):
    """Moment-matched factor naturals (precision, natural mean)."""
    den = 1.0 + d2 * v
    return -d2 / den, (d1 - m * d2) / den


def damp(new, old, theta):
    return theta * new + (1.0 - theta) * old


def update_phi(m, v, old: NatGauss1 = NatGauss1(0.0, 0.0), theta: float = 1.0) -> NatGauss1:
    """Damped EP update of one Phi factor from its cavity N(m, v)."""
    _, d1, d2 = logz_phi(m, v)
    e, f = _univariate_update(m, v, d1, d2)
    if not (np.isfinite(e) and np.isfinite(f)):
        return old
    return NatGauss1(float(damp(f, old.nat_mean, theta)), float(damp(e, old.nat_prec, theta)))


@dataclass(frozen=True)
class OmegaUpdate:
    obj_prec: np.ndarray     # (K,) scalar a: precision a * d d^T, d = (1, -1)
    obj_natmean: np.ndarray  # (K,) scalar b: natural mean b * d
    con_prec: np.ndarray     # (J,)
    con_natmean: np.ndarray  # (J,)

    def obj_factor(self, k) -> NatGauss2:
        d = np.array([1.0, -1.0])
        return NatGauss2(self.obj_natmean[k] * d, self.obj_prec[k] * np.outer(d, d))


def update_omega(obj_mean, obj_cov, con_mean, con_var, old: OmegaUpdate | None = None,
                 theta: float = 1.0) -> OmegaUpdate:
    """Damped EP update of the Omega factor approximation for one point pair."""
    lz = logz_omega(obj_mean, obj_cov, con_mean, con_var)
    obj_mean = np.asarray(obj_mean, dtype=float)
    dm = obj_mean[..., 0] - obj_mean[..., 1]
    g = lz.rho / np.sqrt(lz.s)
    h = -lz.rho * (lz.alpha + lz.rho) / lz.s
    a, b = _univariate_update(dm, lz.s, g, h)
    ac, bc = _univariate_update(np.asarray(con_mean, float), np.asarray(con_var, float),
                                lz.grad_con, lz.hess_con)
    K, J = len(a), len(ac)
    if old is None:
        old = OmegaUpdate(np.zeros(K), np.zeros(K), np.zeros(J), np.zeros(J))
    if not (np.isfinite(lz.logz) and np.all(np.isfinite(np.r_[a, b, ac, bc]))):
        return old
    return OmegaUpdate(damp(a, old.obj_prec, theta), damp(b, old.obj_natmean, theta),
                       damp(ac, old.con_prec, theta), damp(bc, old.con_natmean, theta))


# ---------------------------------------------------------------------------
# Priors, factors and reconstruction


@dataclass(frozen=True)
class EPPriors:
    """Joint GP predictive over [Pareto, observed, (batch)] points per black-box."""

    obj_mean: np.ndarray  # (K, n)
    obj_cov: np.ndarray   # (K, n, n)
    con_mean: np.ndarray  # (J, n)
    con_cov: np.ndarray   # (J, n, n)
    M: int
    N: int
    coincident: np.ndarray | None = None  # (M, n) Pareto point i equals point p

    @property
    def n(self) -> int:
        return self.obj_mean.shape[1]

    @property
    def K(self) -> int:
        return self.obj_mean.shape[0]

    @property
    def J(self) -> int:
        return self.con_mean.shape[0]


PRIOR_JITTER = (1e-10, 1e-8, 1e-6, 1e-4)


def _stabilized(C):
    """Symmetrize and add the smallest relative jitter that makes C factorizable.

    Pareto points that coincide with observations leave the joint predictive
    numerically singular, which would make every EP reconstruction fail.  The
    jitter is relative to the largest variance, since that sets the scale of
    the round-off, and the ladder starts above zero so the factorization has
    a real margin.  If the ladder runs out, negative eigenvalues are clipped.
    """
    C = 0.5 * (C + C.T)
    n = len(C)
    if n == 0:
        return C
    base = max(float(np.max(np.diag(C))), 1e-300)
    for j in PRIOR_JITTER:
        Cj = C + j * base * np.eye(n)
        try:
            np.linalg.cholesky(Cj)
            return Cj
        except np.linalg.LinAlgError:
            continue
    w, V = np.linalg.eigh(C)
    w = np.maximum(w, PRIOR_JITTER[-1] * base)
    return (V * w) @ V.T


def ep_priors(models: SurrogateSet, pareto_points, X_obs=None, X_batch=None) -> EPPriors:
    Xs = np.atleast_2d(pareto_points)
    X_obs = models.X if X_obs is None else np.asarray(X_obs, dtype=float).reshape(-1, Xs.shape[1])
    parts = [Xs, X_obs] + ([np.atleast_2d(X_batch)] if X_batch is not None else [])
    Z = np.vstack(parts)
    d = models.dim

    def stack(ms):
        if not ms:
            n = len(Z)
            return np.zeros((0, n)), np.zeros((0, n, n))
        mu, S = zip(*(m.predict(Z) for m in ms))
        return np.array(mu), np.array([_stabilized(C) for C in S])

    om, oc = stack(models.objectives)
    cm, cc = stack(models.constraints)
    same = np.all(Xs[:, None, :] == Z[None, :, :], axis=2)
    return EPPriors(om, oc, cm, cc, len(Xs), len(X_obs), same)


@dataclass(frozen=True)
class FactorStore:
    """EP factor naturals.

    ``phi_prec``/``phi_natmean``: (J, M) factors on c_j(x*_i).
    ``obj_prec``/``obj_natmean``: (K, M, n) rank-one factors on pair (i, p).
    ``con_prec``/``con_natmean``: (J, M, n) factors on c_j(x_p) from pair (i, p).
    Entries with p == i (self pairs) are always zero.
    """

    phi_prec: np.ndarray
    phi_natmean: np.ndarray
    obj_prec: np.ndarray
    obj_natmean: np.ndarray
    con_prec: np.ndarray
    con_natmean: np.ndarray

    @classmethod
    def zeros(cls, K, J, M, n):
        return cls(np.zeros((J, M)), np.zeros((J, M)), np.zeros((K, M, n)),
                   np.zeros((K, M, n)), np.zeros((J, M, n)), np.zeros((J, M, n)))

    @property
    def M(self):
        return self.obj_prec.shape[1]

    @property
    def n(self):
        return self.obj_prec.shape[2]

    def arrays(self):
        return (self.phi_prec, self.phi_natmean, self.obj_prec, self.obj_natmean,
                self.con_prec, self.con_natmean)

    def max_abs_diff(self, other: "FactorStore") -> float:
        return max((float(np.max(np.abs(a - b))) if a.size else 0.0)
                   for a, b in zip(self.arrays(), other.arrays()))

    def padded(self, n_new: int) -> "FactorStore":
        pad = n_new - self.n
        if pad < 0:
            raise ValueError("cannot shrink a factor store")
        p3 = ((0, 0), (0, 0), (0, pad))
        return replace(self, obj_prec=np.pad(self.obj_prec, p3),
                       obj_natmean=np.pad(self.obj_natmean, p3),
                       con_prec=np.pad(self.con_prec, p3),
                       con_natmean=np.pad(self.con_natmean, p3))


@dataclass(frozen=True)
class CPDState:
    obj_mean: np.ndarray
    obj_cov: np.ndarray
    con_mean: np.ndarray
    con_cov: np.ndarray


def site_naturals(factors: FactorStore, n: int):
    """Accumulated site precisions and natural means for every black-box.

    Returns (obj_Lambda (K,n,n), obj_eta (K,n), con_Lambda_diag (J,n), con_eta (J,n)).
    """
    fs = factors.padded(n) if factors.n < n else factors
    K, M = fs.obj_prec.shape[:2]
    J = fs.phi_prec.shape[0]
    A = np.zeros((K, n, n))
    Bm = np.zeros((K, n, n))
    A[:, :M, :] = fs.obj_prec
    Bm[:, :M, :] = fs.obj_natmean
    Lam = -(A + A.transpose(0, 2, 1))
    diag = A.sum(2) + A.sum(1)
    idx = np.arange(n)
    Lam[:, idx, idx] += diag
    eta = Bm.sum(2) - Bm.sum(1)
    con_L = fs.con_prec.sum(1)
    con_eta = fs.con_natmean.sum(1)
    con_L[:, :M] += fs.phi_prec
    con_eta[:, :M] += fs.phi_natmean
    return Lam, eta, con_L, con_eta


def gaussian_times_sites(mu, Sigma, Lam, eta, check=True):
    """Moments of N(mu, Sigma) * exp(-x'Lam x/2 + eta'x) without inverting Sigma.

    Works on stacks: mu (..., n), Sigma (..., n, n), Lam (..., n, n), eta (..., n).
    """
    n = mu.shape[-1]
    I = np.eye(n)
    A = I + Sigma @ Lam
    C = np.linalg.solve(A, Sigma)
    m = np.linalg.solve(A, (mu + (Sigma @ eta[..., None])[..., 0])[..., None])[..., 0]
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    if check and n:
        if not np.all(np.isfinite(C)):
            raise NotPositiveDefinite("non-finite CPD covariance")
        try:
            np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("CPD covariance not positive definite") from None
    return m, C


def reconstruct_cpd(priors: EPPriors, factors: FactorStore, check: bool = True) -> CPDState:
    n = priors.n
    Lam, eta, cL, ceta = site_naturals(factors, n)
    om, oc = gaussian_times_sites(priors.obj_mean, priors.obj_cov, Lam, eta, check)
    if priors.J:
        cLam = np.zeros((priors.J, n, n))
        idx = np.arange(n)
        cLam[:, idx, idx] = cL
        cm, cc = gaussian_times_sites(priors.con_mean, priors.con_cov, cLam, ceta, check)
    else:
        cm, cc = priors.con_mean, priors.con_cov
    return CPDState(om, oc, cm, cc)


# ---------------------------------------------------------------------------
# EP sweeps


def pair_mask(M: int, n: int, n_active: int | None = None) -> np.ndarray:
    """Valid (Pareto i, other p) pairs: p != i and p < n_active."""
    n_active = n if n_active is None else n_active
    mask = np.zeros((M, n), dtype=bool)
    mask[:, :n_active] = True
    mask[np.arange(M), np.arange(M)] = False
    return mask


def conditioning_mask(priors: EPPriors) -> np.ndarray:
    """Pairs that carry an Omega factor.

    A point identical to x*_i has the same function values and cannot
    dominate it, so such pairs are exact no-ops and are left out (their
    difference variance is pure jitter).
    """
    mask = pair_mask(priors.M, priors.n)
    if priors.coincident is not None:
        mask &= ~priors.coincident
    return mask


def _proposed_factors(cpd: CPDState, fs: FactorStore, mask: np.ndarray):
    """Undamped updates for every factor from a CPD snapshot.

    Returns the proposed arrays and a per-factor 'usable' flag; unusable
    entries (bad cavity, Z <= 0, non-finite) keep their old values.
    """
    M = fs.M
    n = fs.n
    K = fs.obj_prec.shape[0]
    J = fs.phi_prec.shape[0]
    # objective pair cavities on the difference u_i - u_p
    om = cpd.obj_mean[:, :n]
    ov = np.diagonal(cpd.obj_cov, axis1=1, axis2=2)[:, :n]
    dm = om[:, :M, None] - om[:, None, :]
    s = ov[:, :M, None] + ov[:, None, :] - 2.0 * cpd.obj_cov[:, :M, :n]
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = 1.0 / s - fs.obj_prec
        dm_cav = (dm / s - fs.obj_natmean) / prec
        s_cav = 1.0 / prec
    ok_obj = (s > 0) & (prec > 0)
    # constraint pair cavities on c_j(x_p)
    cm = cpd.con_mean[:, :n]
    cv = np.diagonal(cpd.con_cov, axis1=1, axis2=2)[:, :n]
    with np.errstate(divide="ignore", invalid="ignore"):
        cprec = 1.0 / cv[:, None, :] - fs.con_prec
        cm_cav = (cm[:, None, :] / cv[:, None, :] - fs.con_natmean) / cprec
        cv_cav = 1.0 / cprec
    ok_con = (cv[:, None, :] > 0) & (cprec > 0)
    ok_pair = mask & ok_obj.all(0) & (ok_con.all(0) if J else True)

    s_use = np.where(ok_pair, s_cav, 1.0)
    dm_use = np.where(ok_pair, dm_cav, 0.0)
    cv_use = np.where(ok_pair, cv_cav, 1.0)
    cm_use = np.where(ok_pair, cm_cav, 0.0)
    alpha = dm_use / np.sqrt(s_use)
    beta = cm_use / np.sqrt(cv_use)
    logz, rho, omega = omega_core(np.moveaxis(alpha, 0, -1), np.moveaxis(beta, 0, -1))
    rho = np.moveaxis(rho, -1, 0)
    omega = np.moveaxis(omega, -1, 0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        g = rho / np.sqrt(s_use)
        h = -rho * (alpha + rho) / s_use
        a_new, b_new = _univariate_update(dm_use, s_use, g, h)
        gc = omega / np.sqrt(cv_use)
        hc = -omega * (beta + omega) / cv_use
        ac_new, bc_new = _univariate_update(cm_use, cv_use, gc, hc)
    ok_pair &= np.isfinite(logz)
    ok_pair &= np.all(np.isfinite(a_new) & np.isfinite(b_new), axis=0)
    if J:
        ok_pair &= np.all(np.isfinite(ac_new) & np.isfinite(bc_new), axis=0)

    # Phi factors on c_j(x*_i)
    pv = cv[:, :M]
    with np.errstate(divide="ignore", invalid="ignore"):
        pprec = 1.0 / pv - fs.phi_prec
        pm_cav = (cm[:, :M] / pv - fs.phi_natmean) / pprec
        pv_cav = 1.0 / pprec
    ok_phi = (pv > 0) & (pprec > 0)
    pv_use = np.where(ok_phi, pv_cav, 1.0)
    pm_use = np.where(ok_phi, pm_cav, 0.0)
    _, d1, d2 = logz_phi(pm_use, pv_use)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_new, f_new = _univariate_update(pm_use, pv_use, d1, d2)
    ok_phi &= np.isfinite(e_new) & np.isfinite(f_new)

    new = FactorStore(
        np.where(ok_phi, e_new, fs.phi_prec), np.where(ok_phi, f_new, fs.phi_natmean),
        np.where(ok_pair, a_new, fs.obj_prec), np.where(ok_pair, b_new, fs.obj_natmean),
        np.where(ok_pair, ac_new, fs.con_prec), np.where(ok_pair, bc_new, fs.con_natmean))
    n_skipped = int(np.sum(mask & ~ok_pair) + np.sum(~ok_phi))
    return new, n_skipped


def _damped(new: FactorStore, old: FactorStore, theta: float) -> FactorStore:
    return FactorStore(*(damp(a, b, theta) for a, b in zip(new.arrays(), old.arrays())))


@dataclass(frozen=True)
class EPResult:
    factors: FactorStore
    cpd: CPDState
    priors: EPPriors
    converged: bool
    n_sweeps: int
    max_change: float
    theta: float
    status: str = "ok"
    n_skipped: int = 0


def run_ep(priors: EPPriors, max_sweeps: int = 200, tol: float = 1e-4,
           theta0: float = 0.5, decay: float = 0.99, max_halvings: int = 30,
           debug_path: str | None = None) -> EPResult:
    """Parallel EP on all Phi and Omega factors of one Pareto sample."""
    M, n = priors.M, priors.n
    if M < 1:
        raise ValueError("need at least one Pareto point")
    fs = FactorStore.zeros(priors.K, priors.J, M, n)
    cpd = reconstruct_cpd(priors, fs, check=False)
    mask = conditioning_mask(priors)
    theta = theta0
    change = np.inf
    converged = False
    sweeps = 0
    skipped = 0
    dbg = open(debug_path, "a") if debug_path else None
    try:
        for sweeps in range(1, max_sweeps + 1):
            proposal, skipped = _proposed_factors(cpd, fs, mask)
            step = theta
            accepted = False
            for _ in range(max_halvings + 1):
                cand = _damped(proposal, fs, step)
                try:
                    new_cpd = reconstruct_cpd(priors, cand)
                    accepted = True
                    break
                except NotPositiveDefinite:
                    step *= 0.5
            if accepted:
                change = cand.max_abs_diff(fs)
                fs, cpd = cand, new_cpd
            else:
                logger.debug("EP sweep %d skipped: no PD reconstruction", sweeps)
                change = np.inf
            if dbg is not None:
                dbg.write(json.dumps({"sweep": sweeps, "theta": step, "accepted": accepted,
                                      "max_change": change, "skipped": skipped,
                                      "obj_prec": fs.obj_prec.tolist(),
                                      "obj_natmean": fs.obj_natmean.tolist(),
                                      "con_prec": fs.con_prec.tolist(),
                                      "con_natmean": fs.con_natmean.tolist(),
                                      "phi_prec": fs.phi_prec.tolist(),
                                      "phi_natmean": fs.phi_natmean.tolist()}) + "\n")
            theta *= decay
            if accepted and change < tol:
                converged = True
                break
    finally:
        if dbg is not None:
            dbg.close()
    status = "ok"
    if max_sweeps > 0 and not converged:
        status = "not_converged"
        warnings.warn(f"EP did not converge in {max_sweeps} sweeps "
                      f"(last change {change:.3g})", RuntimeWarning, stacklevel=2)
    if max_sweeps == 0:
        change = 0.0
    return EPResult(fs, cpd, priors, converged, sweeps if max_sweeps else 0,
                    float(change), theta, status, skipped)


def batch_factors(cpd0: CPDState, M: int, n_old: int, B: int, exclude=None):
    """One undamped EP refinement of the batch Omega factors from zero.

    ``cpd0`` covers n_old + B points and already includes all data/Pareto
    factors.  ``exclude`` is an optional (M, n_old + B) mask of pairs to
    leave out.  Returns the factor store over all n_old + B points with only
    the batch columns filled.
    """
    n = n_old + B
    K = cpd0.obj_mean.shape[0]
    J = cpd0.con_mean.shape[0]
    fs = FactorStore.zeros(K, J, M, n)
    mask = np.zeros((M, n), dtype=bool)
    mask[:, n_old:] = True
    if exclude is not None:
        mask &= ~exclude
    new, _ = _proposed_factors(cpd0, fs, mask)
    return new


def cpd_at_batch(models: SurrogateSet, result: EPResult, pareto_points, X_batch,
                 X_obs=None, max_halvings: int = 30):
    """Batch covariances before and after conditioning (dense reference path).

    Returns ``(prior_cov, cpd_cov)``, each of shape (K+J, B, B) and including
    the observation-noise diagonal.
    """
    X_batch = np.atleast_2d(np.asarray(X_batch, dtype=float))
    B = len(X_batch)
    pri = ep_priors(models, pareto_points, X_obs, X_batch)
    M, n_old = result.priors.M, result.priors.n
    if pri.n != n_old + B:
        raise ValueError("EP result does not match the observation set")
    fs = result.factors.padded(pri.n)
    cpd0 = reconstruct_cpd(pri, fs, check=False)
    bf = batch_factors(cpd0, M, n_old, B, pri.coincident)
    mask = np.zeros((M, pri.n), dtype=bool)
    mask[:, n_old:] = True
    mask &= ~pri.coincident
    noise = np.array([m.noise_var_raw for m in models.models])
    sl = slice(n_old, pri.n)
    eye = np.eye(B)
    K = pri.K

    def conditioned(scale_o, scale_c):
        full = replace(
            fs, obj_prec=np.where(mask, bf.obj_prec * scale_o[:, None, None], fs.obj_prec),
            obj_natmean=np.where(mask, bf.obj_natmean * scale_o[:, None, None], fs.obj_natmean),
            con_prec=np.where(mask, bf.con_prec * scale_c[:, None, None], fs.con_prec),
            con_natmean=np.where(mask, bf.con_natmean * scale_c[:, None, None], fs.con_natmean))
        cpd1 = reconstruct_cpd(pri, full, check=False)
        return np.concatenate([cpd1.obj_cov[:, sl, sl], cpd1.con_cov[:, sl, sl]])

    # halve the batch factors of any black-box whose batch block is not PD
    scale = np.ones(len(noise))
    for _ in range(max_halvings + 1):
        cpd_cov = conditioned(scale[:K], scale[K:]) + noise[:, None, None] * eye
        bad = np.zeros(len(noise), dtype=bool)
        for p, C in enumerate(cpd_cov):
            try:
                np.linalg.cholesky(C)
            except np.linalg.LinAlgError:
                bad[p] = True
        if not bad.any():
            break
        scale[bad] *= 0.5
    else:
        scale[bad] = 0.0
        cpd_cov = conditioned(scale[:K], scale[K:]) + noise[:, None, None] * eye
    prior_cov = np.concatenate([pri.obj_cov[:, sl, sl], pri.con_cov[:, sl, sl]])
    prior_cov = prior_cov + noise[:, None, None] * eye
    grew = np.linalg.slogdet(cpd_cov)[1] > np.linalg.slogdet(prior_cov)[1] + 1e-6
    if grew.any():
        logger.debug("conditioning increased the batch log-determinant of black-boxes %s",
                     np.flatnonzero(grew).tolist())
    return prior_cov, cpd_cov
