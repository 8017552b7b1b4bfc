"""Independent Gaussian-process surrogates with a Matern 5/2 ARD kernel.

Each black-box (objective or constraint) gets its own :class:`GPModel`.
Hyper-parameters are sampled from their posterior by slice sampling and
posterior function samples are drawn with random Fourier features.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

SQRT5 = np.sqrt(5.0)
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class GPModelError(RuntimeError):
    """Raised when a kernel matrix cannot be factorized even with max jitter."""


@dataclass(frozen=True)
class KernelParams:
    amplitude2: float
    lengthscales: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not self.amplitude2 > 0:
            raise ValueError("amplitude2 must be positive")
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        if self.noise_var < 0:
            raise ValueError("noise_var must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log_vector(self) -> np.ndarray:
        return np.concatenate(
            [[np.log(self.amplitude2)], np.log(self.lengthscales),
             [np.log(max(self.noise_var, 1e-300))]])

    @classmethod
    def from_log_vector(cls, theta) -> "KernelParams":
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:-1]),
                   float(np.exp(theta[-1])))


def _scaled_sqdist(X1, X2, lengthscales):
    A = np.atleast_2d(X1) / lengthscales
    B = np.atleast_2d(X2) / lengthscales
    d2 = (np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :]
          - 2.0 * A @ B.T)
    return np.maximum(d2, 0.0)


def matern52(X1, X2, params: KernelParams) -> np.ndarray:
    """Kernel matrix between the rows of ``X1`` and ``X2``."""
    r = np.sqrt(_scaled_sqdist(X1, X2, params.lengthscales))
    return params.amplitude2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r**2) * np.exp(-SQRT5 * r)


def kernel_matern52(x, x2, params: KernelParams) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise ValueError("dimension mismatch")
    return float(matern52(x[None], x2[None], params)[0, 0])


def _cholesky_with_jitter(K, base_noise):
    n = K.shape[0]
    for jitter in JITTER_LADDER:
        try:
            L = linalg.cholesky(K + (base_noise + jitter) * np.eye(n), lower=True)
            return L, jitter
        except linalg.LinAlgError:
            continue
    raise GPModelError("kernel matrix not positive definite after max jitter")


@dataclass(frozen=True)
class GPModel:
    """A fitted GP.  ``mean``/``scale`` map the normalized latent to raw units."""

    params: KernelParams
    X: np.ndarray
    y: np.ndarray
    mean: float = 0.0
    scale: float = 1.0
    chol: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.params.dim

    @property
    def noise_var_raw(self) -> float:
        """Observation noise variance in raw output units."""
        return self.scale**2 * self.params.noise_var

    @property
    def y_normalized(self) -> np.ndarray:
        return (self.y - self.mean) / self.scale

    def solve(self, B):
        """Return (K + sigma^2 I)^-1 B using the cached factor."""
        return linalg.cho_solve((self.chol, True), B)

    def predict(self, Xs, full_cov: bool = True):
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Kss = matern52(Xs, Xs, self.params) if full_cov else None
        if self.n == 0:
            m = np.full(len(Xs), self.mean)
            if full_cov:
                return m, self.scale**2 * Kss
            return m, np.full(len(Xs), self.scale**2 * self.params.amplitude2)
        Ks = matern52(self.X, Xs, self.params)
        m = self.mean + self.scale * (Ks.T @ self.weights)
        v = linalg.solve_triangular(self.chol, Ks, lower=True)
        if not full_cov:
            var = self.params.amplitude2 - np.sum(v**2, axis=0)
            return m, self.scale**2 * np.maximum(var, 0.0)
        V = Kss - v.T @ v
        V = 0.5 * (V + V.T)
        idx = np.diag_indices_from(V)
        V[idx] = np.maximum(V[idx], 0.0)
        return m, self.scale**2 * V

    def predict_marginal(self, Xs):
        return self.predict(Xs, full_cov=False)

    def log_marginal_likelihood(self) -> float:
        yn = self.y_normalized
        return float(-0.5 * yn @ self.weights - np.sum(np.log(np.diag(self.chol)))
                     - 0.5 * self.n * np.log(2 * np.pi))

    def with_params(self, params: KernelParams) -> "GPModel":
        return fit(self.X, self.y, params, mean=self.mean, scale=self.scale)


def fit(X, y, params: KernelParams, mean: float = 0.0, scale: float = 1.0) -> GPModel:
    """Factorize K + sigma^2 I for the training data (normalized by mean/scale)."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float).reshape(len(y), -1) if len(y) else \
        np.zeros((0, params.dim))
    if len(y) == 0:
        return GPModel(params, X, y, mean, scale, np.zeros((0, 0)), np.zeros(0), 0.0)
    K = matern52(X, X, params)
    L, jitter = _cholesky_with_jitter(K, params.noise_var)
    yn = (y - mean) / scale
    w = linalg.cho_solve((L, True), yn)
    return GPModel(params, X, y, mean, scale, L, w, jitter)


def output_normalization(y):
    """Empirical mean and scale used to normalize a black-box's outputs."""
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        return 0.0, 1.0
    scale = float(np.std(y)) if len(y) > 1 else 0.0
    if not np.isfinite(scale) or scale < 1e-12:
        scale = max(abs(float(np.mean(y))), 1.0)
    return float(np.mean(y)), scale


def fit_normalized(X, y, params: KernelParams) -> GPModel:
    mean, scale = output_normalization(y)
    return fit(X, y, params, mean=mean, scale=scale)


# ---------------------------------------------------------------------------
# Surrogate bundles


@dataclass(frozen=True)
class SurrogateSet:
    """All black-box models for one hyper-parameter sample."""

    objectives: tuple
    constraints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "objectives", tuple(self.objectives))
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def K(self) -> int:
        return len(self.objectives)

    @property
    def J(self) -> int:
        return len(self.constraints)

    @property
    def models(self) -> tuple:
        return self.objectives + self.constraints

    @property
    def dim(self) -> int:
        return self.objectives[0].dim

    @property
    def X(self) -> np.ndarray:
        return self.objectives[0].X


def averaged_prediction(surrogates: Sequence[SurrogateSet], Xs):
    """Equally weighted hyper-sample mixture: mean and marginal variance.

    Returns arrays of shape (K+J, n).
    """
    means, second = [], []
    for s in surrogates:
        ms, vs = zip(*(m.predict_marginal(Xs) for m in s.models))
        ms, vs = np.array(ms), np.array(vs)
        means.append(ms)
        second.append(vs + ms**2)
    mean = np.mean(means, axis=0)
    var = np.maximum(np.mean(second, axis=0) - mean**2, 0.0)
    return mean, var


# ---------------------------------------------------------------------------
# Slice sampling of hyper-parameters


@dataclass(frozen=True)
class HyperPrior:
    """Priors over log hyper-parameters.

    Log-normal on amplitude^2 and lengthscales, uniform on log noise within
    ``noise_bounds``.  A zero std (or equal noise bounds) pins that coordinate.
    """

    log_amp_mean: float = 0.0
    log_amp_std: float = 1.0
    log_ls_mean: float = 0.0
    log_ls_std: float = 1.0
    noise_bounds: tuple = (1e-8, 1.0)

    def log_density(self, theta) -> float:
        lp = 0.0
        if self.log_amp_std > 0:
            lp += -0.5 * ((theta[0] - self.log_amp_mean) / self.log_amp_std) ** 2
        if self.log_ls_std > 0:
            lp += -0.5 * np.sum(((theta[1:-1] - self.log_ls_mean) / self.log_ls_std) ** 2)
        lo, hi = np.log(self.noise_bounds[0]), np.log(self.noise_bounds[1])
        if hi > lo and not lo <= theta[-1] <= hi:
            return -np.inf
        return float(lp)

    def free_mask(self, dim: int) -> np.ndarray:
        mask = np.ones(dim + 2, dtype=bool)
        mask[0] = self.log_amp_std > 0
        mask[1:-1] = self.log_ls_std > 0
        mask[-1] = self.noise_bounds[1] > self.noise_bounds[0]
        return mask

    def point(self, dim: int) -> KernelParams:
        """Prior median, used as the default chain start."""
        noise = float(np.sqrt(self.noise_bounds[0] * self.noise_bounds[1]))
        if self.noise_bounds[1] > self.noise_bounds[0]:
            noise = min(1e-3, self.noise_bounds[1]) if self.noise_bounds[0] <= 1e-3 else noise
        return KernelParams(float(np.exp(self.log_amp_mean)),
                            np.full(dim, np.exp(self.log_ls_mean)), noise)


@dataclass(frozen=True)
class HyperPosterior:
    samples: tuple

    def __len__(self):
        return len(self.samples)


def slice_sample(logp: Callable, x0, rng: np.random.Generator, n_samples: int,
                 widths=1.0, burn_in: int = 0, thin: int = 1, free=None,
                 max_steps_out: int = 32):
    """Coordinate-wise univariate slice sampling with stepping out and shrinkage.

    Non-finite log densities are treated as zero density, so the slice just
    shrinks past them.
    """
    x = np.array(x0, dtype=float)
    dim = len(x)
    widths = np.broadcast_to(np.asarray(widths, dtype=float), (dim,))
    free = np.ones(dim, dtype=bool) if free is None else np.asarray(free, dtype=bool)

    def safe_logp(z):
        v = logp(z)
        return v if np.isfinite(v) else -np.inf

    cur = safe_logp(x)
    if not np.isfinite(cur):
        raise ValueError("slice sampler started at a zero-density point")
    out = []
    total = burn_in + n_samples * thin
    for it in range(total):
        for i in np.flatnonzero(free):
            log_y = cur + np.log(rng.uniform())
            w = widths[i]
            left = x[i] - w * rng.uniform()
            right = left + w
            z = x.copy()
            for _ in range(max_steps_out):
                z[i] = left
                if safe_logp(z) <= log_y:
                    break
                left -= w
            for _ in range(max_steps_out):
                z[i] = right
                if safe_logp(z) <= log_y:
                    break
                right += w
            while True:
                z[i] = rng.uniform(left, right)
                val = safe_logp(z)
                if val > log_y:
                    x, cur = z, val
                    break
                if z[i] < x[i]:
                    left = z[i]
                else:
                    right = z[i]
                if right - left < 1e-12:
                    break
        if it >= burn_in and (it - burn_in) % thin == thin - 1:
            out.append(x.copy())
    return np.array(out)


def log_marginal_likelihood(X, yn, params: KernelParams) -> float:
    try:
        return fit(X, yn, params).log_marginal_likelihood()
    except (GPModelError, ValueError):
        return -np.inf


def slice_sample_hypers(model: GPModel, prior: HyperPrior, n_samples: int,
                        rng: np.random.Generator, burn_in: int = 20, thin: int = 1,
                        start: KernelParams | None = None) -> HyperPosterior:
    """Posterior samples of kernel hyper-parameters (log-space slice sampling)."""
    if model.n < 1:
        raise ValueError("slice sampling needs at least one observation")
    dim = model.dim
    free = prior.free_mask(dim)
    x0 = (start or prior.point(dim)).to_log_vector()
    if not free.any():
        return HyperPosterior(tuple(KernelParams.from_log_vector(x0)
                                    for _ in range(n_samples)))
    yn = model.y_normalized
    X = model.X

    def logp(theta):
        lp = prior.log_density(theta)
        if not np.isfinite(lp):
            return -np.inf
        if np.any(theta[:-1] > 20) or np.any(theta[:-1] < -20):
            return -np.inf
        return lp + log_marginal_likelihood(X, yn, KernelParams.from_log_vector(theta))

    if not np.isfinite(logp(x0)):
        x0 = prior.point(dim).to_log_vector()
    draws = slice_sample(logp, x0, rng, n_samples, widths=1.0, burn_in=burn_in,
                         thin=thin, free=free)
    return HyperPosterior(tuple(KernelParams.from_log_vector(t) for t in draws))


# ---------------------------------------------------------------------------
# Random-feature function samples


@dataclass(frozen=True)
class FunctionSample:
    W: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    amplitude2: float
    mean: float = 0.0
    scale: float = 1.0

    @property
    def num_features(self) -> int:
        return len(self.b)

    def features(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.sqrt(2.0 * self.amplitude2 / self.num_features) * np.cos(X @ self.W.T + self.b)

    def __call__(self, X) -> np.ndarray:
        return self.mean + self.scale * (self.features(X) @ self.theta)


def sample_matern52_spectrum(lengthscales, num_features: int, rng: np.random.Generator):
    """Frequencies from the Matern-5/2 spectral density (Student-t, 5 dof)."""
    ls = np.asarray(lengthscales, dtype=float)
    z = rng.standard_normal((num_features, len(ls)))
    g = rng.chisquare(5.0, size=(num_features, 1))
    return z / ls * np.sqrt(5.0 / g)


def sample_function(model: GPModel, num_features: int,
                    rng: np.random.Generator) -> FunctionSample:
    """Approximate posterior sample path via random features.

    Weights are drawn from the feature-space Gaussian posterior with
    pathwise conditioning, which only needs an N x N solve.
    """
    if num_features < 1:
        raise ValueError("num_features must be >= 1")
    p = model.params
    W = sample_matern52_spectrum(p.lengthscales, num_features, rng)
    b = rng.uniform(0.0, 2.0 * np.pi, size=num_features)
    theta = rng.standard_normal(num_features)
    sample = FunctionSample(W, b, theta, p.amplitude2, model.mean, model.scale)
    if model.n == 0:
        return sample
    Phi = sample.features(model.X)
    noise = p.noise_var
    A = Phi @ Phi.T
    L, jitter = _cholesky_with_jitter(A, noise)
    eps = rng.standard_normal(model.n) * np.sqrt(noise + jitter)
    resid = model.y_normalized - Phi @ theta - eps
    theta = theta + Phi.T @ linalg.cho_solve((L, True), resid)
    return replace(sample, theta=theta)
