"""Exact RBF Gaussian process with a constant prior mean.

Used both as the data-query surrogate and as the student's prior.  An optional
``per_point_noise`` vector adds heteroscedastic noise on the training diagonal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from tsbo.numerics import Adam, cholesky, inverse_from_cholesky, solve_psd

LOG_2PI = math.log(2.0 * math.pi)
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
MIN_NOISE = 1e-6


@dataclass(frozen=True)
class GpHyper:
    log_outputscale: float = 0.0
    log_lengthscale: float = 0.0
    log_noise: float = math.log(1e-2)
    mean_const: float = 0.0

    @property
    def outputscale(self) -> float:
        return math.exp(self.log_outputscale)

    @property
    def lengthscale(self) -> float:
        return math.exp(self.log_lengthscale)

    @property
    def noise(self) -> float:
        return math.exp(self.log_noise)

    def clamped(self) -> "GpHyper":
        lo, hi = (math.log(b) for b in LENGTHSCALE_BOUNDS)
        return replace(
            self,
            log_lengthscale=min(max(self.log_lengthscale, lo), hi),
            log_noise=max(self.log_noise, math.log(MIN_NOISE)),
        )


@dataclass(frozen=True)
class LabeledSet:
    z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if z.shape[0] != y.shape[0]:
            raise ValueError(f"{z.shape[0]} inputs but {y.shape[0]} labels")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class GpPosterior:
    mean: np.ndarray
    variance: np.ndarray


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    return cdist(a, b, "sqeuclidean")


def kernel_matrix(h: GpHyper, a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return h.outputscale * np.exp(-0.5 * sq_dists(a, b) / h.lengthscale**2)


def _train_cov(h: GpHyper, z: np.ndarray, per_point_noise) -> tuple[np.ndarray, np.ndarray]:
    k = kernel_matrix(h, z, z)
    cov = k.copy()
    diag = np.full(z.shape[0], h.noise)
    if per_point_noise is not None:
        diag = diag + np.asarray(per_point_noise, dtype=float)
    cov[np.diag_indices_from(cov)] += diag
    return k, cov


def _check_noise(per_point_noise, n: int):
    if per_point_noise is None:
        return None
    noise = np.asarray(per_point_noise, dtype=float).reshape(-1)
    if noise.shape[0] != n:
        raise ValueError(f"per_point_noise has length {noise.shape[0]}, expected {n}")
    if np.any(noise < 0):
        raise ValueError("per_point_noise must be nonnegative")
    return noise


def neg_log_marginal_likelihood(h: GpHyper, z, y, per_point_noise=None, grad: bool = False):
    """Exact NLL and, optionally, its gradient in (log s, log l, log noise, mean)."""
    z = np.atleast_2d(z)
    y = np.asarray(y, dtype=float)
    k, cov = _train_cov(h, z, per_point_noise)
    chol = cholesky(cov)
    r = y - h.mean_const
    alpha = solve_psd(chol, r)
    n = y.shape[0]
    nll = 0.5 * float(r @ alpha) + 0.5 * chol.logdet() + 0.5 * n * LOG_2PI
    if not grad:
        return nll
    w = inverse_from_cholesky(chol) - np.outer(alpha, alpha)
    d2 = sq_dists(z, z)
    g_s = 0.5 * float(np.sum(w * k))
    g_l = 0.5 * float(np.sum(w * k * d2)) / h.lengthscale**2
    g_n = 0.5 * float(np.trace(w)) * h.noise
    g_m = -float(np.sum(alpha))
    return nll, np.array([g_s, g_l, g_n, g_m])


def _standardize(y: np.ndarray) -> tuple[float, float]:
    mu = float(np.mean(y))
    sd = float(np.std(y))
    if not np.isfinite(sd) or sd < 1e-12:
        sd = 1.0
    return mu, sd


def _to_standard(h: GpHyper, mu: float, sd: float) -> GpHyper:
    return GpHyper(
        h.log_outputscale - 2 * math.log(sd),
        h.log_lengthscale,
        h.log_noise - 2 * math.log(sd),
        (h.mean_const - mu) / sd,
    )


def _from_standard(h: GpHyper, mu: float, sd: float) -> GpHyper:
    return GpHyper(
        h.log_outputscale + 2 * math.log(sd),
        h.log_lengthscale,
        h.log_noise + 2 * math.log(sd),
        h.mean_const * sd + mu,
    )


def gp_fit(
    data: LabeledSet,
    per_point_noise=None,
    init: GpHyper | None = None,
    steps: int = 100,
    lr: float = 0.05,
    fit_mean: bool = True,
) -> GpHyper:
    """Fit hyperparameters by Adam on the exact negative log marginal likelihood.

    Labels are standardized for the optimization; the returned hyperparameters
    are in the original label units.  The best parameters seen are returned.
    """
    init = init or GpHyper()
    if steps <= 0:
        return init
    noise = _check_noise(per_point_noise, len(data))
    mu, sd = _standardize(data.y)
    ys = (data.y - mu) / sd
    noise_s = None if noise is None else noise / sd**2
    theta = np.array(_astuple(_to_standard(init, mu, sd).clamped()))
    opt = Adam([theta.shape])
    best_theta, best_nll = theta.copy(), math.inf
    for _ in range(steps + 1):
        h = GpHyper(*theta)
        nll, g = neg_log_marginal_likelihood(h, data.z, ys, noise_s, grad=True)
        if nll < best_nll:
            best_nll, best_theta = nll, theta.copy()
        if not fit_mean:
            g[3] = 0.0
        (theta,) = opt.step([theta], [g], lr)
        theta = np.array(_astuple(GpHyper(*theta).clamped()))
    return _from_standard(GpHyper(*best_theta), mu, sd)


def _astuple(h: GpHyper) -> tuple[float, float, float, float]:
    return (h.log_outputscale, h.log_lengthscale, h.log_noise, h.mean_const)


class GpPredictor:
    """Posterior of a GP conditioned on a training set, with cached factorization."""

    def __init__(self, h: GpHyper, data: LabeledSet, per_point_noise=None):
        self.h = h
        self.z = data.z
        noise = _check_noise(per_point_noise, len(data))
        _, cov = _train_cov(h, data.z, noise)
        self.chol = cholesky(cov)
        self.alpha = solve_psd(self.chol, data.y - h.mean_const)

    def predict(self, query) -> GpPosterior:
        query = np.atleast_2d(np.asarray(query, dtype=float))
        ks = kernel_matrix(self.h, self.z, query)
        mean = self.h.mean_const + ks.T @ self.alpha
        v = solve_triangular(self.chol.lower, ks, lower=True, check_finite=False)
        var = self.h.outputscale - np.sum(v * v, axis=0)
        return GpPosterior(mean, np.maximum(var, 0.0))

    def predict_with_grad(self, query):
        """Mean, variance and their gradients with respect to each query row."""
        query = np.atleast_2d(np.asarray(query, dtype=float))
        ks = kernel_matrix(self.h, self.z, query)  # (N, Q)
        mean = self.h.mean_const + ks.T @ self.alpha
        kinv_ks = solve_psd(self.chol, ks)
        var = self.h.outputscale - np.sum(ks * kinv_ks, axis=0)
        ell2 = self.h.lengthscale**2
        # d k(z_j, x) / d x = k * (z_j - x) / l^2
        w_mean = ks * self.alpha[:, None]
        d_mean = (w_mean.T @ self.z - w_mean.sum(0)[:, None] * query) / ell2
        w_var = ks * kinv_ks
        d_var = -2.0 * (w_var.T @ self.z - w_var.sum(0)[:, None] * query) / ell2
        clipped = var <= 0
        var = np.where(clipped, 0.0, var)
        d_var[clipped] = 0.0
        return mean, var, d_mean, d_var


def gp_predict(h: GpHyper, data: LabeledSet, per_point_noise, query) -> GpPosterior:
    return GpPredictor(h, data, per_point_noise).predict(query)


def gp_nll(h: GpHyper, data: LabeledSet, per_point_noise, test: LabeledSet) -> float:
    """Mean Gaussian NLL of test labels under the posterior predictive."""
    post = gp_predict(h, data, per_point_noise, test.z)
    var = post.variance + h.noise
    r = test.y - post.mean
    return float(np.mean(0.5 * (LOG_2PI + np.log(var) + r * r / var)))


def sample_gp_prior(h: GpHyper, z, rng: np.random.Generator) -> np.ndarray:
    """Draw noisy labels from the prior at ``z``."""
    _, cov = _train_cov(h, np.atleast_2d(z), None)
    chol = cholesky(cov)
    return h.mean_const + chol.lower @ rng.standard_normal(cov.shape[0])
