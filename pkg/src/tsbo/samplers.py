"""Unlabeled-data samplers: GEV-targeted MCMC, a learned Gaussian, and uniform.

The GEV sampler fits a generalized extreme value distribution to the best
observed labels and runs random-walk Metropolis-Hastings in latent space with
target density ``gev_pdf(teacher_mean(z))``, so that the teacher's predicted
labels of the samples follow the fitted extreme-value law.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from tsbo.errors import ChainStuck, DegenerateInput
from tsbo.numerics import Adam
from tsbo.teacher import TeacherNet, teacher_mean

XI_ZERO = 1e-8
LOG_SCALE_BOUNDS = (math.log(1e-4), math.log(1e3))


@dataclass(frozen=True)
class GevParams:
    a: float
    b: float
    xi: float

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("GEV scale must be positive")


@dataclass(frozen=True)
class GaussSamplerParams:
    mu: np.ndarray
    log_scale: np.ndarray

    def clamped(self) -> "GaussSamplerParams":
        return GaussSamplerParams(self.mu, np.clip(self.log_scale, *LOG_SCALE_BOUNDS))


@dataclass
class McmcChain:
    """State of a set of parallel random-walk chains sharing one step size.

    ``current`` is ``(n_chains, d)``; a single chain is ``n_chains == 1``.
    """

    current: np.ndarray
    step_scale: float = 0.5
    accepted: int = 0
    proposed: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


# --- GEV density -----------------------------------------------------------


def gev_logpdf(p: GevParams, y):
    """Log density of the GEV; ``-inf`` outside the support."""
    y = np.asarray(y, dtype=float)
    ybar = (y - p.a) / p.b
    log_b = math.log(p.b)
    if abs(p.xi) < XI_ZERO:
        out = -ybar - np.exp(-ybar) - log_b
    else:
        t = 1.0 + p.xi * ybar
        inside = t > 0
        ts = np.where(inside, t, 1.0)
        log_t = np.log(ts)
        out = -(1.0 + 1.0 / p.xi) * log_t - np.exp(-log_t / p.xi) - log_b
        out = np.where(inside, out, -np.inf)
    return out if out.ndim else float(out)


def gev_cdf(p: GevParams, y):
    y = np.asarray(y, dtype=float)
    ybar = (y - p.a) / p.b
    if abs(p.xi) < XI_ZERO:
        return np.exp(-np.exp(-ybar))
    t = 1.0 + p.xi * ybar
    with np.errstate(divide="ignore", over="ignore"):
        inner = np.where(t > 0, np.power(np.maximum(t, 1e-300), -1.0 / p.xi), np.inf if p.xi > 0 else 0.0)
    return np.exp(-inner)


def gev_sample(p: GevParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws."""
    e = -np.log(rng.uniform(size=n))
    if abs(p.xi) < XI_ZERO:
        return p.a - p.b * np.log(e)
    return p.a + p.b * (np.power(e, -p.xi) - 1.0) / p.xi


def _gev_loglik_grad(theta, y):
    """Total log-likelihood and its gradient in (a, log b, xi)."""
    a, log_b, xi = theta
    b = math.exp(log_b)
    ybar = (y - a) / b
    n = y.shape[0]
    if abs(xi) < 1e-6:
        e = np.exp(-ybar)
        # Gumbel limit plus first-order term in xi
        ll = float(np.sum(-ybar - e)) - n * log_b
        dl_dybar = -1.0 + e
        d_xi = float(np.sum(0.5 * ybar**2 - ybar - 0.5 * e * ybar**2))
        ll += xi * d_xi
    else:
        t = 1.0 + xi * ybar
        if np.any(t <= 0):
            return -math.inf, None
        log_t = np.log1p(xi * ybar)
        tp = np.exp(-log_t / xi)
        ll = float(np.sum(-(1.0 + 1.0 / xi) * log_t - tp)) - n * log_b
        dl_dybar = -(1.0 + xi) / t + tp / t
        d_xi = float(np.sum(
            log_t / xi**2 - (1.0 + 1.0 / xi) * ybar / t - tp * (log_t / xi**2 - ybar / (xi * t))
        ))
    d_a = float(np.sum(dl_dybar)) * (-1.0 / b)
    d_logb = float(np.sum(-ybar * dl_dybar)) - n
    return ll, np.array([d_a, d_logb, d_xi])


def gev_nll(p: GevParams, labels) -> float:
    return -float(np.sum(gev_logpdf(p, labels)))


def _project_support(theta, y):
    """Shrink xi toward zero until every label is inside the support."""
    a, log_b, xi = theta
    b = math.exp(log_b)
    ybar = (y - a) / b
    for _ in range(60):
        if abs(xi) < XI_ZERO or np.all(1.0 + xi * ybar > 0):
            break
        xi *= 0.5
    if abs(xi) < XI_ZERO:
        xi = 0.0
    return np.array([a, log_b, xi])


def gev_init(labels) -> GevParams:
    """Gumbel method-of-moments starting point."""
    y = np.asarray(labels, dtype=float)
    sd = float(np.std(y))
    b = max(sd * math.sqrt(6.0) / math.pi, 1e-8)
    return GevParams(float(np.mean(y)) - 0.5772156649 * b, b, 0.0)


def gev_fit(extreme_labels, init: GevParams | None = None, steps: int = 1000, lr: float = 0.02) -> GevParams:
    """Maximum likelihood by Adam on (a, log b, xi); best iterate is returned."""
    y = np.asarray(extreme_labels, dtype=float).reshape(-1)
    if y.shape[0] < 3:
        raise ValueError("need at least 3 labels to fit a GEV")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    if np.ptp(y) <= 1e-12 * max(1.0, float(np.abs(y).max())):
        raise DegenerateInput("all extreme labels are identical")
    init = init or gev_init(y)
    if steps <= 0:
        return init
    # optimize in units of the label spread so one learning rate fits all tasks
    loc, spread = float(np.mean(y)), float(np.std(y))
    ys = (y - loc) / spread
    theta = _project_support(np.array([(init.a - loc) / spread, math.log(init.b / spread), init.xi]), ys)
    opt = Adam([(3,)])
    best, best_ll = theta.copy(), -math.inf
    for _ in range(steps + 1):
        ll, grad = _gev_loglik_grad(theta, ys)
        if ll > best_ll:
            best_ll, best = ll, theta.copy()
        if grad is None or not np.all(np.isfinite(grad)):
            theta = _project_support(theta, ys)
            continue
        (theta,) = opt.step([theta], [-grad], lr)
        theta = _project_support(theta, ys)
    a, log_b, xi = best
    return GevParams(a * spread + loc, math.exp(log_b) * spread, float(xi))


def extreme_labels(y, fraction: float = 0.2, minimum: int = 10) -> np.ndarray:
    """Largest labels: the top ``fraction`` of the data, at least ``minimum``."""
    y = np.asarray(y, dtype=float)
    k = min(y.shape[0], max(minimum, int(math.ceil(fraction * y.shape[0]))))
    return np.sort(y)[::-1][:k]


# --- MCMC ------------------------------------------------------------------


def _log_target(p: GevParams, teacher: TeacherNet, z, bounds):
    lt = np.asarray(gev_logpdf(p, teacher_mean(teacher, z)), dtype=float)
    if bounds is not None:
        lo, hi = bounds
        outside = np.any((z < lo) | (z > hi), axis=1)
        lt = np.where(outside, -np.inf, lt)
    return lt


def _mh_step(chain: McmcChain, log_cur, target, rng):
    prop = chain.current + chain.step_scale * rng.standard_normal(chain.current.shape)
    log_prop = target(prop)
    log_u = np.log(rng.uniform(size=log_prop.shape[0]))
    with np.errstate(invalid="ignore"):
        accept = np.isfinite(log_prop) & ((log_u < log_prop - log_cur) | ~np.isfinite(log_cur))
    chain.current = np.where(accept[:, None], prop, chain.current)
    log_cur = np.where(accept, log_prop, log_cur)
    n_acc = int(accept.sum())
    chain.accepted += n_acc
    chain.proposed += accept.shape[0]
    return log_cur, n_acc


def run_chain(chain: McmcChain, log_target, burn_in: int, n: int, rng, thin: int = 5, window: int = 50):
    """Generic adaptive random-walk MH over parallel chains.

    Step size adapts during burn-in toward 30-45% acceptance; after burn-in the
    chains advance ``thin`` steps between collected states.
    """
    chain.current = np.atleast_2d(np.asarray(chain.current, dtype=float))
    n_chains = chain.current.shape[0]
    log_cur = log_target(chain.current)
    burn_acc = 0
    win_acc = win_prop = 0
    for _ in range(burn_in):
        log_cur, n_acc = _mh_step(chain, log_cur, log_target, rng)
        burn_acc += n_acc
        win_acc += n_acc
        win_prop += n_chains
        if win_prop >= window * n_chains:
            rate = win_acc / win_prop
            if rate < 0.30:
                chain.step_scale *= 0.5 if rate == 0 else 0.75
            elif rate > 0.45:
                chain.step_scale *= 1.4
            win_acc = win_prop = 0
    if burn_in > 0 and burn_acc == 0:
        raise ChainStuck("no proposal accepted during burn-in")
    out = []
    collected = 0
    while collected < n:
        for _ in range(thin):
            log_cur, _ = _mh_step(chain, log_cur, log_target, rng)
        take = min(n_chains, n - collected)
        out.append(chain.current[:take].copy())
        collected += take
    if not out:
        return np.zeros((0, chain.current.shape[1]))
    return np.concatenate(out, axis=0)


def gev_mcmc_sample(
    p: GevParams,
    teacher: TeacherNet,
    chain: McmcChain,
    burn_in: int,
    n: int,
    rng: np.random.Generator,
    thin: int = 5,
    bounds=None,
) -> np.ndarray:
    """Latent points whose teacher-predicted labels follow the fitted GEV."""
    return run_chain(chain, lambda z: _log_target(p, teacher, z, bounds), burn_in, n, rng, thin=thin)


# --- reparameterized Gaussian ---------------------------------------------


def gauss_init(z_top, log_scale: float = 0.0) -> GaussSamplerParams:
    z_top = np.atleast_2d(z_top)
    return GaussSamplerParams(z_top.mean(axis=0), np.full(z_top.shape[1], float(log_scale)))


def gauss_sample(p: GaussSamplerParams, m: int, rng: np.random.Generator, bounds=None):
    """Return ``(z_u, r)`` with ``z_u = mu + exp(log_scale) * r``, clipped to ``bounds`` if given."""
    r = rng.standard_normal((m, p.mu.shape[0]))
    z = p.mu + np.exp(p.log_scale) * r
    if bounds is not None:
        z = np.clip(z, bounds[0], bounds[1])
    return z, r


def gauss_param_grads(p: GaussSamplerParams, d_zu, r, bounds=None):
    """Chain ``dL/dz_u`` to ``(mu, log_scale)``; clipped coordinates pass no gradient."""
    d_zu = np.atleast_2d(d_zu)
    if d_zu.shape != r.shape:
        raise ValueError(f"gradient shape {d_zu.shape} != noise shape {r.shape}")
    if bounds is not None:
        raw = p.mu + np.exp(p.log_scale) * r
        d_zu = np.where((raw >= bounds[0]) & (raw <= bounds[1]), d_zu, 0.0)
    return d_zu.sum(axis=0), (d_zu * r * np.exp(p.log_scale)).sum(axis=0)


def gauss_update(p: GaussSamplerParams, d_zu, r, lr: float, opt: Adam | None = None,
                 bounds=None) -> GaussSamplerParams:
    """One Adam step of the sampler parameters along the reparameterized gradient."""
    if opt is None:
        opt = Adam.like([p.mu, p.log_scale])
    d_mu, d_log_scale = gauss_param_grads(p, d_zu, r, bounds)
    mu, log_scale = opt.step([p.mu, p.log_scale], [d_mu, d_log_scale], lr)
    return GaussSamplerParams(mu, log_scale).clamped()


# --- uniform baseline ------------------------------------------------------


def random_sample(bounds, m: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    return lo + (hi - lo) * rng.uniform(size=(m, lo.shape[0]))
