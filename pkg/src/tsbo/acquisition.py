"""Expected improvement and its multi-start maximization inside a box."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from tsbo.errors import AcquisitionFailure
from tsbo.gp import GpHyper, GpPosterior, GpPredictor, LabeledSet

SIGMA_FLOOR = 1e-12
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _pdf(x):
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class BoundBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(lo > hi) or not np.all(np.isfinite(lo) & np.isfinite(hi)):
            raise ValueError("invalid bound box")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, dim: int, half_width: float = 3.0) -> "BoundBox":
        return cls(np.full(dim, -half_width), np.full(dim, half_width))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def clip(self, z):
        return np.clip(z, self.lo, self.hi)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.uniform(size=(n, self.dim))


def _ei(mean, sigma, incumbent):
    mean = np.asarray(mean, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    out = np.maximum(mean - incumbent, 0.0)
    ok = sigma >= SIGMA_FLOOR
    gamma = np.where(ok, (mean - incumbent) / np.where(ok, sigma, 1.0), 0.0)
    closed = sigma * (gamma * ndtr(gamma) + _pdf(gamma))
    return np.where(ok, closed, out), gamma, ok


def expected_improvement(post: GpPosterior, incumbent: float) -> np.ndarray:
    """EI for maximization."""
    return _ei(post.mean, np.sqrt(np.maximum(post.variance, 0.0)), incumbent)[0]


def ei_with_grad(model: GpPredictor, x, incumbent: float):
    """EI at the rows of ``x`` and its gradient through the GP posterior."""
    mean, var, d_mean, d_var = model.predict_with_grad(x)
    sigma = np.sqrt(var)
    ei, gamma, ok = _ei(mean, sigma, incumbent)
    cdf = ndtr(gamma)
    pdf = _pdf(gamma)
    # dEI/dmu = Phi(gamma), dEI/dsigma = phi(gamma), dsigma = dvar / (2 sigma)
    safe_sigma = np.where(ok, sigma, 1.0)
    grad = np.where(
        ok[:, None],
        cdf[:, None] * d_mean + (pdf / (2.0 * safe_sigma))[:, None] * d_var,
        (mean > incumbent)[:, None] * d_mean,
    )
    return ei, grad


def maximize_acquisition(
    h: GpHyper,
    data: LabeledSet,
    per_point_noise,
    incumbent: float,
    box: BoundBox,
    restarts: int = 32,
    rng: np.random.Generator | None = None,
    maxiter: int = 100,
    gtol: float = 1e-6,
) -> np.ndarray:
    """Best EI point among L-BFGS-B ascents from uniform starts in the box."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    model = GpPredictor(h, data, per_point_noise)
    starts = box.uniform(restarts, rng)
    if np.all(box.lo == box.hi):
        return box.lo.copy()
    # scale EI so that the optimizer's tolerances are meaningful
    scale = max(float(np.std(data.y)), 1e-12)

    def negative(x):
        ei, g = ei_with_grad(model, x[None, :], incumbent)
        return -ei[0] / scale, -g[0] / scale

    bounds = list(zip(box.lo, box.hi))
    best_x, best_val = None, -np.inf
    for x0 in starts:
        try:
            res = minimize(negative, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter, "gtol": gtol})
            x, val = box.clip(res.x), -res.fun
        except (ValueError, FloatingPointError, np.linalg.LinAlgError):
            continue
        if not np.isfinite(val):
            continue
        if val > best_val:
            best_x, best_val = x, val
    if best_x is None:
        raise AcquisitionFailure("every restart produced a non-finite acquisition value")
    return best_x
