"""Dense linear algebra, finite differences and a small Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotri

from tsbo.errors import NonFinite, NotPositiveDefinite

BASE_JITTER = 1e-6
MAX_ESCALATIONS = 4


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))


def cholesky(a, jitter: float = 0.0, cap: float | None = None) -> CholeskyFactor:
    """Cholesky factor of ``a + jitter * I``.

    On failure the jitter is raised to ``BASE_JITTER`` times the mean diagonal
    and then multiplied by 10 per retry, never beyond ``cap`` (default: four
    escalations above the base).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix has non-finite entries")
    if a.size and np.abs(a - a.T).max() > 1e-10 * max(1.0, np.abs(a).max()):
        raise ValueError("matrix is not symmetric")
    scale = float(np.mean(np.abs(np.diag(a)))) if a.size else 1.0
    scale = scale if scale > 0 else 1.0
    base = BASE_JITTER * scale
    if cap is None:
        cap = base * 10.0**MAX_ESCALATIONS
    n = a.shape[0]
    eye = np.eye(n)
    current = float(jitter)
    while True:
        try:
            lower = np.linalg.cholesky(a + current * eye if current > 0 else a)
            return CholeskyFactor(lower, current)
        except np.linalg.LinAlgError:
            pass
        nxt = max(current * 10.0, base)
        if nxt > cap * (1 + 1e-12):
            raise NotPositiveDefinite(f"factorization failed with jitter up to {current:.3g}")
        current = nxt


def solve_psd(chol: CholeskyFactor, b) -> np.ndarray:
    """Solve ``A x = b`` given the Cholesky factor of ``A``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != chol.dim:
        raise ValueError(f"dimension mismatch: factor {chol.dim}, rhs {b.shape}")
    return cho_solve((chol.lower, True), b, check_finite=False)


def inverse_from_cholesky(chol: CholeskyFactor) -> np.ndarray:
    inv, info = dpotri(chol.lower, lower=1)
    if info != 0:
        return solve_psd(chol, np.eye(chol.dim))
    return np.tril(inv) + np.tril(inv, -1).T


def finite_diff_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


class Adam:
    """Adam moments for a list of parameter arrays.

    ``step`` returns new arrays and advances the moments in place.
    """

    def __init__(self, shapes, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    @classmethod
    def like(cls, params, **kw) -> "Adam":
        return cls([np.shape(p) for p in params], **kw)

    def step(self, params, grads, lr: float):
        if len(grads) != len(self.m):
            raise ValueError("gradient list does not match optimizer state")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFinite("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            out.append(p - lr * mhat / (np.sqrt(vhat) + self.eps))
        return out
