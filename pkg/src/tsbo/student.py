"""Uncertainty-aware student GP and the feedback loss it returns to the teacher.

The student is a zero-mean RBF GP whose training covariance over the pseudo
points carries the teacher's predicted variance on its diagonal.  Its posterior
mean at validation inputs, compared with the true labels, gives the feedback
loss; ``feedback_backward`` differentiates that loss in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from tsbo.gp import LOG_2PI, GpHyper, LabeledSet, kernel_matrix, sq_dists
from tsbo.numerics import Adam, CholeskyFactor, cholesky, inverse_from_cholesky, solve_psd


@dataclass(frozen=True)
class PseudoSet:
    z_u: np.ndarray
    y_hat: np.ndarray
    var_t: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z_u, dtype=float))
        y = np.asarray(self.y_hat, dtype=float).reshape(-1)
        v = np.asarray(self.var_t, dtype=float).reshape(-1)
        if not (z.shape[0] == y.shape[0] == v.shape[0]):
            raise ValueError("pseudo set components have different lengths")
        if np.any(v < 0):
            raise ValueError("teacher variances must be nonnegative")
        object.__setattr__(self, "z_u", z)
        object.__setattr__(self, "y_hat", y)
        object.__setattr__(self, "var_t", v)

    def __len__(self) -> int:
        return self.y_hat.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "PseudoSet":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class FeedbackGrads:
    d_yhat: np.ndarray
    d_vart: np.ndarray
    d_zu: np.ndarray
    d_student_hyper: np.ndarray  # (log outputscale, log lengthscale, log noise)
    loss: float = float("nan")


def assemble_sigma_u(h: GpHyper, pseudo: PseudoSet) -> np.ndarray:
    sigma = kernel_matrix(h, pseudo.z_u, pseudo.z_u)
    sigma[np.diag_indices_from(sigma)] += h.noise + pseudo.var_t
    return sigma


def _factor(h: GpHyper, pseudo: PseudoSet) -> CholeskyFactor:
    return cholesky(assemble_sigma_u(h, pseudo))


def student_unlabeled_nll(h: GpHyper, pseudo: PseudoSet) -> float:
    chol = _factor(h, pseudo)
    beta = solve_psd(chol, pseudo.y_hat)
    m = len(pseudo)
    return 0.5 * (float(pseudo.y_hat @ beta) + chol.logdet() + m * LOG_2PI)


def student_nll_grad(h: GpHyper, pseudo: PseudoSet):
    """NLL and its gradient in (log outputscale, log lengthscale, log noise)."""
    k = kernel_matrix(h, pseudo.z_u, pseudo.z_u)
    sigma = k.copy()
    sigma[np.diag_indices_from(sigma)] += h.noise + pseudo.var_t
    chol = cholesky(sigma)
    beta = solve_psd(chol, pseudo.y_hat)
    m = len(pseudo)
    nll = 0.5 * (float(pseudo.y_hat @ beta) + chol.logdet() + m * LOG_2PI)
    w = inverse_from_cholesky(chol) - np.outer(beta, beta)
    d2 = sq_dists(pseudo.z_u, pseudo.z_u)
    grad = np.array([
        0.5 * float(np.sum(w * k)),
        0.5 * float(np.sum(w * k * d2)) / h.lengthscale**2,
        0.5 * float(np.trace(w)) * h.noise,
    ])
    return nll, grad


def student_fit_step(h: GpHyper, pseudo: PseudoSet, lr: float, opt: Adam | None = None) -> GpHyper:
    """One Adam step on the unlabeled NLL; teacher variances are held constant."""
    _, grad = student_nll_grad(h, pseudo)
    return apply_student_grad(h, grad, lr, opt)


def apply_student_grad(h: GpHyper, grad, lr: float, opt: Adam | None = None) -> GpHyper:
    if opt is None:
        opt = Adam([(3,)])
    theta = np.array([h.log_outputscale, h.log_lengthscale, h.log_noise])
    (theta,) = opt.step([theta], [grad], lr)
    return replace(h, log_outputscale=theta[0], log_lengthscale=theta[1], log_noise=theta[2]).clamped()


def feedback_posterior_mean(h: GpHyper, pseudo: PseudoSet, z_val) -> np.ndarray:
    chol = _factor(h, pseudo)
    k_vu = kernel_matrix(h, z_val, pseudo.z_u)
    return k_vu @ solve_psd(chol, pseudo.y_hat)


def feedback_loss(h: GpHyper, pseudo: PseudoSet, val: LabeledSet) -> float:
    r = feedback_posterior_mean(h, pseudo, val.z) - val.y
    return float(np.mean(r * r))


def _rbf_input_grad(weighted_k: np.ndarray, x: np.ndarray, other: np.ndarray, ell2: float) -> np.ndarray:
    """Gradient w.r.t. rows of ``x`` of sum(C * K(x, other)), given C * K."""
    return (weighted_k @ other - weighted_k.sum(axis=1)[:, None] * x) / ell2


def feedback_backward(h: GpHyper, pseudo: PseudoSet, val: LabeledSet):
    """Exact gradients of the feedback loss; the loss value rides along."""
    zu, zv = pseudo.z_u, val.z
    k_uu = kernel_matrix(h, zu, zu)
    sigma = k_uu.copy()
    sigma[np.diag_indices_from(sigma)] += h.noise + pseudo.var_t
    chol = cholesky(sigma)
    k_vu = kernel_matrix(h, zv, zu)
    beta = solve_psd(chol, pseudo.y_hat)
    resid = k_vu @ beta - val.y
    n_val = resid.shape[0]
    loss = float(np.mean(resid * resid))
    g = 2.0 * resid / n_val

    w = solve_psd(chol, k_vu.T @ g)  # dL/d y_hat
    # dL/dSigma = -w beta^T
    d_vart = -w * beta
    ell2 = h.lengthscale**2
    a_vu = np.outer(g, beta) * k_vu
    d_zu = _rbf_input_grad(a_vu.T, zu, zv, ell2)
    g_sigma = -np.outer(w, beta)
    a_uu = (g_sigma + g_sigma.T) * k_uu
    d_zu = d_zu + _rbf_input_grad(a_uu, zu, zu, ell2)

    d_hyper = np.array([
        float(np.sum(a_vu)) + float(np.sum(g_sigma * k_uu)),
        (float(np.sum(a_vu * sq_dists(zv, zu))) + float(np.sum(g_sigma * k_uu * sq_dists(zu, zu)))) / ell2,
        float(np.trace(g_sigma)) * h.noise,
    ])
    return FeedbackGrads(w, d_vart, d_zu, d_hyper, loss)


def influence_weights(h: GpHyper, pseudo: PseudoSet, z_val) -> np.ndarray:
    """Per-pseudo-point weights of the posterior mean, shape (N_val, M).

    Row j holds Sigma_u^{-1} k(z_u, z_val_j); the posterior mean at z_val_j is
    that row dotted with the pseudo labels.
    """
    chol = _factor(h, pseudo)
    k_vu = kernel_matrix(h, z_val, pseudo.z_u)
    return solve_psd(chol, k_vu.T).T
