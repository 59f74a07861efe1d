"""MLP teacher with a mean head and a variance head, trained by Gaussian NLL.

Forward and backward passes are written out by hand so that gradients with
respect to the inputs are available to the unlabeled-data sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from tsbo.errors import NonFinite
from tsbo.gp import LabeledSet
from tsbo.numerics import Adam

VAR_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TeacherNet:
    """Layer widths plus one flat parameter vector.

    Layer ``i`` owns a ``(sizes[i], sizes[i+1])`` weight block followed by its
    bias; ``weights`` and ``biases`` are views into ``flat``.
    """

    sizes: tuple
    flat: np.ndarray

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=float)
        if flat.shape != (n_params(self.sizes),):
            raise ValueError(f"expected {n_params(self.sizes)} parameters, got {flat.shape}")
        object.__setattr__(self, "flat", flat)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def hidden_layers(self) -> int:
        return len(self.sizes) - 2

    @property
    def weights(self) -> list:
        return [w for w, _ in _layers(self.sizes, self.flat)]

    @property
    def biases(self) -> list:
        return [b for _, b in _layers(self.sizes, self.flat)]

    @classmethod
    def from_layers(cls, weights, biases) -> "TeacherNet":
        sizes = (weights[0].shape[0],) + tuple(w.shape[1] for w in weights)
        flat = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(weights, biases)])
        return cls(sizes, flat)


def n_params(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _layers(sizes, flat):
    out, pos = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = flat[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out.append((w, flat[pos:pos + b]))
        pos += b
    return out


@dataclass(frozen=True)
class TeacherPrediction:
    mean: np.ndarray
    variance: np.ndarray


def init_teacher(in_dim: int, rng: np.random.Generator, hidden: int = 64, n_hidden: int = 5) -> TeacherNet:
    """He-uniform weights, zero biases."""
    sizes = [in_dim] + [hidden] * n_hidden + [2]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    # keep the initial output heads small
    weights[-1] = weights[-1] * 0.1
    return TeacherNet.from_layers(weights, biases)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward_activations(net: TeacherNet, z):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != net.in_dim:
        raise ValueError(f"input width {z.shape[1]} != teacher width {net.in_dim}")
    acts = [z]
    h = z
    layers = _layers(net.sizes, net.flat)
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def prediction_from_acts(acts) -> TeacherPrediction:
    out = acts[-1]
    if not np.all(np.isfinite(out)):
        raise NonFinite("teacher produced non-finite outputs")
    return TeacherPrediction(out[:, 0].copy(), softplus(out[:, 1]) + VAR_FLOOR)


def teacher_forward(net: TeacherNet, z) -> TeacherPrediction:
    return prediction_from_acts(forward_activations(net, z))


def teacher_mean(net: TeacherNet, z) -> np.ndarray:
    return forward_activations(net, z)[-1][:, 0]


def gaussian_nll_terms(mean, var, y):
    r = y - mean
    return 0.5 * (LOG_2PI + np.log(var) + r * r / var)


def teacher_labeled_loss(net: TeacherNet, data: LabeledSet) -> float:
    if len(data) == 0:
        raise ValueError("empty batch")
    pred = teacher_forward(net, data.z)
    return float(np.mean(gaussian_nll_terms(pred.mean, pred.variance, data.y)))


def labeled_loss_upstream(net: TeacherNet, data: LabeledSet, pred: TeacherPrediction | None = None):
    """Loss plus its gradient with respect to the predicted mean and variance."""
    if pred is None:
        pred = teacher_forward(net, data.z)
    n = len(data)
    r = data.y - pred.mean
    var = pred.variance
    loss = float(np.mean(gaussian_nll_terms(pred.mean, var, data.y)))
    g_mean = -r / var / n
    g_var = 0.5 * (1.0 / var - r * r / (var * var)) / n
    return loss, g_mean, g_var


def teacher_backward(net: TeacherNet, upstream_mean_grad, upstream_var_grad, z, acts=None):
    """Reverse-mode gradients of <upstream, (mean, variance)>.

    Returns ``(param_grads, input_grads)``; ``param_grads`` is laid out like
    ``net.flat``.  ``acts`` may carry the activations of a previous forward
    pass over the same ``z``.
    """
    if acts is None:
        acts = forward_activations(net, z)
    g_mean = np.asarray(upstream_mean_grad, dtype=float).reshape(-1)
    g_var = np.asarray(upstream_var_grad, dtype=float).reshape(-1)
    n = acts[0].shape[0]
    if g_mean.shape[0] != n or g_var.shape[0] != n:
        raise ValueError("upstream gradients must match the batch size")
    raw = acts[-1][:, 1]
    delta = np.stack([g_mean, g_var * sigmoid(raw)], axis=1)
    grad = np.empty_like(net.flat)
    grad_layers = _layers(net.sizes, grad)
    layers = _layers(net.sizes, net.flat)
    for i in range(len(layers) - 1, -1, -1):
        gw, gb = grad_layers[i]
        np.matmul(acts[i].T, delta, out=gw)
        gb[:] = delta.sum(axis=0)
        delta = delta @ layers[i][0].T
        if i > 0:
            delta = delta * (acts[i] > 0)
    return grad, delta


def teacher_adam_step(net: TeacherNet, grads, lr: float, state: Adam) -> TeacherNet:
    (flat,) = state.step([net.flat], [grads], lr)
    return TeacherNet(net.sizes, flat)


def teacher_optimizer(net: TeacherNet) -> Adam:
    return Adam([net.flat.shape])


def teacher_supervised_step(net: TeacherNet, opt: Adam, data: LabeledSet, lr: float):
    """One Adam step on the labeled NLL; returns the new net and the loss."""
    acts = forward_activations(net, data.z)
    loss, g_mean, g_var = labeled_loss_upstream(net, data, prediction_from_acts(acts))
    grads, _ = teacher_backward(net, g_mean, g_var, data.z, acts)
    return teacher_adam_step(net, grads, lr, opt), loss
