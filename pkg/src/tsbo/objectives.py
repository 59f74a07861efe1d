"""Synthetic objectives posed as maximization over a latent box."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

BRANIN_MIN = 0.397887357729738


@dataclass(frozen=True)
class Objective:
    name: str
    dim: int
    fn: Callable[[np.ndarray], float]
    optimum: float | None = None

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.shape[0] != self.dim:
            raise ValueError(f"{self.name} expects {self.dim} inputs, got {z.shape[0]}")
        return float(self.fn(z))


def sphere(x):
    return float(np.sum(x * x))


def ackley(x):
    return float(
        -20.0 * np.exp(-0.2 * np.sqrt(np.mean(x * x)))
        - np.exp(np.mean(np.cos(2.0 * np.pi * x)))
        + 20.0
        + math.e
    )


def rastrigin(x):
    return float(10.0 * x.shape[0] + np.sum(x * x - 10.0 * np.cos(2.0 * np.pi * x)))


def branin(x1, x2):
    b = 5.1 / (4.0 * math.pi**2)
    c = 5.0 / math.pi
    t = 1.0 / (8.0 * math.pi)
    return (x2 - b * x1**2 + c * x1 - 6.0) ** 2 + 10.0 * (1.0 - t) * math.cos(x1) + 10.0


def embedding(dim: int, seed: int = 0) -> np.ndarray:
    """Fixed ``(dim, 2)`` matrix with orthonormal columns."""
    if dim < 2:
        raise ValueError("branin embedding needs dim >= 2")
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((dim, 2)))
    return q


def make_objective(name: str, dim: int) -> Objective:
    """Objective by name; values are negated costs so larger is better."""
    if name == "sphere":
        return Objective(name, dim, lambda z: -sphere(z), 0.0)
    if name == "ackley":
        return Objective(name, dim, lambda z: -ackley(z), 0.0)
    if name == "rastrigin":
        return Objective(name, dim, lambda z: -rastrigin(z), 0.0)
    if name == "branin":
        q = embedding(dim)

        def fn(z):
            u = z @ q
            # latent [-3, 3]^2 covers Branin's [-5, 10] x [0, 15]
            return -branin(2.5 + 2.5 * u[0], 7.5 + 2.5 * u[1])

        return Objective(name, dim, fn, -BRANIN_MIN)
    raise ValueError(f"unknown objective {name!r}")


OBJECTIVES = ("sphere", "ackley", "rastrigin", "branin")
