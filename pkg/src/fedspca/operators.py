"""Smoothed absolute value, its matrix penalty, and soft-thresholding."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DEFAULT_MU = 1e-3


@dataclass(frozen=True)
class SmoothingParam:
    mu: float = DEFAULT_MU

    def __post_init__(self):
        if not self.mu > 0:
            raise ValidationError(f"mu must be > 0, got {self.mu}")


def _mu(mu) -> float:
    if isinstance(mu, SmoothingParam):
        return mu.mu
    if not mu > 0:
        raise ValidationError(f"mu must be > 0, got {mu}")
    return float(mu)


def psi(x, mu=DEFAULT_MU):
    """Piecewise smoothing of |x|: quadratic on (-mu/2, mu/2), linear outside.

    Works elementwise on arrays; returns a float for scalar input.
    """
    mu = _mu(mu)
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < mu / 2, x * x / mu + mu / 4, np.abs(x))
    return out[()] if out.ndim == 0 else out


def psi_grad(x, mu=DEFAULT_MU):
    mu = _mu(mu)
    x = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(x) < mu / 2, 2 * x / mu, np.sign(x))
    return out[()] if out.ndim == 0 else out


def smooth_l1(X, mu=DEFAULT_MU) -> float:
    """Sum of ``psi`` over all entries; exceeds ||X||_1 by at most size * mu / 4."""
    mu = _mu(mu)
    a = np.abs(np.asarray(X, dtype=np.float64))
    # psi(x) = |x| + (min(|x|, mu/2) - mu/2)^2 / mu
    m = np.minimum(a, 0.5 * mu) - 0.5 * mu
    return float(a.sum() + (m * m).sum() / mu)


def smooth_l1_grad(X, mu=DEFAULT_MU) -> np.ndarray:
    # psi'(x) = clip(2x / mu, -1, 1)
    mu = _mu(mu)
    return np.clip(np.asarray(X, dtype=np.float64) * (2.0 / mu), -1.0, 1.0)


def soft_threshold(V, t):
    """Prox of t * ||.||_1: max(|v| - t, 0) * sign(v), entrywise."""
    if not t >= 0:
        raise ValidationError(f"threshold must be >= 0, got {t}")
    V = np.asarray(V, dtype=np.float64)
    return np.sign(V) * np.maximum(np.abs(V) - t, 0.0)
