"""Reconstruction quality: global SSIM, Pearson correlation, MSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UndefinedMetricError


@dataclass(frozen=True)
class MetricParams:
    K1: float = 0.01
    K2: float = 0.03
    L: float = 1.0

    def __post_init__(self):
        if not (self.K1 > 0 and self.K2 > 0 and self.L > 0):
            raise ValueError("K1, K2 and L must be positive")

    @property
    def C1(self) -> float:
        return (self.K1 * self.L) ** 2

    @property
    def C2(self) -> float:
        return (self.K2 * self.L) ** 2


def _pair(X, Y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(X, dtype=np.float64)
    y = np.asarray(Y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x.ravel(), y.ravel()


def ssim(X, Y, p: MetricParams = MetricParams(), literal: bool = False) -> float:
    """Whole-image SSIM with population statistics.

    ``literal=True`` evaluates the variant whose denominator multiplies the
    squared means and the variances instead of adding them; kept only for
    auditing against that printed form.
    """
    x, y = _pair(X, Y)
    if x.size < 2:
        raise ValueError("SSIM needs at least two pixels")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx = np.mean(dx * dx)
    vy = np.mean(dy * dy)
    cov = np.mean(dx * dy)
    num = (2 * mx * my + p.C1) * (2 * cov + p.C2)
    if literal:
        den = (mx * mx * my * my + p.C1) * (vx * vy + p.C2)
    else:
        den = (mx * mx + my * my + p.C1) * (vx + vy + p.C2)
    return float(num / den)


def pcc(X, Y) -> float:
    x, y = _pair(X, Y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("PCC is undefined for a constant image")
    r = np.dot(dx, dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def mse(X, Y) -> float:
    x, y = _pair(X, Y)
    return float(np.mean((x - y) ** 2))
