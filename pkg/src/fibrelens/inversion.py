"""The learned inverse: one dense complex matrix from speckle to image amplitudes.

For a batch of speckle amplitude vectors ``X`` (B x n_in, real, zero phase)
the model output is ``|W x|`` per sample.  Training minimises

    zeta = mean_{batch, pixels} (|W x|_i - t_i)**2 + lam * sum |w_ij|**2

with plain mini-batch SGD.  Real and imaginary parts of ``W`` are treated as
independent real parameters; the gradient is assembled as the complex
matrix ``dzeta/dRe(W) + 1j * dzeta/dIm(W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

EPS = 1e-12
LOSS_DOMAINS = ("amplitude", "intensity")


@dataclass
class TrainConfig:
    lam: float = 0.03
    lr: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 850
    init_bound: float = 0.002
    plateau_factor: float = 0.1
    plateau_patience: int = 2
    plateau_threshold: float = 1e-4
    min_lr: float | None = None
    stop_min_delta: float = 1e-4
    stop_patience: int = 8
    rng_seed: int = 0
    loss_domain: str = "amplitude"

    def __post_init__(self):
        if self.min_lr is None:
            self.min_lr = self.lr / 1e3
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        for name in ("lr", "init_bound", "plateau_factor", "min_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.plateau_threshold < 0 or self.stop_min_delta < 0:
            raise ValueError("improvement thresholds must be >= 0")
        if self.batch_size < 1 or self.plateau_patience < 1 or self.stop_patience < 1:
            raise ValueError("batch_size and patience values must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.loss_domain not in LOSS_DOMAINS:
            raise ValueError(f"loss_domain must be one of {LOSS_DOMAINS}")


@dataclass
class InverseModel:
    """Complex matrix ``W`` of shape ``(out_dim**2, in_dim**2)``.

    The side lengths may be omitted for matrices that are not image-shaped;
    such models support the algebra but not image reconstruction.
    """

    W: np.ndarray
    out_dim: int | None = None
    in_dim: int | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.complex64)
        if self.W.ndim != 2:
            raise DimensionError(f"W must be 2-D, got shape {self.W.shape}")
        if self.out_dim is None and self.in_dim is None:
            return self._check_finite()
        expected = ((self.out_dim or 0) ** 2, (self.in_dim or 0) ** 2)
        if self.W.shape != expected:
            raise DimensionError(f"W has shape {self.W.shape}, expected {expected}")
        self._check_finite()

    def _check_finite(self) -> None:
        if not np.all(np.isfinite(self.W)):
            raise ValueError("W contains non-finite entries")

    def copy(self) -> "InverseModel":
        return InverseModel(self.W.copy(), self.out_dim, self.in_dim)


@dataclass
class LossReport:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    val_mse: float = float("nan")


def init_model(out_dim: int, in_dim: int, cfg: TrainConfig) -> InverseModel:
    if out_dim < 1 or in_dim < 1:
        raise ValueError("dims must be >= 1")
    rng = np.random.default_rng(cfg.rng_seed)
    shape = (out_dim**2, in_dim**2)
    b = cfg.init_bound
    re = rng.uniform(-b, b, shape).astype(np.float32)
    im = rng.uniform(-b, b, shape).astype(np.float32)
    return InverseModel(re + 1j * im, out_dim, in_dim)


def _as_batch(model: InverseModel, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != model.W.shape[1]:
        raise DimensionError(f"model expects {model.W.shape[1]} speckle values, got {X.shape[1]}")
    return X, single


def field_out(model: InverseModel, X) -> np.ndarray:
    """Complex output field ``W x`` for each row of ``X``, shape (B, n_out)."""
    X, _ = _as_batch(model, X)
    return X @ model.W.astype(np.complex128).T


def forward(model: InverseModel, x) -> np.ndarray:
    """Output amplitude ``|W x|``; accepts one vector or a (B, n_in) batch."""
    X, single = _as_batch(model, x)
    a = np.abs(X @ model.W.astype(np.complex128).T)
    return a[0] if single else a


def _check_targets(model: InverseModel, X, T) -> tuple[np.ndarray, np.ndarray]:
    X, _ = _as_batch(model, X)
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[None, :]
    if len(X) == 0:
        raise ValueError("empty batch")
    if T.shape != (len(X), model.W.shape[0]):
        raise DimensionError(f"targets have shape {T.shape}, expected {(len(X), model.W.shape[0])}")
    return X, T


def regularizer(model: InverseModel, lam: float) -> float:
    w = model.W.astype(np.complex128)
    return lam * float(np.sum(w.real**2 + w.imag**2))


def data_loss(model: InverseModel, X, T, domain: str = "amplitude") -> float:
    """Mean squared error between ``|W x|`` and the amplitude targets.

    In the intensity domain both sides are squared first.
    """
    X, T = _check_targets(model, X, T)
    a = np.abs(X @ model.W.astype(np.complex128).T)
    if domain == "intensity":
        a, T = a**2, T**2
    return float(np.mean((a - T) ** 2))


def loss(model: InverseModel, X, T, lam: float, domain: str = "amplitude") -> float:
    return data_loss(model, X, T, domain) + regularizer(model, lam)


def _data_grad(Wr, Wi, X, T, domain):
    """Data term of zeta and its gradient w.r.t. Re(W), Im(W), all float64.

    ``X`` is real, so each complex product is split into two real matmuls.
    """
    B, P = T.shape
    yr = X @ Wr.T
    yi = X @ Wi.T
    a = np.hypot(yr, yi)
    if domain == "intensity":
        # d(a^2)/dRe(w_ij) = 2 Re(y_i) x_j
        diff = a * a - T * T
        coef = 2.0 * diff
    else:
        diff = a - T
        coef = diff / np.maximum(a, EPS)
    data = float(np.mean(diff * diff))
    yr *= coef
    yi *= coef
    gr = yr.T @ X
    gi = yi.T @ X
    scale = 2.0 / (B * P)
    gr *= scale
    gi *= scale
    return data, gr, gi


def _split(model: InverseModel) -> tuple[np.ndarray, np.ndarray]:
    return model.W.real.astype(np.float64), model.W.imag.astype(np.float64)


def _sq_norm(w: np.ndarray) -> float:
    flat = w.ravel()
    return float(np.dot(flat, flat))


def loss_and_gradient(model: InverseModel, X, T, lam: float, domain: str = "amplitude"):
    """Return ``(zeta, dzeta/dRe(W) + 1j * dzeta/dIm(W))`` from one forward pass."""
    X, T = _check_targets(model, X, T)
    Wr, Wi = _split(model)
    data, gr, gi = _data_grad(Wr, Wi, X, T, domain)
    zeta = data + lam * (_sq_norm(Wr) + _sq_norm(Wi))
    gr += 2.0 * lam * Wr
    gi += 2.0 * lam * Wi
    return zeta, gr + 1j * gi


def gradient(model: InverseModel, X, T, lam: float, domain: str = "amplitude") -> np.ndarray:
    """``dzeta/dRe(W) + 1j * dzeta/dIm(W)`` in complex128."""
    return loss_and_gradient(model, X, T, lam, domain)[1]


def _apply_step(w64: np.ndarray, g: np.ndarray, lr: float) -> None:
    # in place: w -= lr * g, then round to float32 precision
    g *= lr
    w64 -= g
    w64[...] = w64.astype(np.float32)


def sgd_step(model: InverseModel, grad: np.ndarray, lr: float) -> InverseModel:
    """``w <- w - lr * grad`` on real and imaginary parts separately."""
    if grad.shape != model.W.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match W {model.W.shape}")
    Wr, Wi = _split(model)
    _apply_step(Wr, np.array(grad.real, dtype=np.float64), lr)
    _apply_step(Wi, np.array(grad.imag, dtype=np.float64), lr)
    W = np.empty(model.W.shape, np.complex64)
    W.real, W.imag = Wr, Wi
    return InverseModel(W, model.out_dim, model.in_dim)


class Weights:
    """Float64 working copy of a model's weights for the training loop.

    Entries always equal their float32 rounding, so ``model()`` is exact, and
    ``step`` gives the same bits as ``sgd_step(model, gradient(...), lr)``.
    """

    def __init__(self, model: InverseModel):
        self.out_dim, self.in_dim = model.out_dim, model.in_dim
        self.re, self.im = _split(model)

    def step(self, X, T, lam: float, lr: float, domain: str = "amplitude") -> float:
        """One SGD update on batch ``(X, T)``; returns zeta before the update.

        Leaves the weights untouched and returns NaN if anything is non-finite.
        """
        data, gr, gi = _data_grad(self.re, self.im, X, T, domain)
        zeta = data + lam * (_sq_norm(self.re) + _sq_norm(self.im))
        if not (np.isfinite(zeta) and np.isfinite(gr).all() and np.isfinite(gi).all()):
            return float("nan")
        gr += 2.0 * lam * self.re
        gi += 2.0 * lam * self.im
        _apply_step(self.re, gr, lr)
        _apply_step(self.im, gi, lr)
        return zeta

    def model(self) -> InverseModel:
        W = np.empty(self.re.shape, np.complex64)
        W.real, W.imag = self.re, self.im
        return InverseModel(W, self.out_dim, self.in_dim)


@dataclass
class PlateauState:
    """Reduce-on-plateau schedule state; ``lr`` is the current rate."""

    lr: float
    factor: float = 0.1
    patience: int = 2
    threshold: float = 1e-4
    min_lr: float = 1e-8
    best: float = math.inf
    wait: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauState":
        return cls(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.min_lr)


def plateau_update(history, state: PlateauState) -> float:
    """Feed the newest loss in ``history`` to the schedule; return the new rate."""
    current = history[-1]
    if current < state.best - state.threshold:
        state.best = current
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.wait = 0
    return state.lr


@dataclass
class EarlyStopState:
    min_delta: float = 1e-4
    patience: int = 8
    best: float = math.inf
    wait: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "EarlyStopState":
        return cls(cfg.stop_min_delta, cfg.stop_patience)


def early_stop(history, state: EarlyStopState) -> bool:
    """True once ``patience`` epochs in a row failed to beat the best by more than ``min_delta``."""
    current = history[-1]
    if current < state.best - state.min_delta:
        state.best = current
        state.wait = 0
    else:
        state.wait += 1
    return state.wait >= state.patience


__all__ = [
    "TrainConfig",
    "InverseModel",
    "LossReport",
    "PlateauState",
    "EarlyStopState",
    "init_model",
    "forward",
    "field_out",
    "loss",
    "data_loss",
    "regularizer",
    "gradient",
    "loss_and_gradient",
    "sgd_step",
    "Weights",
    "plateau_update",
    "early_stop",
]
