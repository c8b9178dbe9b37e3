"""A multimode fibre stand-in: a fixed random complex transmission matrix.

The fibre is modelled as ``T = A @ B``.  ``B`` (modes x input pixels) couples
every input pixel into every guided mode with i.i.d. circular complex
Gaussian weights.  ``A`` (output pixels x modes) holds the output-facet
profile of each mode, taken as the lowest spatial frequencies of the output
grid, so the speckle grain shrinks as more modes are excited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import PairSet, as_plane, crop_speckle, quantize
from .errors import DimensionError


@dataclass(frozen=True)
class FibreConfig:
    input_pixels: int = 28 * 28
    output_pixels: int = 40 * 40
    mode_count: int = 256
    noise_floor: float = 0.0
    quant_levels: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode_count < 1:
            raise ValueError("mode_count must be >= 1")
        if self.quant_levels < 2:
            raise ValueError("quant_levels must be >= 2")
        if self.noise_floor < 0:
            raise ValueError("noise_floor must be >= 0")
        for name in ("input_pixels", "output_pixels"):
            n = getattr(self, name)
            if n < 1 or math.isqrt(n) ** 2 != n:
                raise ValueError(f"{name} must be a positive perfect square, got {n}")

    @property
    def input_side(self) -> int:
        return math.isqrt(self.input_pixels)

    @property
    def output_side(self) -> int:
        return math.isqrt(self.output_pixels)


def _circular_gaussian(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    scale = math.sqrt(variance / 2.0)
    return rng.normal(0.0, scale, shape) + 1j * rng.normal(0.0, scale, shape)


def mode_profiles(side: int, mode_count: int) -> np.ndarray:
    """Plane-wave profiles of the ``mode_count`` lowest spatial frequencies.

    Columns have unit norm and are mutually orthogonal while ``mode_count``
    does not exceed ``side**2``; beyond that the frequency list wraps.
    """
    k = np.fft.fftfreq(side, d=1.0 / side)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    ky, kx = ky.ravel(), kx.ravel()
    # lexsort: last key is primary
    order = np.lexsort((kx, ky, kx**2 + ky**2))
    chosen = order[np.arange(mode_count) % order.size]
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    phase = np.outer(yy.ravel(), ky[chosen]) + np.outer(xx.ravel(), kx[chosen])
    return np.exp(2j * np.pi * phase / side) / side


def generate_fibre(cfg: FibreConfig) -> np.ndarray:
    """Transmission matrix of shape ``(output_pixels, input_pixels)``, complex64."""
    rng = np.random.default_rng(cfg.rng_seed)
    coupling = _circular_gaussian(rng, (cfg.mode_count, cfg.input_pixels), 1.0 / cfg.mode_count)
    profiles = mode_profiles(cfg.output_side, cfg.mode_count)
    return (profiles @ coupling).astype(np.complex64)


def propagate(T: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Output speckle intensity ``|T sqrt(image)|**2`` as a square frame."""
    plane = as_plane(image)
    if T.shape[1] != plane.size:
        raise DimensionError(f"fibre expects {T.shape[1]} input pixels, image has {plane.size}")
    side = math.isqrt(T.shape[0])
    if side * side != T.shape[0]:
        raise DimensionError(f"fibre output size {T.shape[0]} is not a square frame")
    field = T.astype(np.complex128) @ np.sqrt(plane.ravel())
    return (np.abs(field) ** 2).reshape(side, side)


def propagate_batch(T: np.ndarray, images: np.ndarray) -> np.ndarray:
    """``propagate`` over a stack of images, shape (N, h, w) -> (N, side, side)."""
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    flat = images.reshape(n, -1)
    if flat.shape[1] != T.shape[1]:
        raise DimensionError(f"fibre expects {T.shape[1]} input pixels, images have {flat.shape[1]}")
    if flat.size and (flat.min() < 0 or flat.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    side = math.isqrt(T.shape[0])
    fields = np.sqrt(flat) @ T.astype(np.complex128).T
    return (np.abs(fields) ** 2).reshape(n, side, side)


def measure(intensity: np.ndarray, cfg: FibreConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Camera model: additive noise, clamp, per-frame max normalisation, quantisation."""
    frame = np.asarray(intensity, dtype=np.float64)
    if np.any(frame < 0):
        raise ValueError("intensity must be nonnegative")
    peak = frame.max() if frame.size else 0.0
    if peak == 0.0:
        return np.zeros_like(frame)
    if cfg.noise_floor > 0:
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        frame = frame + rng.normal(0.0, cfg.noise_floor * peak, frame.shape)
        frame = np.clip(frame, 0.0, None)
        peak = frame.max()
        if peak == 0.0:
            return np.zeros_like(frame)
    return quantize(frame / peak, cfg.quant_levels)


def record_rng(cfg: FibreConfig, index: int) -> np.random.Generator:
    """Noise stream of record ``index``; independent of processing order."""
    return np.random.default_rng(cfg.rng_seed ^ index)


def batch_transmit(T: np.ndarray, images, cfg: FibreConfig, crop_dim: int | None = None, chunk: int = 1024) -> PairSet:
    """Send every image through the fibre and camera, returning amplitude pairs."""
    images = [as_plane(im) for im in images]
    side = cfg.output_side if crop_dim is None else crop_dim
    if not images:
        return PairSet(
            speckles=np.zeros((0, side * side), np.float32),
            images=np.zeros((0, cfg.input_side, cfg.input_side), np.float32),
        )
    stack = np.stack(images)
    if stack.shape[1] * stack.shape[2] != T.shape[1]:
        raise DimensionError(f"fibre expects {T.shape[1]} input pixels, images have {stack[0].size}")
    speckles = np.empty((len(stack), side * side), np.float32)
    for start in range(0, len(stack), chunk):
        frames = propagate_batch(T, stack[start : start + chunk])
        for offset, frame in enumerate(frames):
            idx = start + offset
            measured = measure(frame, cfg, record_rng(cfg, idx))
            speckles[idx] = crop_speckle(measured, side).amplitudes
    return PairSet(speckles=speckles, images=stack)


def autocorrelation_width(frame: np.ndarray) -> float:
    """Speckle grain size: area (pixels) where the normalised intensity
    autocorrelation exceeds 1/2, expressed as an equivalent diameter."""
    f = np.asarray(frame, dtype=np.float64)
    f = f - f.mean()
    power = np.abs(np.fft.fft2(f)) ** 2
    ac = np.real(np.fft.ifft2(power))
    if ac.flat[0] <= 0:
        return 0.0
    ac /= ac.flat[0]
    area = np.count_nonzero(ac > 0.5)
    return 2.0 * math.sqrt(area / math.pi)
