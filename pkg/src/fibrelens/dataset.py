"""Images, speckle records and the SPKL pair container.

Images are plain 2-D float arrays with values in [0, 1] (an "image plane");
RGB images are ``(H, W, 3)`` arrays.  Everything the inverse model consumes
is an amplitude, i.e. the square root of an intensity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptHeaderError, DimensionError, TruncatedError, UnknownVersionError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
GRAY_LEVELS = 100

SPKL_MAGIC = b"SPKL"
SPKL_VERSION = 1
_SPKL_HEADER = struct.Struct("<4sIIII")


def as_plane(values) -> np.ndarray:
    """Validate and return ``values`` as a float64 image plane."""
    plane = np.asarray(values, dtype=np.float64)
    if plane.ndim != 2:
        raise DimensionError(f"image plane must be 2-D, got shape {plane.shape}")
    if plane.size and (plane.min() < 0.0 or plane.max() > 1.0):
        raise ValueError("image plane values must lie in [0, 1]")
    return plane


def area_resize(plane: np.ndarray, side: int) -> np.ndarray:
    """Box-filter resample a 2-D array to ``side x side``.

    Integer downsampling factors are done by exact block averaging; other
    ratios fall back to Pillow's BOX filter on a float image.
    """
    if side <= 0:
        raise ValueError("target side must be positive")
    h, w = plane.shape
    if (h, w) == (side, side):
        return plane.astype(np.float64, copy=True)
    if h % side == 0 and w % side == 0:
        fy, fx = h // side, w // side
        return plane.reshape(side, fy, side, fx).mean(axis=(1, 3))
    img = Image.fromarray(plane.astype(np.float32), mode="F")
    out = img.resize((side, side), resample=Image.Resampling.BOX)
    return np.asarray(out, dtype=np.float64)


def _decode(path: Path) -> np.ndarray:
    """Return pixel data scaled to [0, 1], shape (H, W) or (H, W, 3)."""
    with Image.open(path) as img:
        img.load()
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        elif img.mode == "L":
            arr = np.asarray(img, dtype=np.float64) / 255.0
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_image(path, target_side: int, mode: str = "grayscale") -> np.ndarray:
    """Read a PNG and return a ``target_side``-square plane (or RGB array).

    Colour is mapped to gray with BT.601 luma weights.
    """
    if target_side <= 0:
        raise ValueError("target_side must be positive")
    if mode not in ("grayscale", "rgb"):
        raise ValueError(f"unknown mode {mode!r}")
    path = Path(path)
    try:
        arr = _decode(path)
    except OSError:
        raise
    except Exception as exc:  # Pillow raises assorted decoder errors
        raise OSError(f"cannot decode image {path}: {exc}") from exc

    if mode == "grayscale":
        if arr.ndim == 3:
            arr = arr @ np.asarray(LUMA_WEIGHTS)
        return np.clip(area_resize(arr, target_side), 0.0, 1.0)

    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    channels = [np.clip(area_resize(arr[:, :, c], target_side), 0.0, 1.0) for c in range(3)]
    return merge_rgb(*channels)


def load_frame(path) -> np.ndarray:
    """Read a speckle frame at native resolution as a gray intensity image."""
    path = Path(path)
    try:
        arr = _decode(path)
    except OSError:
        raise
    except Exception as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return arr @ np.asarray(LUMA_WEIGHTS) if arr.ndim == 3 else arr


def save_png(plane: np.ndarray, path) -> None:
    """Write a plane or RGB array as 8-bit PNG, value = round(v * 255)."""
    arr = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB" if data.ndim == 3 else "L").save(path, format="PNG")


def intensity_to_amplitude(plane: np.ndarray) -> np.ndarray:
    """Element-wise square root, flattened row-major."""
    return np.sqrt(np.asarray(plane, dtype=np.float64)).ravel()


def split_rgb(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"RGB image must have shape (H, W, 3), got {img.shape}")
    return img[:, :, 0].copy(), img[:, :, 1].copy(), img[:, :, 2].copy()


def merge_rgb(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    r, g, b = np.asarray(r), np.asarray(g), np.asarray(b)
    if not (r.shape == g.shape == b.shape) or r.ndim != 2:
        raise DimensionError(f"channel shapes differ: {r.shape}, {g.shape}, {b.shape}")
    return np.stack([r, g, b], axis=2)


def quantize(values: np.ndarray, levels: int) -> np.ndarray:
    """Snap [0, 1] values to ``levels`` uniform levels, rounding half away from zero."""
    steps = levels - 1
    return np.floor(np.asarray(values, dtype=np.float64) * steps + 0.5) / steps


def random_pattern(side: int, rng_seed) -> np.ndarray:
    """Uniform random image on the 100-level gray grid {0, 1/99, ..., 1}."""
    if side < 1:
        raise ValueError("side must be >= 1")
    rng = np.random.default_rng(rng_seed)
    levels = rng.integers(0, GRAY_LEVELS, size=(side, side))
    return levels / (GRAY_LEVELS - 1)


def natural_pattern(side: int, rng_seed, exponent: float = 2.0) -> np.ndarray:
    """Smooth random test image with a power-law spectrum, on the gray grid.

    Amplitude falls off as ``1 / f**exponent``; natural photographs sit near
    ``exponent = 1``, larger values give blobbier scenes.
    """
    if side < 1:
        raise ValueError("side must be >= 1")
    rng = np.random.default_rng(rng_seed)
    fy = np.fft.fftfreq(side)[:, None]
    fx = np.fft.fftfreq(side)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = np.inf
    spectrum = (rng.normal(size=(side, side)) + 1j * rng.normal(size=(side, side))) / f**exponent
    img = np.real(np.fft.ifft2(spectrum))
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return quantize(img, GRAY_LEVELS)


@dataclass
class SpeckleRecord:
    amplitudes: np.ndarray
    source_dim: int
    crop_dim: int
    tag: str = ""

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64).ravel()
        if self.amplitudes.size != self.crop_dim**2:
            raise DimensionError(
                f"{self.amplitudes.size} amplitudes do not fill a {self.crop_dim}x{self.crop_dim} crop"
            )
        if np.any(self.amplitudes < 0):
            raise ValueError("speckle amplitudes must be nonnegative")


def center_crop_downsample(raw: np.ndarray, crop_dim: int) -> np.ndarray:
    """Central square crop of side ``f * crop_dim`` averaged down by ``f``.

    ``f`` is the largest integer with ``f * crop_dim`` no larger than the
    short side of ``raw``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise DimensionError(f"speckle frame must be 2-D, got shape {raw.shape}")
    side = min(raw.shape)
    if crop_dim < 1 or crop_dim > side:
        raise ValueError(f"crop_dim {crop_dim} must be in [1, {side}]")
    f = side // crop_dim
    span = f * crop_dim
    y0 = (raw.shape[0] - span) // 2
    x0 = (raw.shape[1] - span) // 2
    window = raw[y0 : y0 + span, x0 : x0 + span]
    if f == 1:
        return window.copy()
    return window.reshape(crop_dim, f, crop_dim, f).mean(axis=(1, 3))


def crop_speckle(raw: np.ndarray, crop_dim: int, tag: str = "") -> SpeckleRecord:
    reduced = np.clip(center_crop_downsample(raw, crop_dim), 0.0, None)
    return SpeckleRecord(
        amplitudes=intensity_to_amplitude(reduced),
        source_dim=min(np.shape(raw)),
        crop_dim=crop_dim,
        tag=tag,
    )


def default_split(n: int) -> int:
    """Training-set size for ``n`` records under a 45,000/5,000 proportion."""
    if n < 2:
        return n
    n_val = max(1, int(round(n * 0.1)))
    return n - n_val


@dataclass
class PairSet:
    """Ordered speckle/image pairs.

    ``speckles`` holds amplitudes, shape ``(N, S)``; ``images`` holds
    intensities, shape ``(N, side, side)``.  The first ``n_train`` records
    form the training partition, the rest the validation partition.
    """

    speckles: np.ndarray
    images: np.ndarray
    n_train: int | None = None
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.speckles = np.asarray(self.speckles, dtype=np.float32)
        self.images = np.asarray(self.images, dtype=np.float32)
        n = len(self.speckles)
        if n == 0:
            if self.speckles.ndim != 2:
                self.speckles = self.speckles.reshape(0, 0)
            if self.images.ndim != 3:
                self.images = self.images.reshape(0, 0, 0)
        elif self.speckles.ndim != 2:
            self.speckles = self.speckles.reshape(n, -1)
        if self.images.ndim == 2:
            side = math.isqrt(self.images.shape[1]) if n else 0
            if side * side != self.images.shape[1]:
                raise DimensionError("image length is not a perfect square")
            self.images = self.images.reshape(n, side, side)
        if len(self.images) != n:
            raise DimensionError(f"{n} speckles but {len(self.images)} images")
        if self.n_train is None:
            self.n_train = default_split(n)
        if not 0 <= self.n_train <= n:
            raise ValueError("n_train outside [0, N]")

    def __len__(self) -> int:
        return len(self.speckles)

    def __getitem__(self, i: int) -> tuple[SpeckleRecord, np.ndarray]:
        crop = self.speckle_side
        tag = self.tags[i] if i < len(self.tags) else ""
        rec = SpeckleRecord(self.speckles[i], source_dim=crop, crop_dim=crop, tag=tag)
        return rec, self.images[i].astype(np.float64)

    @property
    def split(self) -> tuple[int, int]:
        return self.n_train, len(self) - self.n_train

    @property
    def speckle_side(self) -> int:
        return math.isqrt(self.speckles.shape[1])

    @property
    def image_side(self) -> int:
        return self.images.shape[1]

    def image_amplitudes(self) -> np.ndarray:
        return np.sqrt(self.images.reshape(len(self), -1).astype(np.float64))


def write_spkl(pairs: PairSet, path) -> None:
    n = len(pairs)
    s_len = pairs.speckles.shape[1]
    i_len = pairs.images.shape[1] * pairs.images.shape[2]
    speck = pairs.speckles.astype("<f4", copy=False)
    imgs = pairs.images.reshape(n, i_len).astype("<f4", copy=False)
    body = np.concatenate([speck, imgs], axis=1)
    with open(path, "wb") as fh:
        fh.write(_SPKL_HEADER.pack(SPKL_MAGIC, SPKL_VERSION, n, s_len, i_len))
        fh.write(np.ascontiguousarray(body).tobytes())


def read_spkl(path) -> PairSet:
    data = Path(path).read_bytes()
    if len(data) < _SPKL_HEADER.size:
        if not data.startswith(SPKL_MAGIC[: len(data)]):
            raise CorruptHeaderError(f"{path}: bad magic")
        raise TruncatedError(f"{path}: header truncated ({len(data)} bytes)")
    magic, version, n, s_len, i_len = _SPKL_HEADER.unpack_from(data)
    if magic != SPKL_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != SPKL_VERSION:
        raise UnknownVersionError(f"{path}: unsupported SPKL version {version}")
    side = math.isqrt(i_len)
    if side * side != i_len:
        raise CorruptHeaderError(f"{path}: image length {i_len} is not a square")
    expected = _SPKL_HEADER.size + 4 * n * (s_len + i_len)
    if len(data) < expected:
        raise TruncatedError(f"{path}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise CorruptHeaderError(f"{path}: {len(data) - expected} trailing bytes")
    body = np.frombuffer(data, dtype="<f4", offset=_SPKL_HEADER.size).reshape(n, s_len + i_len)
    return PairSet(
        speckles=body[:, :s_len].astype(np.float32),
        images=body[:, s_len:].reshape(n, side, side).astype(np.float32),
    )


def read_manifest(path) -> list[Path]:
    """Paths listed one per line, relative to the manifest's directory."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    return [path.parent / ln.strip() for ln in lines if ln.strip()]


def write_manifest(paths, manifest_path) -> None:
    manifest_path = Path(manifest_path)
    rel = [Path(p).relative_to(manifest_path.parent).as_posix() for p in paths]
    manifest_path.write_text("".join(r + "\n" for r in rel), encoding="utf-8")
