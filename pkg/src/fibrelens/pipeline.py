"""Training loop, reconstruction, evaluation and the decorrelation study."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import inversion as inv
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .dataset import PairSet, SpeckleRecord, merge_rgb
from .errors import DimensionError, NumericError, UndefinedMetricError
from .fibresim import FibreConfig, generate_fibre, measure, propagate, record_rng
from .metrics import MetricParams, mse, pcc, ssim

log = logging.getLogger(__name__)

STATE_FILE = "train_state.json"
_CKPT_RE = re.compile(r"epoch_(\d+)\.mmfw$")


def _checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:05d}.mmfw"


def latest_checkpoint(checkpoint_dir) -> Path | None:
    found = []
    for p in Path(checkpoint_dir).glob("epoch_*.mmfw"):
        m = _CKPT_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def _prune(checkpoint_dir: Path, keep: int) -> None:
    files = sorted(checkpoint_dir.glob("epoch_*.mmfw"))
    for p in files[:-keep]:
        p.unlink()


@dataclass
class TrainResult:
    model: inv.InverseModel
    history: list[inv.LossReport]
    stopped_early: bool = False


def train(
    pairs: PairSet,
    cfg: inv.TrainConfig,
    checkpoint_dir=None,
    resume: bool = False,
    keep_checkpoints: int | None = None,
    model: inv.InverseModel | None = None,
) -> TrainResult:
    """Mini-batch SGD over the training partition of ``pairs``.

    A checkpoint is written after every epoch, together with a JSON sidecar
    holding the scheduler state so that ``resume=True`` continues the exact
    trajectory.  Validation records never enter a gradient.
    """
    n_train = pairs.n_train
    if n_train == 0:
        raise ValueError("training partition is empty")
    X = pairs.speckles.astype(np.float64)
    Y = pairs.image_amplitudes()
    out_dim, in_dim = pairs.image_side, pairs.speckle_side
    if in_dim * in_dim != X.shape[1]:
        raise DimensionError(f"speckle length {X.shape[1]} is not a square frame")
    Xtr, Ytr = X[:n_train], Y[:n_train]
    Xval, Yval = X[n_train:], Y[n_train:]

    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    plateau = inv.PlateauState.from_config(cfg)
    stopper = inv.EarlyStopState.from_config(cfg)
    history: list[inv.LossReport] = []
    start_epoch = 0

    if resume and ckdir is not None and latest_checkpoint(ckdir) is not None:
        model, meta = load_checkpoint(latest_checkpoint(ckdir))
        state = json.loads((ckdir / STATE_FILE).read_text(encoding="utf-8"))
        if state["epoch"] != meta.epoch:
            raise ValueError(f"state file is at epoch {state['epoch']}, checkpoint at {meta.epoch}")
        plateau = inv.PlateauState(**state["plateau"])
        stopper = inv.EarlyStopState(**state["early_stop"])
        history = [inv.LossReport(**h) for h in state["history"]]
        start_epoch = meta.epoch
        if state.get("stopped_early"):
            return TrainResult(model, history, True)
    elif model is None:
        model = inv.init_model(out_dim, in_dim, cfg)

    if model.W.shape != (out_dim**2, in_dim**2):
        raise DimensionError(f"model shape {model.W.shape} does not fit pairs {(out_dim**2, in_dim**2)}")

    stopped = False
    losses = [h.train_loss for h in history]
    weights = inv.Weights(model)
    for epoch in range(start_epoch, cfg.max_epochs):
        lr = plateau.lr
        order = np.random.default_rng([cfg.rng_seed, epoch]).permutation(n_train)
        batch_losses = []
        for s in range(0, n_train, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            assert idx.max() < n_train, "validation record reached a gradient"
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                zeta = weights.step(Xtr[idx], Ytr[idx], cfg.lam, lr, cfg.loss_domain)
            if not math.isfinite(zeta):
                raise NumericError(f"non-finite loss or gradient in epoch {epoch + 1}")
            batch_losses.append(zeta)
        model = weights.model()
        train_loss = float(np.mean(batch_losses))
        if len(Xval):
            val_mse = inv.data_loss(model, Xval, Yval, cfg.loss_domain)
            val_loss = val_mse + inv.regularizer(model, cfg.lam)
        else:
            val_mse = val_loss = float("nan")
        history.append(inv.LossReport(epoch + 1, train_loss, val_loss, lr, val_mse))
        losses.append(train_loss)
        log.info("epoch %d loss %.6g val_loss %.6g lr %.3g", epoch + 1, train_loss, val_loss, lr)

        inv.plateau_update(losses, plateau)
        stopped = inv.early_stop(losses, stopper)

        if ckdir is not None:
            meta = CheckpointMeta(lam=cfg.lam, lr=plateau.lr, epoch=epoch + 1, rng_seed=cfg.rng_seed)
            save_checkpoint(model, ckdir / _checkpoint_name(epoch + 1), meta)
            state = {
                "epoch": epoch + 1,
                "plateau": asdict(plateau),
                "early_stop": asdict(stopper),
                "history": [asdict(h) for h in history],
                "stopped_early": stopped,
            }
            (ckdir / STATE_FILE).write_text(json.dumps(state, indent=1), encoding="utf-8")
            if keep_checkpoints:
                _prune(ckdir, keep_checkpoints)
        if stopped:
            log.info("early stop after epoch %d", epoch + 1)
            break
    return TrainResult(model, history, stopped)


def reconstruct(model: inv.InverseModel, x) -> np.ndarray:
    """Intensity image ``|W x|**2``, rescaled by its max only when that exceeds 1."""
    if model.out_dim is None:
        raise DimensionError("model has no image dimensions")
    amps = x.amplitudes if isinstance(x, SpeckleRecord) else np.asarray(x, dtype=np.float64)
    if amps.size != model.W.shape[1]:
        raise DimensionError(
            f"checkpoint expects a {model.in_dim}x{model.in_dim} speckle, got {amps.size} values"
        )
    intensity = inv.forward(model, amps.ravel()) ** 2
    peak = intensity.max()
    if peak > 1.0:
        intensity = intensity / peak
    return np.clip(intensity, 0.0, 1.0).reshape(model.out_dim, model.out_dim)


def reconstruct_rgb(model: inv.InverseModel, xr, xg, xb) -> np.ndarray:
    return merge_rgb(reconstruct(model, xr), reconstruct(model, xg), reconstruct(model, xb))


@dataclass
class EvalReport:
    ssim: list[float]
    pcc: list[float]
    mse: list[float]
    n_undefined: int = 0
    meta: dict = field(default_factory=dict)

    @staticmethod
    def _mean(values) -> float:
        finite = [v for v in values if math.isfinite(v)]
        return float(np.mean(finite)) if finite else float("nan")

    @property
    def mean_ssim(self) -> float:
        return self._mean(self.ssim)

    @property
    def mean_pcc(self) -> float:
        return self._mean(self.pcc)

    @property
    def mean_mse(self) -> float:
        return self._mean(self.mse)

    def to_csv(self) -> str:
        lines = ["index,ssim,pcc,mse"]
        for i, (s, p, m) in enumerate(zip(self.ssim, self.pcc, self.mse)):
            lines.append(f"{i},{s:.9g},{p:.9g},{m:.9g}")
        lines.append(
            f"# mean ssim={self.mean_ssim:.9g} pcc={self.mean_pcc:.9g} "
            f"mse={self.mean_mse:.9g} n={len(self.ssim)} excluded={self.n_undefined}"
        )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _safe(metric, *args) -> float:
    try:
        return metric(*args)
    except UndefinedMetricError:
        return float("nan")


def evaluate(model: inv.InverseModel, pairs: PairSet, p: MetricParams = MetricParams()) -> EvalReport:
    if len(pairs) == 0:
        raise ValueError("nothing to evaluate")
    if pairs.speckles.shape[1] != model.W.shape[1] or pairs.image_side != model.out_dim:
        raise DimensionError(
            f"checkpoint maps {model.in_dim}x{model.in_dim} -> {model.out_dim}x{model.out_dim}, "
            f"pairs hold {pairs.speckle_side}x{pairs.speckle_side} -> {pairs.image_side}x{pairs.image_side}"
        )
    s_list, p_list, m_list = [], [], []
    undefined = 0
    for i in range(len(pairs)):
        rec, truth = pairs[i]
        recon = reconstruct(model, rec)
        vals = (_safe(ssim, recon, truth, p), _safe(pcc, recon, truth), _safe(mse, recon, truth))
        undefined += not all(math.isfinite(v) for v in vals)
        s_list.append(vals[0])
        p_list.append(vals[1])
        m_list.append(vals[2])
    return EvalReport(s_list, p_list, m_list, undefined, {"count": len(pairs)})


def mean_image_baseline(train_images: np.ndarray, test_images: np.ndarray) -> float:
    """Mean PCC of the training-set mean image against each test image."""
    mean_img = np.asarray(train_images, dtype=np.float64).mean(axis=0)
    return float(np.mean([_safe(pcc, mean_img, t) for t in test_images]))


def decorrelation_series(frames, p: MetricParams = MetricParams()) -> list[tuple[int, float]]:
    """SSIM of every frame against the first one."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    ref = frames[0]
    for f in frames[1:]:
        if f.shape != ref.shape:
            raise DimensionError(f"frame shape {f.shape} differs from {ref.shape}")
    return [(0, 1.0)] + [(i, ssim(ref, f, p)) for i, f in enumerate(frames[1:], start=1)]


def drift_frames(cfg: FibreConfig, image: np.ndarray, steps: int = 10) -> list[np.ndarray]:
    """Speckle frames of one image through a slowly drifting fibre.

    The fibre at step ``k`` is ``cos(t) T0 + sin(t) T1`` with ``t`` running
    from 0 to pi/2; ``T1`` is an independent fibre from the next seed.
    Frames go through the camera model, so they are normalised to their peak.
    """
    T0 = generate_fibre(cfg).astype(np.complex128)
    T1 = generate_fibre(FibreConfig(**{**asdict(cfg), "rng_seed": cfg.rng_seed + 1})).astype(np.complex128)
    frames = []
    for k, theta in enumerate(np.linspace(0.0, np.pi / 2, steps)):
        raw = propagate(np.cos(theta) * T0 + np.sin(theta) * T1, image)
        frames.append(measure(raw, cfg, record_rng(cfg, k)))
    return frames
