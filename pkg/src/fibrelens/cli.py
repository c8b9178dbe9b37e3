"""Command line: simulate, gen-random, transmit, train, reconstruct, evaluate, decorrelate.

Every command writes ``run_manifest.json`` into its ``--out`` directory before
starting work; ``fibrelens replay MANIFEST`` runs the same command again.
Exit codes: 0 ok, 2 usage, 3 I/O, 4 file format or dimensions, 5 numeric.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .dataset import (
    crop_speckle,
    load_frame,
    load_image,
    natural_pattern,
    random_pattern,
    read_manifest,
    read_spkl,
    save_png,
    write_manifest,
    write_spkl,
)
from .errors import DimensionError, FormatError
from .fibresim import FibreConfig, batch_transmit, generate_fibre
from .inversion import InverseModel, TrainConfig
from .metrics import MetricParams
from .pipeline import decorrelation_series, drift_frames, evaluate, reconstruct, reconstruct_rgb, train

log = logging.getLogger("fibrelens")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4, 5
MANIFEST_NAME = "run_manifest.json"
SEED_ENV = "FIBRELENS_SEED"


class UsageError(Exception):
    pass


def _number(kind, lo=None, strict=False):
    def convert(text):
        try:
            value = kind(text)
        except (TypeError, ValueError):
            raise argparse.ArgumentTypeError(f"not a valid {kind.__name__}: {text!r}")
        if kind is float and not math.isfinite(value):
            raise argparse.ArgumentTypeError(f"not a finite number: {text!r}")
        if lo is not None and (value <= lo if strict else value < lo):
            raise argparse.ArgumentTypeError(f"must be {'>' if strict else '>='} {lo}: {text!r}")
        return value

    return convert


pos_int = _number(int, 0, strict=True)
nonneg_int = _number(int, 0)
pos_float = _number(float, 0.0, strict=True)
nonneg_float = _number(float, 0.0)
any_int = _number(int)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_required=True) -> None:
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--config", type=Path, help="key = value file; explicit flags win")
    p.add_argument("--seed", type=any_int, help=f"RNG seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--threads", type=pos_int, default=1, help="BLAS threads; 1 = strict deterministic")
    p.add_argument("-v", "--verbose", action="store_true")


def _fibre_flags(p: argparse.ArgumentParser) -> None:
    d = FibreConfig()
    p.add_argument("--input-pixels", type=pos_int, default=d.input_pixels)
    p.add_argument("--output-pixels", type=pos_int, default=d.output_pixels)
    p.add_argument("--mode-count", type=pos_int, default=d.mode_count)
    p.add_argument("--noise-floor", type=nonneg_float, default=d.noise_floor)
    p.add_argument("--quant-levels", type=_number(int, 2), default=d.quant_levels)


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--lambda", dest="lam", type=nonneg_float, default=d.lam)
    p.add_argument("--lr", type=pos_float, default=d.lr)
    p.add_argument("--batch-size", type=pos_int, default=d.batch_size)
    p.add_argument("--epochs", "--max-epochs", dest="max_epochs", type=nonneg_int, default=d.max_epochs)
    p.add_argument("--init-bound", type=pos_float, default=d.init_bound)
    p.add_argument("--plateau-factor", type=pos_float, default=d.plateau_factor)
    p.add_argument("--plateau-patience", type=pos_int, default=d.plateau_patience)
    p.add_argument("--plateau-threshold", type=nonneg_float, default=d.plateau_threshold)
    p.add_argument("--min-lr", type=pos_float, default=None, help="default: lr / 1000")
    p.add_argument("--stop-min-delta", type=nonneg_float, default=d.stop_min_delta)
    p.add_argument("--stop-patience", type=pos_int, default=d.stop_patience)
    p.add_argument("--loss-domain", choices=("amplitude", "intensity"), default=d.loss_domain)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fibrelens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fibrelens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic fibre transmission matrix")
    _common(p)
    _fibre_flags(p)

    p = sub.add_parser("gen-random", help="write random gray patterns as PNG + manifest")
    _common(p)
    p.add_argument("--side", type=pos_int, default=28)
    p.add_argument("--count", type=nonneg_int, default=50000)

    p = sub.add_parser("transmit", help="send images through a simulated fibre into an SPKL file")
    _common(p)
    p.add_argument("--fibre", type=Path, required=True, help="fibre .mmfw written by simulate")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", type=Path, help="image manifest (one PNG path per line)")
    src.add_argument("--random-count", type=nonneg_int, help="generate this many random patterns")
    src.add_argument("--natural-count", type=nonneg_int, help="generate smooth natural-like test scenes")
    p.add_argument("--crop-dim", type=pos_int, help="speckle side kept (default: fibre output side)")
    p.add_argument("--noise-floor", type=nonneg_float)
    p.add_argument("--quant-levels", type=_number(int, 2))

    p = sub.add_parser("train", help="learn the inverse matrix from an SPKL file")
    _common(p)
    p.add_argument("--pairs", type=Path, required=True)
    _train_flags(p)
    p.add_argument("--val-fraction", type=_number(float, 0.0), default=0.1)
    p.add_argument("--keep-checkpoints", type=pos_int, help="retain only the newest N per-epoch checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")

    p = sub.add_parser("reconstruct", help="turn speckles into images")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pairs", type=Path, help="SPKL file; every record is reconstructed")
    src.add_argument("--speckle", type=Path, help="speckle frame PNG")
    src.add_argument("--rgb", type=Path, nargs=3, metavar=("R", "G", "B"), help="three channel speckle PNGs")

    p = sub.add_parser("evaluate", help="SSIM / PCC / MSE report for an SPKL test set")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--pairs", type=Path, required=True)
    p.add_argument("--k1", type=pos_float, default=0.01)
    p.add_argument("--k2", type=pos_float, default=0.03)
    p.add_argument("--dynamic-range", type=pos_float, default=1.0)

    p = sub.add_parser("decorrelate", help="SSIM of speckle frames against the first frame")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--frames", type=Path, help="manifest of speckle frame PNGs, in time order")
    src.add_argument("--simulate", action="store_true", help="use a simulated slowly drifting fibre")
    _fibre_flags(p)
    p.add_argument("--steps", type=_number(int, 2), default=10)
    p.add_argument("--k1", type=pos_float, default=0.01)
    p.add_argument("--k2", type=pos_float, default=0.03)
    p.add_argument("--dynamic-range", type=pos_float, default=1.0)

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, help="override the recorded output directory")
    return parser


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    strict: bool = True
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


_INPUT_KEYS = {"fibre", "images", "pairs", "checkpoint", "speckle", "rgb", "frames", "config"}
_NON_CONFIG = {"command", "verbose", "out", "threads", "seed"}


def _read_config(path: Path) -> dict:
    values = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(parser, argv, ns) -> argparse.Namespace:
    sub = _subparser(parser, ns.command)
    dests = {a.dest: a for a in sub._actions}
    try:
        values = _read_config(ns.config)
    except OSError as exc:
        raise OSError(f"cannot read config {ns.config}: {exc}") from exc
    # config keys use field names; accept the lambda alias too
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    if "epochs" in values:
        values["max_epochs"] = values.pop("epochs")
    defaults = {}
    for key, value in values.items():
        if key not in dests or key in ("config", "help"):
            raise UsageError(f"{ns.config}: unknown key {key!r}")
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"{ns.config}: {key}: {exc}")
        else:
            defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def resolve_seed(seed) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"${SEED_ENV} is not an integer: {env!r}")


def parse_args(argv) -> RunManifest:
    """Validate ``argv`` and resolve every value into a :class:`RunManifest`."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command == "replay":
        manifest = RunManifest.read(ns.manifest)
        if ns.out is not None:
            manifest.outputs["out"] = str(ns.out)
        return manifest
    if ns.config is not None:
        ns = _apply_config(parser, argv, ns)
    values = {k: _jsonable(v) for k, v in vars(ns).items()}
    seed = resolve_seed(ns.seed)
    if values.get("lam") is not None and values.get("min_lr") is None:
        values["min_lr"] = values["lr"] / 1e3
    config = {k: v for k, v in values.items() if k not in _NON_CONFIG and k not in _INPUT_KEYS}
    inputs = {k: v for k, v in values.items() if k in _INPUT_KEYS and v is not None}
    return RunManifest(
        command=ns.command,
        config=config,
        inputs=inputs,
        outputs={"out": str(ns.out)},
        seed=seed,
        threads=ns.threads,
        strict=ns.threads == 1,
    )


# ---- command implementations -------------------------------------------------


def _fibre_config(cfg: dict, seed: int) -> FibreConfig:
    return FibreConfig(
        input_pixels=cfg["input_pixels"],
        output_pixels=cfg["output_pixels"],
        mode_count=cfg["mode_count"],
        noise_floor=cfg["noise_floor"],
        quant_levels=cfg["quant_levels"],
        rng_seed=seed,
    )


def _cmd_simulate(m: RunManifest, out: Path) -> None:
    fc = _fibre_config(m.config, m.seed)
    T = generate_fibre(fc)
    model = InverseModel(T, fc.output_side, fc.input_side)
    save_checkpoint(model, out / "fibre.mmfw", CheckpointMeta(rng_seed=m.seed))
    (out / "fibre.json").write_text(json.dumps(asdict(fc), indent=2) + "\n", encoding="utf-8")
    print(f"fibre {fc.output_pixels}x{fc.input_pixels}, {fc.mode_count} modes -> {out / 'fibre.mmfw'}")


def _cmd_gen_random(m: RunManifest, out: Path) -> None:
    side, count = m.config["side"], m.config["count"]
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(max(count - 1, 0))))
    paths = []
    for i in range(count):
        path = img_dir / f"{i:0{width}d}.png"
        save_png(random_pattern(side, [m.seed, i]), path)
        paths.append(path)
    write_manifest(paths, out / "manifest.txt")
    print(f"{count} random {side}x{side} patterns -> {out / 'manifest.txt'}")


def _load_fibre(path: Path, seed: int, overrides: dict) -> tuple[np.ndarray, FibreConfig]:
    model, _ = load_checkpoint(path)
    sidecar = path.with_name("fibre.json")
    base = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    base.update(
        input_pixels=model.in_dim**2,
        output_pixels=model.out_dim**2,
        mode_count=base.get("mode_count", min(model.W.shape)),
        rng_seed=seed,
    )
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    return model.W, FibreConfig(**base)


def _cmd_transmit(m: RunManifest, out: Path) -> None:
    cfg = m.config
    T, fc = _load_fibre(
        Path(m.inputs["fibre"]),
        m.seed,
        {"noise_floor": cfg.get("noise_floor"), "quant_levels": cfg.get("quant_levels")},
    )
    side = fc.input_side
    if "images" in m.inputs:
        images = [load_image(p, side) for p in read_manifest(m.inputs["images"])]
    elif cfg.get("random_count") is not None:
        images = [random_pattern(side, [m.seed, i]) for i in range(cfg["random_count"])]
    else:
        images = [natural_pattern(side, [m.seed, i]) for i in range(cfg["natural_count"])]
    crop = cfg.get("crop_dim") or fc.output_side
    if crop > fc.output_side:
        raise DimensionError(f"crop dim {crop} exceeds fibre output side {fc.output_side}")
    pairs = batch_transmit(T, images, fc, crop_dim=crop)
    write_spkl(pairs, out / "pairs.spkl")
    print(f"{len(pairs)} pairs ({crop}x{crop} speckle, {side}x{side} image) -> {out / 'pairs.spkl'}")


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        lam=cfg["lam"],
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        init_bound=cfg["init_bound"],
        plateau_factor=cfg["plateau_factor"],
        plateau_patience=cfg["plateau_patience"],
        plateau_threshold=cfg["plateau_threshold"],
        min_lr=cfg["min_lr"],
        stop_min_delta=cfg["stop_min_delta"],
        stop_patience=cfg["stop_patience"],
        rng_seed=seed,
        loss_domain=cfg["loss_domain"],
    )


def _cmd_train(m: RunManifest, out: Path) -> None:
    cfg = m.config
    tc = _train_config(cfg, m.seed)
    pairs = read_spkl(m.inputs["pairs"])
    n = len(pairs)
    n_val = int(round(n * cfg["val_fraction"])) if n > 1 else 0
    pairs.n_train = n - min(n_val, n - 1) if n else 0
    result = train(
        pairs,
        tc,
        checkpoint_dir=out / "checkpoints",
        resume=cfg.get("resume", False),
        keep_checkpoints=cfg.get("keep_checkpoints"),
    )
    final_lr = result.history[-1].lr if result.history else tc.lr
    meta = CheckpointMeta(lam=tc.lam, lr=final_lr, epoch=len(result.history), rng_seed=m.seed)
    save_checkpoint(result.model, out / "model.mmfw", meta)
    lines = ["epoch,train_loss,val_loss,val_mse,lr"]
    for h in result.history:
        lines.append(f"{h.epoch},{h.train_loss:.9g},{h.val_loss:.9g},{h.val_mse:.9g},{h.lr:.9g}")
    (out / "history.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    last = result.history[-1] if result.history else None
    summary = f"loss {last.train_loss:.6g}, val_mse {last.val_mse:.6g}" if last else "no epochs run"
    print(f"{len(result.history)} epochs ({summary}) -> {out / 'model.mmfw'}")


def _speckle_from_png(path, model: InverseModel):
    frame = load_frame(path)
    side = min(frame.shape)
    if side < model.in_dim:
        raise DimensionError(
            f"{path}: {frame.shape[0]}x{frame.shape[1]} frame is smaller than the "
            f"checkpoint's {model.in_dim}x{model.in_dim} speckle input"
        )
    return crop_speckle(frame, model.in_dim, tag=str(path))


def _cmd_reconstruct(m: RunManifest, out: Path) -> None:
    model, _ = load_checkpoint(m.inputs["checkpoint"])
    if "pairs" in m.inputs:
        pairs = read_spkl(m.inputs["pairs"])
        if pairs.speckles.shape[1] != model.W.shape[1]:
            raise DimensionError(
                f"checkpoint expects {model.in_dim}x{model.in_dim} speckles, "
                f"{m.inputs['pairs']} holds {pairs.speckles.shape[1]} values per record"
            )
        for i in range(len(pairs)):
            save_png(reconstruct(model, pairs.speckles[i]), out / f"recon_{i:05d}.png")
        print(f"{len(pairs)} reconstructions -> {out}")
    elif "rgb" in m.inputs:
        recs = [_speckle_from_png(p, model) for p in m.inputs["rgb"]]
        save_png(reconstruct_rgb(model, *recs), out / "recon_rgb.png")
        print(f"RGB reconstruction -> {out / 'recon_rgb.png'}")
    else:
        rec = _speckle_from_png(m.inputs["speckle"], model)
        save_png(reconstruct(model, rec), out / "recon.png")
        print(f"reconstruction -> {out / 'recon.png'}")


def _metric_params(cfg: dict) -> MetricParams:
    return MetricParams(K1=cfg["k1"], K2=cfg["k2"], L=cfg["dynamic_range"])


def _cmd_evaluate(m: RunManifest, out: Path) -> None:
    model, _ = load_checkpoint(m.inputs["checkpoint"])
    pairs = read_spkl(m.inputs["pairs"])
    report = evaluate(model, pairs, _metric_params(m.config))
    report.write_csv(out / "report.csv")
    print(
        f"mean SSIM {report.mean_ssim:.4f}  mean PCC {report.mean_pcc:.4f}  "
        f"mean MSE {report.mean_mse:.4g}  ({report.n_undefined} excluded) -> {out / 'report.csv'}"
    )


def _cmd_decorrelate(m: RunManifest, out: Path) -> None:
    cfg = m.config
    if "frames" in m.inputs:
        frames = [load_frame(p) for p in read_manifest(m.inputs["frames"])]
    else:
        fc = _fibre_config(cfg, m.seed)
        image = natural_pattern(fc.input_side, [m.seed, 0])
        frames = drift_frames(fc, image, cfg["steps"])
    series = decorrelation_series(frames, _metric_params(cfg))
    lines = ["index,ssim"] + [f"{i},{s:.9g}" for i, s in series]
    (out / "decorrelation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{len(series)} frames, final SSIM {series[-1][1]:.4f} -> {out / 'decorrelation.csv'}")


COMMANDS = {
    "simulate": _cmd_simulate,
    "gen-random": _cmd_gen_random,
    "transmit": _cmd_transmit,
    "train": _cmd_train,
    "reconstruct": _cmd_reconstruct,
    "evaluate": _cmd_evaluate,
    "decorrelate": _cmd_decorrelate,
}


@contextlib.contextmanager
def _thread_limit(n: int):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run(manifest: RunManifest) -> int:
    out = Path(manifest.outputs["out"])
    manifest.write(out)
    with _thread_limit(manifest.threads):
        COMMANDS[manifest.command](manifest, out)
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(
        level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(parse_args(argv))
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DimensionError as exc:
        print(f"fibrelens: dimension error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FormatError as exc:
        print(f"fibrelens: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"fibrelens: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ArithmeticError as exc:
        print(f"fibrelens: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fibrelens: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
