"""Command-line front end: ``viptt <command> [options]``.

Commands: preprocess, pretrain, finetune, evaluate, predict, gen-synthetic.

Every option can also come from ``--config FILE``, a UTF-8 file of
``key=value`` lines using the option names with underscores
(``lr_init=0.01``). Command-line flags override the file, unknown keys are
an error, and the fully resolved configuration is logged at the start of
each run. The exit code is 0 exactly when no error was logged.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    AugmentSpec,
    SampleRecord,
    SyntheticSpec,
    class_names,
    class_weights,
    gen_synthetic_dataset,
    load_manifest,
    stratified_split,
    write_manifest,
)
from .errors import ConfigMismatch, VipttError
from .metrics import confusion_matrix, format_report, write_report_csv
from .model import (
    Component,
    ModelConfig,
    TrainConfig,
    build_model,
    load_checkpoint,
    predict_proba,
    replace_head,
    save_checkpoint,
    set_trainable,
    train,
)
from .preprocess import DEFAULT_WINDOW, ResizeSpec, SplineOrder, hu_normalize, rgb_to_gray, siz_resize
from .volume_io import Domain, Volume, load_volume, read_tensor, write_tensor

log = logging.getLogger("viptt")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_window(text) -> tuple[float, float]:
    if isinstance(text, tuple):
        return text
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise ValueError(f"window must be 'lo,hi', got {text!r}")
    lo, hi = float(parts[0]), float(parts[1])
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got {text!r}")
    return lo, hi


def _parse_order(text) -> SplineOrder:
    if isinstance(text, SplineOrder):
        return text
    low = str(text).strip().lower()
    names = {"linear": SplineOrder.LINEAR, "1": SplineOrder.LINEAR, "cubic": SplineOrder.CUBIC, "3": SplineOrder.CUBIC}
    if low not in names:
        raise ValueError(f"order must be linear or cubic, got {text!r}")
    return names[low]


def _parse_clip(text) -> float | None:
    if text is None or str(text).strip().lower() in ("", "none", "off"):
        return None
    value = float(text)
    if not value > 0:
        raise ValueError(f"clip_norm must be positive or 'none', got {text!r}")
    return value


def _parse_counts(text) -> tuple[int, ...]:
    if isinstance(text, tuple):
        return text
    counts = tuple(int(p) for p in str(text).split(","))
    if any(c < 1 for c in counts):
        raise ValueError(f"counts must be positive, got {text!r}")
    return counts


@dataclass(frozen=True)
class Option:
    parse: object
    default: object
    help: str


_TRAIN = TrainConfig()

OPTIONS = {
    "seed": Option(int, 0, "seed for splitting, initialisation, shuffling and augmentation"),
    # training
    "lr_init": Option(float, _TRAIN.lr_init, "initial SGD learning rate"),
    "batch_size": Option(int, _TRAIN.batch_size, "samples per SGD step"),
    "plateau_factor": Option(float, _TRAIN.plateau_factor, "learning-rate multiplier on a plateau"),
    "plateau_patience": Option(int, _TRAIN.plateau_patience, "epochs without improvement before decay"),
    "early_stop_patience": Option(int, _TRAIN.early_stop_patience, "epochs without improvement before stopping"),
    "max_epochs": Option(int, _TRAIN.max_epochs, "upper bound on training epochs"),
    "min_delta": Option(float, _TRAIN.min_delta, "smallest validation-loss drop that counts as improvement"),
    "clip_norm": Option(_parse_clip, None, "clip the global gradient norm to this value (default: no clipping)"),
    "train_fraction": Option(float, 0.8, "per-class share of samples used for training"),
    "class_weights": Option(_parse_bool, False, "weight the loss by balanced inverse class frequency"),
    "augment": Option(_parse_bool, False, "rotate training samples by a random discrete angle"),
    # model
    "classes": Option(int, None, "number of classes (default 10 for pretrain, 5 otherwise)"),
    "feature_extractor": Option(str, "tiny", "tiny or vgg16_shape"),
    "feature_dim": Option(int, 64, "per-frame feature size of the tiny extractor"),
    "lstm_units": Option(int, 256, "LSTM hidden size"),
    "dense_units": Option(int, 1024, "hidden dense layer size"),
    # preprocessing
    "depth": Option(int, 70, "output depth (number of slices)"),
    "size": Option(int, 224, "output height and width"),
    "window": Option(_parse_window, DEFAULT_WINDOW, "Hounsfield window lo,hi"),
    "order": Option(_parse_order, SplineOrder.CUBIC, "spline order for resizing: linear or cubic"),
    # synthetic data
    "counts": Option(_parse_counts, None, "comma-separated samples per class for gen-synthetic"),
    "per_class": Option(int, 10, "samples per class for gen-synthetic when --counts is absent"),
    "direction_offset": Option(float, 0.0, "rotation of the class directions in degrees"),
}

_DEFAULT_CLASSES = {"pretrain": 10}


def read_config_file(path) -> dict[str, object]:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            if key not in OPTIONS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = OPTIONS[key].parse(value.strip())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def resolve_config(args: argparse.Namespace) -> dict[str, object]:
    """Built-in defaults, then the config file, then explicit flags."""
    cfg = {k: opt.default for k, opt in OPTIONS.items()}
    cfg["classes"] = _DEFAULT_CLASSES.get(args.command, 5)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in OPTIONS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _format_value(v) -> str:
    if isinstance(v, SplineOrder):
        return v.name.lower()
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _log_config(command: str, cfg: dict) -> None:
    log.info("command %s", command)
    for key in sorted(cfg):
        log.info("config %s=%s", key, _format_value(cfg[key]))


def _train_config(cfg, **extra) -> TrainConfig:
    return TrainConfig(
        lr_init=cfg["lr_init"],
        batch_size=cfg["batch_size"],
        plateau_factor=cfg["plateau_factor"],
        plateau_patience=cfg["plateau_patience"],
        early_stop_patience=cfg["early_stop_patience"],
        max_epochs=cfg["max_epochs"],
        min_delta=cfg["min_delta"],
        clip_norm=cfg["clip_norm"],
        seed=cfg["seed"],
        **extra,
    )


def _model_config(cfg, input_dims, num_classes) -> ModelConfig:
    return ModelConfig(
        input_dims=tuple(input_dims),
        num_classes=num_classes,
        feature_extractor=cfg["feature_extractor"],
        feature_dim=cfg["feature_dim"],
        lstm_units=cfg["lstm_units"],
        dense_units=cfg["dense_units"],
    )


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def load_any(path) -> Volume:
    """Load a volume, converting rank-4 ``(D, H, W, 3)`` RGB frame stacks to grayscale.

    Frame stacks with values above 1 are taken to be 8-bit and divided by 255.
    """
    path = Path(path)
    if path.suffix != ".nii":
        arr = read_tensor(path)
        if arr.ndim == 4:
            gray = rgb_to_gray(arr)
            if gray.max() > 1.0:
                gray = gray / 255.0
            return Volume(np.clip(gray, 0.0, 1.0), Domain.UNIT_NORMALIZED)
    return load_volume(path)


def _threads() -> int:
    text = os.environ.get("VIPTT_THREADS", "")
    try:
        return max(1, int(text))
    except ValueError:
        return 1


def cmd_preprocess(args, cfg) -> None:
    ds = load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = ResizeSpec((cfg["depth"], cfg["size"], cfg["size"]), cfg["order"])

    def work(item):
        i, rec = item
        vol = load_any(rec.data_path)
        if vol.domain is Domain.HOUNSFIELD:
            vol = hu_normalize(vol, cfg["window"])
        vol = siz_resize(vol, spec)
        dest = out_dir / f"{i:05d}_{rec.data_path.stem}.vpt"
        write_tensor(dest, vol.data)
        return SampleRecord(dest, rec.label)

    def guarded(item):
        try:
            return work(item), None
        except VipttError as exc:
            return None, exc

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(guarded, enumerate(ds.records)))
    written = []
    for (i, rec), (out, exc) in zip(enumerate(ds.records), results):
        if exc is not None:
            log.error("row %d (%s): %s: %s", i + 2, rec.data_path, exc.code, exc)
        else:
            written.append(out)
    write_manifest(out_dir / "manifest.csv", written)
    log.info("preprocessed %d of %d volumes into %s", len(written), len(ds), out_dir)


def _history_path(args) -> Path:
    return Path(args.history) if args.history else Path(str(args.out) + ".history.csv")


def cmd_pretrain(args, cfg) -> None:
    ds = load_manifest(args.manifest, cfg["classes"])
    train_ds, val_ds = stratified_split(ds, cfg["train_fraction"], cfg["seed"])
    model = build_model(_model_config(cfg, ds.input_dims, ds.num_classes), cfg["seed"])
    set_trainable(model, Component.EXTRACTOR, False)
    best, hist = train(model, train_ds, val_ds, _train_config(cfg))
    save_checkpoint(best, args.out)
    hist.to_csv(_history_path(args))
    log.info("wrote %s (best epoch %d of %d)", args.out, hist.best_epoch, len(hist.epoch))


def _check_compatible(model, ds) -> None:
    if tuple(ds.input_dims) != model.config.input_dims or ds.num_classes != model.config.num_classes:
        raise ConfigMismatch(
            f"checkpoint expects input {model.config.input_dims} with {model.config.num_classes} classes, "
            f"data has input {tuple(ds.input_dims)} with {ds.num_classes} classes")


def _write_report(prefix, labels, probs, num_classes) -> str:
    names = class_names(num_classes)
    cm = confusion_matrix(labels, probs.argmax(axis=1), num_classes)
    text = format_report(cm, names)
    Path(str(prefix) + ".txt").write_text(text, encoding="utf-8")
    write_report_csv(str(prefix) + ".csv", cm, names)
    return text


def cmd_finetune(args, cfg) -> None:
    ds = load_manifest(args.manifest, cfg["classes"])
    train_ds, val_ds = stratified_split(ds, cfg["train_fraction"], cfg["seed"])
    if args.no_init:
        model = build_model(_model_config(cfg, ds.input_dims, ds.num_classes), cfg["seed"])
    else:
        base = load_checkpoint(args.init)
        if base.config.input_dims != tuple(ds.input_dims):
            raise ConfigMismatch(f"checkpoint expects input {base.config.input_dims}, data has {tuple(ds.input_dims)}")
        model = replace_head(base, ds.num_classes, cfg["seed"])
    for comp in Component:
        set_trainable(model, comp, True)
    weights = None
    if cfg["class_weights"]:
        weights = class_weights(train_ds.labels, ds.num_classes)
        log.info("class weights: [%s]", ", ".join(repr(float(w)) for w in weights))
    augment = AugmentSpec() if cfg["augment"] else None
    best, hist = train(model, train_ds, val_ds, _train_config(cfg, class_weights=weights, augment=augment))
    save_checkpoint(best, args.out)
    hist.to_csv(_history_path(args))
    prefix = args.report or str(args.out) + ".report"
    text = _write_report(prefix, val_ds.labels, predict_proba(best, val_ds), ds.num_classes)
    sys.stdout.write(text)
    log.info("wrote %s (best epoch %d of %d)", args.out, hist.best_epoch, len(hist.epoch))


def cmd_evaluate(args, cfg) -> None:
    model = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest)
    _check_compatible(model, ds)
    text = _write_report(args.report, ds.labels, predict_proba(model, ds), ds.num_classes)
    sys.stdout.write(text)


def cmd_predict(args, cfg) -> None:
    model = load_checkpoint(args.checkpoint)
    vol = load_any(args.input)
    if vol.domain is Domain.HOUNSFIELD:
        vol = hu_normalize(vol, cfg["window"])
    if vol.dims != model.config.input_dims:
        raise ConfigMismatch(f"checkpoint expects input {model.config.input_dims}, {args.input} has {vol.dims}")
    probs = model.forward(vol.data[None])[0]
    name = class_names(model.config.num_classes)[int(np.argmax(probs))]
    sys.stdout.write(f"class={name} probs=[{', '.join(repr(float(p)) for p in probs)}]\n")


def cmd_gen_synthetic(args, cfg) -> None:
    k = cfg["classes"]
    counts = cfg["counts"] if cfg["counts"] is not None else (cfg["per_class"],) * k
    if len(counts) != k:
        raise ValueError(f"--counts has {len(counts)} entries for {k} classes")
    spec = SyntheticSpec(num_classes=k, samples_per_class=tuple(counts), dims=(cfg["depth"], cfg["size"], cfg["size"]),
                         direction_offset_deg=cfg["direction_offset"])
    ds = gen_synthetic_dataset(spec, cfg["seed"], args.out_dir)
    log.info("wrote %d samples to %s", len(ds), args.out_dir)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gen-synthetic": cmd_gen_synthetic,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_options(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        opt = OPTIONS[key]
        flag = "--" + key.replace("_", "-")
        if opt.parse is _parse_bool:
            p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=opt.help)
        else:
            p.add_argument(flag, dest=key, type=opt.parse, default=None, help=opt.help)


_TRAIN_KEYS = ("lr_init", "batch_size", "plateau_factor", "plateau_patience", "early_stop_patience",
               "max_epochs", "min_delta", "clip_norm", "train_fraction")
_MODEL_KEYS = ("feature_extractor", "feature_dim", "lstm_units", "dense_units")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    _add_options(common, ("seed",))

    parser = argparse.ArgumentParser(prog="viptt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="normalize and resize volumes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    _add_options(p, ("depth", "size", "window", "order"))

    p = sub.add_parser("pretrain", parents=[common], help="train on a frame-sequence set with the extractor frozen")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV (default <out>.history.csv)")
    _add_options(p, ("classes",) + _TRAIN_KEYS + _MODEL_KEYS)

    p = sub.add_parser("finetune", parents=[common], help="swap the head and train every layer")
    p.add_argument("--manifest", required=True)
    init = p.add_mutually_exclusive_group(required=True)
    init.add_argument("--init", help="checkpoint to start from")
    init.add_argument("--no-init", action="store_true", help="train from scratch")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV (default <out>.history.csv)")
    p.add_argument("--report", help="report prefix (default <out>.report)")
    _add_options(p, ("classes", "class_weights", "augment") + _TRAIN_KEYS + _MODEL_KEYS)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="report prefix; writes <prefix>.txt and <prefix>.csv")

    p = sub.add_parser("predict", parents=[common], help="classify one preprocessed volume")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_options(p, ("window",))

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a moving-blob sequence dataset")
    p.add_argument("--out-dir", required=True)
    _add_options(p, ("classes", "counts", "per_class", "depth", "size", "direction_offset"))
    return parser


class _ErrorCounter(logging.Handler):
    def __init__(self):
        super().__init__(logging.ERROR)
        self.count = 0

    def emit(self, record):
        self.count += 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    counter = _ErrorCounter()
    root = logging.getLogger()
    root.addHandler(handler)
    root.addHandler(counter)
    old_level = root.level
    root.setLevel(getattr(logging, str(args.log_level).upper(), logging.INFO))
    try:
        try:
            cfg = resolve_config(args)
        except (OSError, ValueError) as exc:
            log.error("config: %s", exc)
            return 1
        _log_config(args.command, cfg)
        try:
            COMMANDS[args.command](args, cfg)
        except VipttError as exc:
            log.error("%s: %s", exc.code, exc)
        except (OSError, ValueError) as exc:
            log.error("%s", exc)
        return 1 if counter.count else 0
    finally:
        root.removeHandler(handler)
        root.removeHandler(counter)
        root.setLevel(old_level)


if __name__ == "__main__":
    sys.exit(main())
