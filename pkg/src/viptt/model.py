"""The per-slice CNN -> LSTM -> dense classifier, its training loop and checkpoints.

A batch ``(B, D, H, W)`` is treated as B sequences of D single-channel
frames. Every frame is standardised, then goes through the same 1x1 channel
mapper (1 -> 3 channels) and CNN feature extractor; the resulting
``(B, D, F)`` feature sequence is summarised by the LSTM's last hidden state
and classified by a ReLU dense layer followed by a softmax layer.

The input standardisation is a fixed mean and spread taken from the first
training set the model sees. Unit-range CT and video frames are mostly dark,
and without it the randomly initialised extractor's features barely vary
between samples compared with how far one SGD step on a conv bias moves them.
"""
from __future__ import annotations

import copy
import csv
import enum
import io
import logging
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import AugmentSpec, Dataset, make_batches
from .errors import (
    BackwardBeforeForward,
    BadConfig,
    ConfigMismatch,
    DegenerateMarginals,
    EmptyDataset,
    IOFailure,
    MalformedCheckpoint,
    ShapeMismatch,
)
from .metrics import cohen_kappa, confusion_matrix
from .nn import (
    LSTM,
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2D,
    ReLU,
    clip_grad_norm,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    Standardize,
)

log = logging.getLogger(__name__)

__all__ = [
    "Extractor",
    "Component",
    "ModelConfig",
    "Model",
    "build_model",
    "replace_head",
    "set_trainable",
    "TrainConfig",
    "History",
    "fit_input_norm",
    "train",
    "predict_proba",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]


class Extractor(str, enum.Enum):
    TINY = "tiny"
    VGG16_SHAPE = "vgg16_shape"


class Component(str, enum.Enum):
    CHANNEL_MAPPER = "channel_mapper"
    EXTRACTOR = "extractor"
    LSTM = "lstm"
    HEAD = "head"


VGG16_CONV_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, int, int]
    num_classes: int
    feature_extractor: Extractor = Extractor.TINY
    feature_dim: int = 64
    lstm_units: int = 256
    dense_units: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        try:
            object.__setattr__(self, "feature_extractor", Extractor(self.feature_extractor))
        except ValueError:
            raise BadConfig(f"unknown feature extractor {self.feature_extractor!r}") from None
        if self.feature_extractor is Extractor.VGG16_SHAPE:
            object.__setattr__(self, "feature_dim", 512)
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise BadConfig(f"input_dims must be three positive integers, got {self.input_dims}")
        if self.num_classes < 2:
            raise BadConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.feature_dim, self.lstm_units, self.dense_units) < 1:
            raise BadConfig("feature_dim, lstm_units and dense_units must be positive")
        pools = 5 if self.feature_extractor is Extractor.VGG16_SHAPE else 2
        if min(self.input_dims[1:]) < 2 ** pools:
            raise BadConfig(f"{self.feature_extractor.value} extractor needs H, W >= {2 ** pools}")

    def to_items(self) -> list[tuple[str, str]]:
        return [
            ("input_dims", ",".join(map(str, self.input_dims))),
            ("num_classes", str(self.num_classes)),
            ("feature_extractor", self.feature_extractor.value),
            ("feature_dim", str(self.feature_dim)),
            ("lstm_units", str(self.lstm_units)),
            ("dense_units", str(self.dense_units)),
        ]

    @classmethod
    def from_items(cls, items: dict) -> "ModelConfig":
        return cls(
            input_dims=tuple(int(v) for v in items["input_dims"].split(",")),
            num_classes=int(items["num_classes"]),
            feature_extractor=items["feature_extractor"],
            feature_dim=int(items["feature_dim"]),
            lstm_units=int(items["lstm_units"]),
            dense_units=int(items["dense_units"]),
        )


def _build_extractor(cfg: ModelConfig, rng) -> list:
    layers = []
    if cfg.feature_extractor is Extractor.TINY:
        mid = max(cfg.feature_dim // 2, 4)
        layers += [Conv2D(3, mid, 3, rng=rng), ReLU(), MaxPool2D(),
                   Conv2D(mid, cfg.feature_dim, 3, rng=rng), ReLU(), MaxPool2D()]
    else:
        ch = 3
        for item in VGG16_CONV_PLAN:
            if item == "M":
                layers.append(MaxPool2D())
            else:
                layers += [Conv2D(ch, item, 3, rng=rng), ReLU()]
                ch = item
    layers.append(GlobalAvgPool())
    return layers


class Model:
    def __init__(self, config: ModelConfig, components: dict):
        self.config = config
        self.components = components
        self._dlogits = None
        self._shape = None

    @property
    def layers(self) -> list:
        return [layer for comp in Component for layer in self.components[comp]]

    def trainable(self, component) -> bool:
        return all(layer.trainable for layer in self.components[Component(component)])

    @property
    def input_norm(self) -> Standardize:
        return self.components[Component.CHANNEL_MAPPER][0]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers keyed ``component.layer_index.name``, in a fixed order."""
        out = {}
        for comp in Component:
            for li, layer in enumerate(self.components[comp]):
                for name, arr in (layer.params | layer.buffers).items():
                    out[f"{comp.value}.{li}.{name}"] = arr
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            raise ConfigMismatch("parameter names differ from the model architecture")
        for key, arr in own.items():
            if arr.shape != state[key].shape:
                raise ConfigMismatch(f"{key}: shape {state[key].shape} vs model {arr.shape}")
            arr[...] = state[key]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.input_dims:
            raise ShapeMismatch(f"expected (B, {', '.join(map(str, self.config.input_dims))}), got {x.shape}")

    def features(self, x, training=False) -> np.ndarray:
        """Per-frame feature vectors, shape (B, D, feature_dim)."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        B, D, H, W = x.shape
        h = x.reshape(B * D, 1, H, W)
        for layer in self.components[Component.CHANNEL_MAPPER] + self.components[Component.EXTRACTOR]:
            h = layer.forward(h, training)
        return h.reshape(B, D, -1)

    def logits(self, x, training=False) -> np.ndarray:
        h = self.features(x, training)
        self._shape = h.shape
        for layer in self.components[Component.LSTM] + self.components[Component.HEAD]:
            h = layer.forward(h, training)
        return h

    def forward(self, x, training=False) -> np.ndarray:
        """Class probabilities, shape (B, K)."""
        return softmax(self.logits(x, training))

    def loss(self, x, labels, weights=None) -> float:
        loss, _, d = softmax_cross_entropy(self.logits(x, training=True), labels, weights)
        self._dlogits = d
        return loss

    def backward(self) -> np.ndarray:
        """Backpropagate the last :meth:`loss`; returns d loss / d input."""
        if self._dlogits is None:
            raise BackwardBeforeForward("Model.backward called before loss")
        g = self._dlogits
        for layer in reversed(self.components[Component.LSTM] + self.components[Component.HEAD]):
            g = layer.backward(g)
        B, D, F = self._shape
        g = g.reshape(B * D, F)
        for layer in reversed(self.components[Component.CHANNEL_MAPPER] + self.components[Component.EXTRACTOR]):
            g = layer.backward(g)
        H, W = self.config.input_dims[1:]
        return g.reshape(B, D, H, W)


def _head_softmax_layer(cfg: ModelConfig, num_classes: int, seed: int) -> Dense:
    return Dense(cfg.dense_units, num_classes, rng=np.random.default_rng([int(seed), 1]))


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(int(seed))
    components = {
        Component.CHANNEL_MAPPER: [Standardize(1), Conv2D(1, 3, 1, rng=rng)],
        Component.EXTRACTOR: _build_extractor(config, rng),
        Component.LSTM: [LSTM(config.feature_dim, config.lstm_units, rng=rng)],
        Component.HEAD: [Dense(config.lstm_units, config.dense_units, rng=rng), ReLU(),
                         _head_softmax_layer(config, config.num_classes, seed)],
    }
    return Model(config, components)


def replace_head(model: Model, new_k: int, seed: int = 0) -> Model:
    """Copy of ``model`` whose final softmax layer is freshly initialised with ``new_k`` units."""
    if new_k < 2:
        raise BadConfig(f"new_k must be >= 2, got {new_k}")
    out = copy.deepcopy(model)
    cfg = ModelConfig(**{f.name: getattr(model.config, f.name) for f in fields(ModelConfig)} | {"num_classes": new_k})
    out.config = cfg
    out.components[Component.HEAD][-1] = _head_softmax_layer(cfg, new_k, seed)
    return out


def set_trainable(model: Model, component, flag: bool) -> None:
    for layer in model.components[Component(component)]:
        layer.trainable = bool(flag)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_init: float = 0.001
    batch_size: int = 2
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 10
    max_epochs: int = 100
    class_weights: np.ndarray | None = None
    augment: AugmentSpec | None = None
    seed: int = 0
    min_delta: float = 1e-6
    clip_norm: float | None = None

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise BadConfig("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise BadConfig("patiences must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_init <= 0:
            raise BadConfig("batch_size, max_epochs and lr_init must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise BadConfig("clip_norm must be positive")


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    val_kappa: list[float] = field(default_factory=list)
    best_epoch: int = -1

    COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "val_kappa")

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_loss, self.lr, self.val_kappa))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for e, tl, vl, lr, k in self.rows():
                w.writerow([e, repr(tl), repr(vl), repr(lr), repr(k)])


def predict_proba(model: Model, ds: Dataset, batch_size: int = 8) -> np.ndarray:
    out = []
    for start in range(0, len(ds), batch_size):
        x = np.stack([ds.load(i).data for i in range(start, min(start + batch_size, len(ds)))])
        out.append(model.forward(x))
    return np.concatenate(out)


def evaluate(model: Model, ds: Dataset, weights=None, batch_size: int = 8):
    """Return ``(mean loss, probabilities, kappa)`` over ``ds``."""
    if len(ds) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    probs = predict_proba(model, ds, batch_size)
    labels = ds.labels
    sw = np.ones(len(labels)) if weights is None else np.asarray(weights)[labels]
    loss = float(np.mean(sw * -np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300))))
    cm = confusion_matrix(labels, probs.argmax(axis=1), model.config.num_classes)
    try:
        kappa = cohen_kappa(cm).kappa
    except DegenerateMarginals:
        kappa = float("nan")
    return loss, probs, kappa


def fit_input_norm(model: Model, ds: Dataset) -> None:
    """Fix the input standardisation to the voxel mean and spread of ``ds``."""
    model.input_norm.fit(np.stack([ds.load(i).data for i in range(len(ds))]))


def train(model: Model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, val_loss_fn=None):
    """SGD with plateau learning-rate decay, early stopping and best-weight retention.

    Validation loss drives both the scheduler and early stopping. After
    ``plateau_patience`` epochs without an improvement larger than
    ``min_delta`` the learning rate is multiplied by ``plateau_factor``;
    after ``early_stop_patience`` such epochs training stops. Returns a copy
    of the model at its best-validation-loss epoch together with the history.

    ``val_loss_fn(model, epoch) -> float`` replaces the validation loss when
    given (kappa is then reported as NaN). A model whose input
    standardisation has not been fitted yet is fitted on ``train_ds`` first;
    later calls (fine-tuning) keep the statistics they inherit.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    for ds in (train_ds, val_ds):
        if tuple(ds.input_dims) != model.config.input_dims:
            raise ShapeMismatch(f"dataset dims {ds.input_dims} vs model input {model.config.input_dims}")
        if ds.num_classes != model.config.num_classes:
            raise ShapeMismatch(f"dataset has {ds.num_classes} classes, model {model.config.num_classes}")
    if not model.input_norm.fitted:
        fit_input_norm(model, train_ds)
    hist = History()
    lr = cfg.lr_init
    reductions = 0
    best_loss = math.inf
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    wait = plateau_wait = 0
    for epoch in range(cfg.max_epochs):
        total, count = 0.0, 0
        for batch in make_batches(train_ds, cfg.batch_size, cfg.seed + epoch, cfg.augment):
            loss = model.loss(batch.x, batch.y, cfg.class_weights)
            model.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(model.layers, cfg.clip_norm)
            sgd_step(model.layers, lr)
            total += loss * len(batch.y)
            count += len(batch.y)
        if val_loss_fn is not None:
            val_loss, kappa = float(val_loss_fn(model, epoch)), float("nan")
        else:
            val_loss, _, kappa = evaluate(model, val_ds)
        hist.epoch.append(epoch)
        hist.train_loss.append(total / count)
        hist.val_loss.append(val_loss)
        hist.lr.append(lr)
        hist.val_kappa.append(kappa)
        log.info("epoch %d train_loss %.6f val_loss %.6f lr %.3g val_kappa %.4f",
                 epoch, total / count, val_loss, lr, kappa)
        if val_loss < best_loss - cfg.min_delta:
            best_loss = val_loss
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            hist.best_epoch = epoch
            wait = plateau_wait = 0
            continue
        wait += 1
        plateau_wait += 1
        if wait >= cfg.early_stop_patience:
            log.info("early stop after epoch %d (best epoch %d)", epoch, hist.best_epoch)
            break
        if plateau_wait >= cfg.plateau_patience:
            reductions += 1
            lr = cfg.lr_init * cfg.plateau_factor ** reductions
            plateau_wait = 0
            log.info("reducing learning rate to %.3g", lr)
    best = copy.deepcopy(model)
    best.load_state_dict(best_state)
    best.zero_grad()
    return best, hist


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"VPTC"
_CKPT_VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, a key=value config block and every parameter as f64."""
    lines = model.config.to_items()
    lines.append(("trainable", ",".join(f"{c.value}:{int(model.trainable(c))}" for c in Component)))
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", _CKPT_VERSION))
    buf.write(_pack_str("".join(f"{k}={v}\n" for k, v in lines)))
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise MalformedCheckpoint("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedCheckpoint("invalid UTF-8 in checkpoint") from exc


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(4) != _CKPT_MAGIC:
        raise MalformedCheckpoint(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != _CKPT_VERSION:
        raise MalformedCheckpoint(f"{path}: unsupported version {version}")
    items = {}
    for line in r.string().splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedCheckpoint(f"{path}: bad config line {line!r}")
        items[key] = value
    try:
        cfg = ModelConfig.from_items(items)
    except (KeyError, ValueError, BadConfig) as exc:
        raise MalformedCheckpoint(f"{path}: bad config block ({exc})") from exc
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        if rank > 8:
            raise MalformedCheckpoint(f"{path}: tensor {name} has rank {rank}")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.uint64))
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise MalformedCheckpoint(f"{path}: {len(buf) - r.pos} trailing bytes")
    model = build_model(cfg, seed=0)
    try:
        model.load_state_dict(state)
    except ConfigMismatch as exc:
        raise MalformedCheckpoint(f"{path}: {exc}") from exc
    for part in items.get("trainable", "").split(","):
        if part:
            comp, _, flag = part.partition(":")
            try:
                set_trainable(model, comp, flag == "1")
            except ValueError as exc:
                raise MalformedCheckpoint(f"{path}: unknown component {comp!r}") from exc
    return model
