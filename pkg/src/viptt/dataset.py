"""Manifests, stratified splitting, class weights, batching and synthetic data."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ClassTooSmall,
    DimensionMismatch,
    EmptyClass,
    EmptyDataset,
    LabelOutOfRange,
    MalformedManifest,
    MissingFile,
)
from .preprocess import AUGMENT_ANGLES, rotate_axial
from .rng import SplitMix64, derive_seed
from .volume_io import Volume, load_volume, write_tensor

__all__ = [
    "TB_CLASS_NAMES",
    "class_names",
    "SampleRecord",
    "Dataset",
    "load_manifest",
    "write_manifest",
    "stratified_split",
    "class_weights",
    "AugmentSpec",
    "Batch",
    "make_batches",
    "SyntheticSpec",
    "gen_synthetic_dataset",
]

TB_CLASS_NAMES = ("Infiltrative", "Focal", "Tuberculoma", "Miliary", "Fibro-cavernous")


def class_names(k: int) -> list[str]:
    if k == len(TB_CLASS_NAMES):
        return list(TB_CLASS_NAMES)
    return [f"class_{i}" for i in range(k)]


@dataclass(frozen=True)
class SampleRecord:
    data_path: Path
    label: int


class Dataset:
    """An immutable list of labelled samples.

    Loaded volumes are cached in memory, so repeated epochs read each file once.
    """

    def __init__(self, records: Sequence[SampleRecord], num_classes: int, input_dims=None):
        self.records = tuple(records)
        self.num_classes = int(num_classes)
        if self.num_classes < 2:
            raise MalformedManifest(f"need at least 2 classes, got {self.num_classes}")
        for i, rec in enumerate(self.records):
            if not 0 <= rec.label < self.num_classes:
                raise LabelOutOfRange(f"row {i + 1}: label {rec.label} not in [0, {self.num_classes - 1}]")
        self._input_dims = tuple(input_dims) if input_dims is not None else None
        self._cache: dict[Path, Volume] = {}

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def input_dims(self):
        if self._input_dims is None and self.records:
            self._input_dims = self.load(0).dims
        return self._input_dims

    def load(self, i: int) -> Volume:
        rec = self.records[i]
        vol = self._cache.get(rec.data_path)
        if vol is None:
            vol = load_volume(rec.data_path)
            self._cache[rec.data_path] = vol
        if self._input_dims is not None and vol.dims != self._input_dims:
            raise DimensionMismatch(f"{rec.data_path}: dims {vol.dims}, dataset expects {self._input_dims}")
        return vol

    def subset(self, indices) -> "Dataset":
        sub = Dataset([self.records[i] for i in indices], self.num_classes, self._input_dims)
        sub._cache = self._cache
        return sub


def load_manifest(path, num_classes: int | None = None) -> Dataset:
    """Read a ``path,label`` CSV; relative paths resolve against the manifest's directory."""
    path = Path(path)
    base = path.parent
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise MissingFile(f"cannot read manifest {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["path", "label"]:
        raise MalformedManifest(f"{path}: header must be 'path,label'")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise MalformedManifest(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
        rel, label = row[0].strip(), row[1].strip()
        try:
            label = int(label)
        except ValueError:
            raise MalformedManifest(f"{path}:{lineno}: label {label!r} is not an integer") from None
        if label < 0:
            raise LabelOutOfRange(f"{path}:{lineno}: negative label {label}")
        data_path = Path(rel) if os.path.isabs(rel) else base / rel
        if not data_path.is_file():
            raise MissingFile(f"{path}:{lineno}: data file {data_path} does not exist")
        records.append(SampleRecord(data_path, label))
    if not records:
        raise EmptyDataset(f"{path}: manifest has no rows")
    k = max(r.label for r in records) + 1
    if num_classes is not None:
        if k > num_classes:
            raise LabelOutOfRange(f"{path}: label {k - 1} exceeds {num_classes} classes")
        k = num_classes
    return Dataset(records, k)


def write_manifest(path, records: Sequence[SampleRecord]) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for rec in records:
            p = Path(rec.data_path).resolve()
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([p.as_posix(), rec.label])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class split: ``round(train_fraction * n_c)`` samples of class c go to train.

    The count is clamped to [1, n_c - 1] so every class appears on both sides.
    Both halves keep the original record order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = ds.labels
    rng = SplitMix64(seed)
    train_idx = []
    for c in range(ds.num_classes):
        members = [int(i) for i in np.flatnonzero(labels == c)]
        if len(members) < 2:
            raise ClassTooSmall(f"class {c} has {len(members)} sample(s); need at least 2")
        n_train = min(max(_round_half_up(train_fraction * len(members)), 1), len(members) - 1)
        train_idx.extend(rng.shuffle(members)[:n_train])
    chosen = set(train_idx)
    train = sorted(chosen)
    val = [i for i in range(len(ds)) if i not in chosen]
    return ds.subset(train), ds.subset(val)


def class_weights(labels, num_classes: int) -> np.ndarray:
    """Balanced inverse-frequency weights ``N / (K * n_c)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes - 1}]")
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise EmptyClass(f"classes {missing.tolist()} have no samples")
    return labels.size / (num_classes * counts.astype(np.float64))


@dataclass(frozen=True)
class AugmentSpec:
    angles: tuple[float, ...] = AUGMENT_ANGLES


@dataclass
class Batch:
    x: np.ndarray  # (B, D, H, W)
    y: np.ndarray  # (B,)
    indices: list[int]
    angles: list[float] = field(default_factory=list)


def make_batches(ds: Dataset, batch_size: int, seed: int, augment: AugmentSpec | None = None) -> list[Batch]:
    """One epoch of shuffled batches; the last batch may be short.

    The shuffle and every rotation angle are drawn from ``seed`` before any
    sample is loaded.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(ds) == 0:
        raise EmptyDataset("cannot batch an empty dataset")
    rng = SplitMix64(seed)
    order = rng.shuffle(range(len(ds)))
    angles = [rng.choice(augment.angles) for _ in order] if augment is not None else [0.0] * len(order)
    labels = ds.labels
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        ang = angles[start:start + batch_size]
        vols = []
        for i, a in zip(idx, ang):
            vol = ds.load(i)
            vols.append(rotate_axial(vol, a).data if a else vol.data)
        batches.append(Batch(np.stack(vols), labels[idx], list(idx), list(ang) if augment else []))
    return batches


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Moving-blob sequences: each class is a direction of motion across depth.

    Class ``c`` moves along ``direction_offset_deg + 360 c / K`` degrees
    (0 is +x, 90 is +y). Start positions are random, so a single frame says
    nothing about the class; only the displacement between frames does.

    The scene has a lighting ramp along x (blob peak grows from
    ``1 - light_gradient`` to 1 times ``amplitude``) and perspective along y
    (blob width grows from ``1 - perspective`` to ``1 + perspective`` times
    ``blob_sigma``), so motion also shows up in position-free frame
    statistics such as brightness and blob size.
    """

    num_classes: int
    samples_per_class: int | tuple[int, ...] = 10
    dims: tuple[int, int, int] = (8, 32, 32)
    direction_offset_deg: float = 0.0
    speed: float = 1.5  # pixels per frame
    speed_jitter: float = 0.0
    blob_sigma: float = 2.5
    amplitude: float = 0.8
    background: float = 0.1
    noise_std: float = 0.05
    light_gradient: float = 0.6
    perspective: float = 0.4

    def counts(self) -> list[int]:
        if isinstance(self.samples_per_class, int):
            return [self.samples_per_class] * self.num_classes
        if len(self.samples_per_class) != self.num_classes:
            raise ValueError("samples_per_class must have one entry per class")
        return list(self.samples_per_class)


def _blob_sequence(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    D, H, W = spec.dims
    theta = math.radians(spec.direction_offset_deg + 360.0 * label / spec.num_classes)
    speed = spec.speed * (1.0 + spec.speed_jitter * rng.uniform(-1.0, 1.0))
    vx, vy = speed * math.cos(theta), speed * math.sin(theta)
    travel_x, travel_y = vx * (D - 1), vy * (D - 1)
    margin = spec.blob_sigma * (1.0 + spec.perspective)

    def start(extent, travel):
        lo = margin - min(travel, 0.0)
        hi = extent - 1 - margin - max(travel, 0.0)
        if hi < lo:
            lo = hi = (extent - 1 - travel) / 2.0
        return rng.uniform(lo, hi)

    x0, y0 = start(W, travel_x), start(H, travel_y)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    t = np.arange(D, dtype=np.float64)[:, None, None]
    cx, cy = x0 + vx * t, y0 + vy * t
    gain = 1.0 - spec.light_gradient * (1.0 - cx / (W - 1))
    sigma = spec.blob_sigma * (1.0 + spec.perspective * (2.0 * cy / (H - 1) - 1.0))
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma ** 2))
    vol = spec.background + spec.amplitude * gain * blob
    if spec.noise_std > 0:
        vol = vol + rng.normal(0.0, spec.noise_std, size=vol.shape)
    return np.clip(vol, 0.0, 1.0)


def gen_synthetic_dataset(spec: SyntheticSpec, seed: int, out_dir) -> Dataset:
    """Write one VPT1 tensor per sample plus ``manifest.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    i = 0
    for label, n in enumerate(spec.counts()):
        for _ in range(n):
            rng = np.random.default_rng(derive_seed(seed, i))
            path = out_dir / f"sample_{i:05d}.vpt"
            write_tensor(path, _blob_sequence(spec, label, rng))
            records.append(SampleRecord(path, label))
            i += 1
    write_manifest(out_dir / "manifest.csv", records)
    return Dataset(records, spec.num_classes, spec.dims)
