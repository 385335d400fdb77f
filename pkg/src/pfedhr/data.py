"""Datasets, IDX ingestion, train/test/public splitting and client partitioning."""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, CountMismatch, IncompatibleSpec, InsufficientData, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8
DEFAULT_PUBLIC_FRACTION = 0.10
SYNTHETIC_STD = 0.5


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    labeled: bool = True

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise CountMismatch(f"{len(self.features)} features vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_spec(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, self.labeled)

    def unlabeled(self) -> "LabeledDataset":
        return LabeledDataset(self.features, self.labels, self.num_classes, labeled=False)


# Server-held data; ``labeled=False`` hides the labels from finetuning.
PublicDataset = LabeledDataset


# -- IDX ----------------------------------------------------------------------


def _read_header(raw: bytes, magic: int, ndims: int, what: str) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) < need:
        raise TruncatedFile(f"{what}: header needs {need} bytes, file has {len(raw)}")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagic(f"{what}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", raw[4:need])


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1].

    ``num_classes`` defaults to the largest label + 1.
    """
    img_raw = Path(images_path).read_bytes()
    lbl_raw = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(img_raw, IDX_IMAGES_MAGIC, 3, "images")
    (n_lbl,) = _read_header(lbl_raw, IDX_LABELS_MAGIC, 1, "labels")
    if n_img != n_lbl:
        raise CountMismatch(f"{n_img} images vs {n_lbl} labels")
    pixels = img_raw[16:]
    if len(pixels) < n_img * rows * cols:
        raise TruncatedFile(f"images: expected {n_img * rows * cols} pixel bytes, got {len(pixels)}")
    if len(lbl_raw) - 8 < n_lbl:
        raise TruncatedFile(f"labels: expected {n_lbl} bytes, got {len(lbl_raw) - 8}")
    images = np.frombuffer(pixels, dtype=np.uint8, count=n_img * rows * cols)
    images = images.reshape(n_img, 1, rows, cols).astype(np.float32) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=n_lbl, offset=8).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n_lbl else 1
    return LabeledDataset(images, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- synthetic ----------------------------------------------------------------


def class_means(num_classes: int, dim: int, scale: float) -> np.ndarray:
    """Scaled simplex vertices (one-hot axes) when dim >= num_classes."""
    if dim >= num_classes:
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes)] = scale
        return means
    rng = np.random.default_rng(num_classes * 1000 + dim)
    directions = rng.normal(size=(num_classes, dim))
    return scale * directions / np.linalg.norm(directions, axis=1, keepdims=True)


def make_synthetic(num_classes: int, n: int, dim: int, seed: int, scale: float = 2.0) -> LabeledDataset:
    """Gaussian class blobs (std 0.5), balanced class counts, shuffled order."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    labels = np.repeat(np.arange(num_classes), counts)
    labels = labels[rng.permutation(n)]
    means = class_means(num_classes, dim, scale)
    features = means[labels] + rng.normal(0.0, SYNTHETIC_STD, size=(n, dim))
    return LabeledDataset(features.astype(np.float32), labels, num_classes)


def to_csv(dataset: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for y, x in zip(dataset.labels, dataset.features.reshape(len(dataset), -1)):
            writer.writerow([int(y)] + [f"{v:.6g}" for v in x])


# -- partitioning ---------------------------------------------------------------


class Scheme(str, enum.Enum):
    IID = "IID"
    TWO_CLASS_NONIID = "TWO_CLASS_NONIID"


@dataclass
class PartitionPlan:
    train: list[np.ndarray]
    test: list[np.ndarray]
    public: np.ndarray
    scheme: Scheme
    client_classes: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.train)


def _deal(indices_by_class: dict[int, np.ndarray], holders: dict[int, list[int]], num_clients: int):
    """Deal each class's indices round-robin over the clients holding it.

    The starting client rotates across classes so per-client totals stay
    balanced.
    """
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    offset = 0
    for c in sorted(indices_by_class):
        owners = holders.get(c, [])
        if not owners:
            continue
        for i, idx in enumerate(indices_by_class[c]):
            buckets[owners[(offset + i) % len(owners)]].append(int(idx))
        offset += len(indices_by_class[c])
    return [np.array(sorted(b), dtype=np.int64) for b in buckets]


def _by_class(labels: np.ndarray, idx: np.ndarray, rng) -> dict[int, np.ndarray]:
    return {int(c): rng.permutation(idx[labels[idx] == c]) for c in np.unique(labels[idx])}


def partition(dataset: LabeledDataset, num_clients: int, scheme=Scheme.IID,
              public_fraction: float = DEFAULT_PUBLIC_FRACTION, seed: int = 0) -> PartitionPlan:
    """80/20 train/test split, ``public_fraction`` of the train pool to the
    server, the rest dealt to clients by ``scheme``."""
    scheme = Scheme(scheme)
    if not 0.0 <= public_fraction <= 0.5:
        raise ValueError("public_fraction must lie in [0, 0.5]")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    order = rng.permutation(n)
    n_train = int(round(TRAIN_FRACTION * n))
    train_pool, test_pool = order[:n_train], order[n_train:]
    n_public = int(round(public_fraction * n_train))
    public = np.sort(train_pool[:n_public])
    client_pool = train_pool[n_public:]

    labels = dataset.labels
    if scheme is Scheme.IID:
        everyone = list(range(num_clients))
        holders = {c: everyone for c in range(dataset.num_classes)}
        classes = [tuple(range(dataset.num_classes))] * num_clients
    else:
        shuffled = [int(c) for c in rng.permutation(dataset.num_classes)]
        classes = []
        holders = {}
        for k in range(num_clients):
            pair = (shuffled[(2 * k) % len(shuffled)], shuffled[(2 * k + 1) % len(shuffled)])
            classes.append(pair)
            for c in pair:
                holders.setdefault(c, []).append(k)
    train = _deal(_by_class(labels, client_pool, rng), holders, num_clients)
    test = _deal(_by_class(labels, test_pool, rng), holders, num_clients)
    for k, idx in enumerate(train):
        if len(idx) < 2:
            raise InsufficientData(f"client {k} would receive {len(idx)} training samples")
    return PartitionPlan(train, test, public, scheme, classes)


# -- cross-dataset public data ------------------------------------------------------


def _resize_grid(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Integer-factor average pooling, then centre crop / zero pad to (h, w)."""
    n, c, sh, sw = x.shape
    fh, fw = max(1, sh // h), max(1, sw // w)
    ph, pw = sh // fh, sw // fw
    x = x[:, :, : ph * fh, : pw * fw].reshape(n, c, ph, fh, pw, fw).mean(axis=(3, 5))
    out = np.zeros((n, c, h, w), dtype=x.dtype)
    top, left = (ph - h) // 2, (pw - w) // 2
    src = x[:, :, max(top, 0) : max(top, 0) + min(h, ph), max(left, 0) : max(left, 0) + min(w, pw)]
    oy, ox = max(-top, 0), max(-left, 0)
    out[:, :, oy : oy + src.shape[2], ox : ox + src.shape[3]] = src
    return out


def cross_public(source: LabeledDataset, target_input_spec, num_classes: int | None = None) -> LabeledDataset:
    """Adapt a foreign dataset to the clients' input spec for use as public data.

    Images are pooled/cropped to the target grid and channels averaged or
    replicated; vectors are truncated or zero-padded. Samples whose label is
    outside the clients' class range are dropped.
    """
    target = tuple(int(d) for d in target_input_spec)
    src = source.input_spec
    feats = source.features
    if src == target:
        out = source
    elif len(src) == 3 and len(target) == 3:
        c, h, w = target
        x = _resize_grid(feats, h, w)
        if x.shape[1] != c:
            x = np.repeat(x.mean(axis=1, keepdims=True), c, axis=1)
        out = LabeledDataset(x, source.labels, source.num_classes, source.labeled)
    elif len(src) == 1 and len(target) == 1:
        d = target[0]
        x = np.zeros((len(feats), d), dtype=np.float32)
        k = min(d, src[0])
        x[:, :k] = feats[:, :k]
        out = LabeledDataset(x, source.labels, source.num_classes, source.labeled)
    else:
        raise IncompatibleSpec(f"cannot map public data of shape {src} onto {target}")
    if num_classes is not None and num_classes != out.num_classes:
        keep = out.labels < num_classes
        out = LabeledDataset(out.features[keep], out.labels[keep], num_classes, out.labeled)
    return out
