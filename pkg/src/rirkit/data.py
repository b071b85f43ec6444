"""CIFAR-10/100 binary ingestion, preprocessing and deterministic batching.

Binary layouts (the datasets' published format):

    CIFAR-10   3073-byte records: <label> <3072 pixel bytes>
    CIFAR-100  3074-byte records: <coarse label> <fine label> <3072 pixel bytes>

Pixels are stored channel-major (1024 R, 1024 G, 1024 B), row-major 32x32.
"""
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptDataError, FormatError, InputError

IMAGE_BYTES = 3 * 32 * 32
RECORDS_PER_FILE = 10000
CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]
CIFAR10_DIRS = ("cifar-10-batches-bin", "")
CIFAR100_DIRS = ("cifar-100-binary", "")


@dataclass
class Dataset:
    images: np.ndarray  # [M, 3, 32, 32]
    labels: np.ndarray  # [M] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise CorruptDataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _variant(variant):
    v = variant.lower().replace("-", "")
    if v in ("c10", "cifar10"):
        return "c10"
    if v in ("c100", "cifar100"):
        return "c100"
    raise ConfigError(f"unknown CIFAR variant {variant!r}")


def decode_records(raw, variant, source="<bytes>"):
    """Decode a CIFAR binary blob into ``(uint8 pixels [M,3,32,32], labels)``."""
    variant = _variant(variant)
    lead = 1 if variant == "c10" else 2
    rec = lead + IMAGE_BYTES
    if len(raw) == 0 or len(raw) % rec:
        expect = (len(raw) // rec + 1) * rec
        raise FormatError(
            f"{source}: {len(raw)} bytes is not a whole number of {rec}-byte {variant} records "
            f"(expected a multiple of {rec}, e.g. {expect})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, lead - 1].astype(np.int64)  # fine label for CIFAR-100
    k = 10 if variant == "c10" else 100
    if labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise CorruptDataError(f"{source}: record {bad} has label {labels[bad]} >= {k}")
    return arr[:, lead:].reshape(-1, 3, 32, 32), labels


def encode_records(pixels, labels, variant, coarse=None):
    """Inverse of :func:`decode_records`. ``pixels`` are uint8 [M,3,32,32]."""
    variant = _variant(variant)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(pixels), IMAGE_BYTES)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if variant == "c10":
        head = labels
    else:
        c = np.zeros_like(labels) if coarse is None else np.asarray(coarse, dtype=np.uint8).reshape(-1, 1)
        head = np.concatenate([c, labels], axis=1)
    return np.concatenate([head, pixels], axis=1).tobytes()


def read_cifar_file(path, variant, expected_records=None):
    path = Path(path)
    raw = path.read_bytes()
    variant = _variant(variant)
    rec = (1 if variant == "c10" else 2) + IMAGE_BYTES
    if expected_records is not None and len(raw) != expected_records * rec:
        raise FormatError(f"{path}: expected {expected_records * rec} bytes, found {len(raw)}")
    return decode_records(raw, variant, str(path))


def to_dataset(pixels, labels, num_classes, split):
    return Dataset((pixels.astype(np.float32) / 255.0), labels, num_classes, split)


def _locate(root, dirs, names):
    root = Path(root)
    for d in dirs:
        base = root / d if d else root
        if all((base / n).is_file() for n in names):
            return [base / n for n in names]
    raise FileNotFoundError(f"CIFAR files {names} not found under {root}")


def load_cifar(path, variant="c10", split="train", strict_size=True):
    """Load a split from a directory of the official binary files, or one file.

    With ``strict_size`` every official file must hold exactly 10000
    records (50000 for the CIFAR-100 train file).
    """
    variant = _variant(variant)
    path = Path(path)
    k = 10 if variant == "c10" else 100
    if path.is_file():
        px, lab = read_cifar_file(path, variant)
        return to_dataset(px, lab, k, split)
    if variant == "c10":
        names = CIFAR10_TRAIN if split == "train" else CIFAR10_TEST
        files = _locate(path, CIFAR10_DIRS, names)
        counts = [RECORDS_PER_FILE] * len(files)
    else:
        names = CIFAR100_TRAIN if split == "train" else CIFAR100_TEST
        files = _locate(path, CIFAR100_DIRS, names)
        counts = [50000 if split == "train" else 10000]
    parts = [read_cifar_file(f, variant, c if strict_size else None) for f, c in zip(files, counts)]
    px = np.concatenate([p for p, _ in parts])
    lab = np.concatenate([l for _, l in parts])
    return to_dataset(px, lab, k, split)


def save_cifar(dataset, path, variant="c10"):
    """Write a Dataset whose pixels are exact multiples of 1/255 back to binary."""
    px = np.rint(dataset.images * 255.0)
    if px.min() < 0 or px.max() > 255:
        raise InputError("images must lie in [0, 1] to be written as CIFAR bytes")
    Path(path).write_bytes(encode_records(px.astype(np.uint8), dataset.labels, variant))


def default_data_path():
    return os.environ.get("RIRKIT_DATA")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synthetic_pixels(m, num_classes=10, seed=0):
    """Class-conditional uint8 images: a per-class colour and stripe pattern plus noise.

    Learnable but not trivial, so training sanity checks can run without
    the real dataset.
    """
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(10_000 + num_classes)
    colours = proto_rng.uniform(0.2, 0.8, size=(num_classes, 3))
    freqs = proto_rng.integers(1, 5, size=(num_classes, 2))
    phases = proto_rng.uniform(0, 2 * np.pi, size=num_classes)
    labels = np.arange(m) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    out = np.empty((m, 3, 32, 32), dtype=np.uint8)
    for i, c in enumerate(labels):
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (freqs[c, 0] * yy + freqs[c, 1] * xx) + phases[c])
        img = colours[c][:, None, None] * (0.5 + 0.5 * pattern)[None]
        img = img + rng.normal(0, 0.18, size=img.shape)
        out[i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return out, labels.astype(np.int64)


def synthetic_cifar(m, num_classes=10, seed=0, split="train"):
    px, lab = synthetic_pixels(m, num_classes, seed)
    return to_dataset(px, lab, num_classes, split)


def write_synthetic_cifar10(root, train=2000, test=500, seed=0):
    """Write a synthetic dataset in the CIFAR-10 directory layout under ``root``.

    ``train`` records are spread over the five data_batch files.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    px, lab = synthetic_pixels(train, 10, seed)
    for i, chunk in enumerate(np.array_split(np.arange(train), 5)):
        (root / CIFAR10_TRAIN[i]).write_bytes(encode_records(px[chunk], lab[chunk], "c10"))
    px, lab = synthetic_pixels(test, 10, seed + 1)
    (root / CIFAR10_TEST[0]).write_bytes(encode_records(px, lab, "c10"))
    return root


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray  # [3]
    std: np.ndarray  # [3]


def channel_stats(dataset, eps=1e-8):
    x = dataset.images.astype(np.float64)
    return NormStats(x.mean(axis=(0, 2, 3)).astype(np.float32),
                     np.maximum(x.std(axis=(0, 2, 3)), eps).astype(np.float32))


def normalize(dataset, stats=None, eps=1e-8):
    """Per-channel standardization. Pass the train split's stats for the test split."""
    if stats is None:
        stats = channel_stats(dataset, eps)
    std = np.maximum(stats.std, eps)
    x = (dataset.images - stats.mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)
    return replace(dataset, images=x.astype(np.float32)), stats


def augment(image, rng, pad=4, crop=None, flip=None):
    """Pad-and-crop then horizontal flip of one [3,32,32] image.

    ``crop`` = (dy, dx) offset into the padded image and ``flip`` force the
    otherwise random choices.
    """
    c, h, w = image.shape
    if crop is None:
        crop = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad : pad + h, pad : pad + w] = image
    dy, dx = crop
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images, rng, pad=4):
    """Vectorized :func:`augment` over a batch; draws offsets then flips."""
    n, c, h, w = images.shape
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = images
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# ---------------------------------------------------------------------------
# subsetting and batching
# ---------------------------------------------------------------------------

def subset_indices(labels, n, num_classes, seed):
    """Class-stratified sample of ``n`` indices (sorted), deterministic per seed."""
    labels = np.asarray(labels)
    if n > len(labels):
        raise IndexError(f"cannot take {n} items from a dataset of {len(labels)}")
    rng = np.random.default_rng(seed)
    base, extra = divmod(n, num_classes)
    extra_classes = set(rng.permutation(num_classes)[:extra].tolist())
    picks = []
    for k in range(num_classes):
        want = base + (k in extra_classes)
        pool = np.flatnonzero(labels == k)
        if want > len(pool):
            raise IndexError(f"class {k} has only {len(pool)} items, {want} requested")
        picks.append(rng.permutation(pool)[:want])
    return np.sort(np.concatenate(picks))


def subset(dataset, n, seed=0):
    return dataset.take(subset_indices(dataset.labels, n, dataset.num_classes, seed))


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    epoch: int = 1
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")


def epoch_order(m, plan):
    """Sample order for one epoch: a pure function of (seed, epoch, m)."""
    if not plan.shuffle:
        return np.arange(m)
    rng = np.random.default_rng([plan.seed, plan.epoch, m])
    return rng.permutation(m)


def batches(dataset, plan):
    """Yield ``(indices, images, labels)`` batches; the last one may be short."""
    order = epoch_order(len(dataset), plan)
    for s in range(0, len(order), plan.batch_size):
        idx = order[s : s + plan.batch_size]
        yield idx, dataset.images[idx], dataset.labels[idx]
