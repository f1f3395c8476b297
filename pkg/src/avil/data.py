"""Datasets: IDX parsing, overlaid-digit synthesis, splits, sampling, batching.

The two-task image set is built by pairing each source digit with a random
partner, placing the first in the top-left and the second in the bottom-right
of a 36x36 canvas (each offset 4 pixels diagonally from center), merging by
per-pixel max, and downscaling to 28x28 with bilinear interpolation. Task
"tl" classifies the top-left digit, task "br" the bottom-right one.

Every sampling operation is a pure function of (data, seed, epoch[, key]):
reruns reproduce byte-identical subsets and orders. Seeds and string keys
are folded into one generator seed via crc32, never python's salted hash.

A deterministic synthetic digit source (`synthetic_mnist`) is provided as a
configuration-visible alternative for environments without the standard IDX
files; it renders seeded glyphs with random affine + elastic deformation,
blur and contrast jitter so that classifier accuracies land in the same
regime as on handwritten digits.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

TASK_TOP_LEFT = "tl"
TASK_BOTTOM_RIGHT = "br"
CACHE_MAGIC = b"MM01"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX input; message carries the byte offset of the problem."""


class ConfigError(ValueError):
    pass


@dataclass
class MultiMnistSet:
    """Images [n,1,28,28] in [0,1] with one class-label vector per task."""

    images: np.ndarray
    labels: dict
    split: str

    def __post_init__(self):
        assert self.images.ndim == 4 and self.images.shape[1] == 1, self.images.shape
        for task, y in self.labels.items():
            assert y.shape == (len(self.images),), (task, y.shape)

    def __len__(self):
        return self.images.shape[0]

    @property
    def tasks(self):
        return sorted(self.labels)

    def take(self, indices, split=None):
        indices = np.asarray(indices)
        return MultiMnistSet(
            images=self.images[indices],
            labels={t: y[indices] for t, y in self.labels.items()},
            split=self.split if split is None else split,
        )


def _rng(seed, *keys):
    """Deterministic generator keyed by a seed plus int/str components."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(entropy)


# ---------------------------------------------------------------------------
# IDX files


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count, path, offset):
    data = fh.read(count)
    if len(data) != count:
        raise IdxFormatError(
            f"{path}: truncated at offset {offset + len(data)} (wanted {count} bytes, got {len(data)})"
        )
    return data


def load_idx(images_path, labels_path):
    """Parse a big-endian IDX image/label file pair.

    Returns (images [n,28,28] float32 scaled to [0,1], labels [n] int64).
    Raises IdxFormatError on bad magic, truncation, or an image/label count
    mismatch.
    """
    with _open_maybe_gzip(images_path) as fh:
        header = _read_exact(fh, 16, images_path, 0)
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        raw = _read_exact(fh, n * rows * cols, images_path, 16)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    with _open_maybe_gzip(labels_path) as fh:
        header = _read_exact(fh, 8, labels_path, 0)
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        raw = _read_exact(fh, n_labels, labels_path, 8)
        labels = np.frombuffer(raw, dtype=np.uint8)
    if n != n_labels:
        raise IdxFormatError(
            f"{images_path} has {n} images but {labels_path} has {n_labels} labels"
        )
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def find_idx_pair(directory, prefix):
    """Locate `<prefix>-images-idx3-ubyte[.gz]` and the matching label file."""
    from pathlib import Path

    directory = Path(directory)
    pair = []
    for kind, code in (("images", "idx3"), ("labels", "idx1")):
        stem = f"{prefix}-{kind}-{code}-ubyte"
        for candidate in (directory / stem, directory / (stem + ".gz")):
            if candidate.exists():
                pair.append(candidate)
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] under {directory}")
    return tuple(pair)


# ---------------------------------------------------------------------------
# overlaid-digit synthesis

CANVAS = 36
SHIFT = 8  # top-left digit at +0, bottom-right at +8: both 4 px off center


def overlay_pair(top_left, bottom_right):
    """36x36 canvas: shifted digits merged by per-pixel max."""
    canvas = np.zeros((CANVAS, CANVAS), dtype=np.float32)
    canvas[:28, :28] = top_left
    np.maximum(canvas[SHIFT:, SHIFT:], bottom_right, out=canvas[SHIFT:, SHIFT:])
    return canvas


def bilinear_resize(batch, out_h, out_w):
    """Bilinear resample of [n,h,w] image batch (pixel-center alignment)."""
    n, h, w = batch.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(batch.dtype)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(batch.dtype)
    top = batch[:, y0][:, :, x0] * (1 - wx) + batch[:, y0][:, :, x1] * wx
    bot = batch[:, y1][:, :, x0] * (1 - wx) + batch[:, y1][:, :, x1] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def make_multimnist(images, labels, pair_seed, split):
    """Overlay each digit with a uniformly drawn partner (never itself).

    ``images`` is [n,28,28] in [0,1]; the result keeps index order, labelled
    (label[i], label[partner(i)]) for the tl/br tasks. Deterministic under
    ``pair_seed`` (keyed by split so train/test pairings differ).
    """
    images = np.asarray(images, dtype=np.float32)
    n = images.shape[0]
    if n == 0:
        raise ConfigError("cannot build an overlay set from an empty source")
    if images.shape[1:] != (28, 28):
        raise ConfigError(f"source digits must be 28x28, got {images.shape[1:]}")
    rng = _rng(pair_seed, "pair", split)
    if n == 1:
        partner = np.zeros(1, dtype=np.int64)  # degenerate: self-pairing unavoidable
    else:
        partner = rng.integers(0, n - 1, size=n)
        partner = partner + (partner >= np.arange(n))
    out = np.empty((n, 1, 28, 28), dtype=np.float32)
    chunk = 4096
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        canvas = np.zeros((hi - lo, CANVAS, CANVAS), dtype=np.float32)
        canvas[:, :28, :28] = images[lo:hi]
        np.maximum(canvas[:, SHIFT:, SHIFT:], images[partner[lo:hi]], out=canvas[:, SHIFT:, SHIFT:])
        out[lo:hi, 0] = bilinear_resize(canvas, 28, 28)
    return MultiMnistSet(
        images=out,
        labels={
            TASK_TOP_LEFT: np.asarray(labels, dtype=np.int64).copy(),
            TASK_BOTTOM_RIGHT: np.asarray(labels, dtype=np.int64)[partner],
        },
        split=split,
    )


# ---------------------------------------------------------------------------
# splits, sampling, batching


def split_dev(train, dev_size, seed):
    """Disjoint (train', dev) split, deterministic under seed."""
    n = len(train)
    if not 0 < dev_size < n:
        raise ConfigError(f"dev_size {dev_size} must be in (0, {n})")
    perm = _rng(seed, "devsplit").permutation(n)
    dev_idx = np.sort(perm[:dev_size])
    train_idx = np.sort(perm[dev_size:])
    return train.take(train_idx, split="train"), train.take(dev_idx, split="dev")


def sample_fraction(dataset, rho, seed, epoch, key=""):
    """floor(rho*n) indices without replacement, keyed by (seed, epoch, key).

    Each epoch (and each key, typically a task id) draws a fresh subset;
    rho=1 yields the full index range in shuffled order.
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    n = len(dataset)
    k = int(np.floor(rho * n))
    return _rng(seed, "sample", epoch, key).permutation(n)[:k]


def batches(dataset, batch_size, seed, epoch):
    """Index arrays for one shuffled pass; all full-size except possibly the last."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    perm = _rng(seed, "batches", epoch).permutation(len(dataset))
    return chunk_indices(perm, batch_size)


def chunk_indices(order, batch_size):
    order = np.asarray(order)
    return [order[lo : lo + batch_size] for lo in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# on-disk cache for generated sets


def save_cache(dataset, path):
    """Write magic 'MM01', n u64, f32 LE images, then tl/br label bytes."""
    tl = dataset.labels[TASK_TOP_LEFT]
    br = dataset.labels[TASK_BOTTOM_RIGHT]
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(dataset)))
        fh.write(dataset.images.astype("<f4").tobytes())
        fh.write(tl.astype(np.uint8).tobytes())
        fh.write(br.astype(np.uint8).tobytes())


def load_cache(path, split):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise IdxFormatError(f"{path}: bad cache magic {magic!r} at offset 0")
        (n,) = struct.unpack("<Q", fh.read(8))
        raw = _read_exact(fh, n * 28 * 28 * 4, path, 12)
        images = np.frombuffer(raw, dtype="<f4").reshape(n, 1, 28, 28).copy()
        tl = np.frombuffer(_read_exact(fh, n, path, 12 + len(raw)), dtype=np.uint8).astype(np.int64)
        br = np.frombuffer(_read_exact(fh, n, path, 12 + len(raw) + n), dtype=np.uint8).astype(np.int64)
    return MultiMnistSet(images=images, labels={TASK_TOP_LEFT: tl, TASK_BOTTOM_RIGHT: br}, split=split)


def cache_name(split, pair_seed):
    return f"multimnist_{split}_p{pair_seed}.mm01"


# ---------------------------------------------------------------------------
# synthetic digit source

_GLYPHS = {
    0: ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


@lru_cache(maxsize=1)
def _digit_templates():
    """28x28 float templates: coarse glyphs smoothly upscaled and centered."""
    templates = np.zeros((10, 28, 28), dtype=np.float64)
    for digit, rows in _GLYPHS.items():
        bitmap = np.array([[float(c) for c in row] for row in rows])
        tall = bilinear_resize(bitmap[None].astype(np.float32), 21, 15)[0]
        templates[digit, 3:24, 6:21] = np.clip(tall * 1.6, 0.0, 1.0)
    return templates


def synthetic_mnist(n, seed, distortion=1.0):
    """Seeded digit images [n,28,28] float32 in [0,1] plus labels [n].

    Each sample applies a random affine map (rotation, anisotropic scale,
    shear, translation) composed with an elastic displacement field, then
    blur and contrast jitter. ``distortion`` scales the geometric jitter:
    1.0 lands classifier accuracy in the handwritten-digit regime, smaller
    values give an easier, faster-converging task (used by test fixtures).
    Purely deterministic under (n, seed, distortion).
    """
    rng = _rng(seed, "synthetic")
    templates = _digit_templates()
    labels = rng.integers(0, 10, size=n)
    grid = np.stack(np.meshgrid(np.arange(28.0), np.arange(28.0), indexing="ij"))
    center = 13.5
    d = float(distortion)
    images = np.empty((n, 28, 28), dtype=np.float32)
    for i in range(n):
        theta = rng.uniform(-0.22, 0.22) * d
        sy, sx = np.exp(rng.uniform(-0.18, 0.14, size=2) * d)
        shear = rng.uniform(-0.25, 0.25) * d
        ty, tx = rng.uniform(-2.0, 2.0, size=2) * d
        c, s = np.cos(theta), np.sin(theta)
        fwd = np.array([[c, -s], [s, c]]) @ np.array([[sy, shear], [0.0, sx]])
        inv = np.linalg.inv(fwd)
        rel = grid - center
        src = np.tensordot(inv, rel, axes=1) + center
        src[0] -= ty
        src[1] -= tx
        disp = rng.uniform(-1.0, 1.0, size=(2, 28, 28))
        for axis in range(2):
            disp[axis] = ndimage.gaussian_filter(disp[axis], sigma=3.0)
        src += disp * rng.uniform(18.0, 34.0) * d
        img = ndimage.map_coordinates(templates[labels[i]], src, order=1, mode="constant")
        img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.3, 0.8))
        img = np.clip(img * rng.uniform(0.75, 1.25), 0.0, 1.0)
        images[i] = img
    return images, labels.astype(np.int64)
