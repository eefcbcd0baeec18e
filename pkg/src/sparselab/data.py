"""Synthetically biased image-classification data.

Ten deterministic 28x28 glyph templates stand in for handwritten digits so
the whole pipeline runs without downloads; real MNIST IDX files drop in for
fidelity runs. Colorization installs a spurious color<->label correlation:
bias-aligned examples get their label's palette color, a controlled minority
(bias-conflicting) get one of the nine wrong colors. The unbiased test split
draws colors independently of labels.

Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np


class DataFormatError(ValueError):
    pass


# Ten well-separated RGB triples; index i is the designated color of label i.
PALETTE = np.array([
    [1.00, 0.15, 0.15],   # red
    [0.15, 1.00, 0.15],   # green
    [0.25, 0.35, 1.00],   # blue
    [1.00, 1.00, 0.15],   # yellow
    [1.00, 0.20, 1.00],   # magenta
    [0.15, 1.00, 1.00],   # cyan
    [1.00, 0.60, 0.10],   # orange
    [0.55, 0.15, 1.00],   # violet
    [0.45, 1.00, 0.45],   # light green
    [1.00, 1.00, 1.00],   # white
], dtype=np.float32)


@dataclass
class GroupedExample:
    image: np.ndarray      # [3,H,W] float32 in [0,1]
    label: int             # class index 0-9
    bias_attr: int         # color index 0-9
    group: str             # "aligned" | "conflicting"


class BiasedDataset:
    """Struct-of-arrays container; indexing yields a GroupedExample."""

    def __init__(self, images, labels, colors):
        if not (len(images) == len(labels) == len(colors)):
            raise DataFormatError("images, labels and colors must align")
        self.images = images
        self.labels = labels
        self.colors = colors
        self.aligned = colors == labels

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return GroupedExample(self.images[i], int(self.labels[i]),
                              int(self.colors[i]),
                              "aligned" if self.aligned[i] else "conflicting")

    @property
    def n_conflicting(self):
        return int(np.count_nonzero(~self.aligned))


@dataclass
class BiasedDatasetSpec:
    source: str = "synthetic_glyphs"     # or "idx_files"
    n_train: int = 10000
    n_test: int = 2000
    conflict_ratio: float = 0.01
    seed: int = 0
    idx_dir: Optional[str] = None        # directory with MNIST-style IDX files


# -- IDX ingestion ----------------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic, ndim):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 * (1 + ndim):
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{got:08x} at byte 0 (expected 0x{magic:08x})")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    offset = 4 + 4 * ndim
    size = int(np.prod(dims))
    if len(raw) - offset != size:
        raise DataFormatError(
            f"{path}: payload is {len(raw) - offset} bytes at offset {offset}, "
            f"expected {size} for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair as ([N,28,28] floats in [0,1], [N] ints)."""
    images = _read_idx(images_path, _IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, _IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return (images.astype(np.float32) / 255.0), labels.astype(np.int64)


# -- glyph synthesis --------------------------------------------------------

def _glyph_templates():
    """Ten hand-drawn 28x28 stroke patterns, one per class."""
    t = np.zeros((10, 28, 28), dtype=np.float32)

    def hbar(img, r, c0=6, c1=22, w=3):
        img[r:r + w, c0:c1] = 1.0

    def vbar(img, c, r0=5, r1=23, w=3):
        img[r0:r1, c:c + w] = 1.0

    def diag(img, down=True, w=2):
        for i in range(5, 23):
            c = i if down else 27 - i
            img[i, max(0, c - w):c + w] = 1.0

    # 0: rectangle outline
    hbar(t[0], 5); hbar(t[0], 20); vbar(t[0], 6, 5, 23); vbar(t[0], 19, 5, 23)
    # 1: single vertical bar
    vbar(t[1], 13)
    # 2: top bar, falling diagonal, bottom bar
    hbar(t[2], 5); diag(t[2], down=True); hbar(t[2], 20)
    # 3: three horizontal bars joined on the right
    hbar(t[3], 5); hbar(t[3], 12); hbar(t[3], 20); vbar(t[3], 19, 5, 23)
    # 4: left half-height bar, middle bar, full right bar
    vbar(t[4], 6, 5, 14); hbar(t[4], 12); vbar(t[4], 19, 5, 23)
    # 5: top bar, left upper bar, middle bar, right lower bar, bottom bar
    hbar(t[5], 5); vbar(t[5], 6, 5, 14); hbar(t[5], 12); vbar(t[5], 19, 12, 23)
    hbar(t[5], 20)
    # 6: like 5 with a full left bar
    hbar(t[6], 5); vbar(t[6], 6, 5, 23); hbar(t[6], 12); vbar(t[6], 19, 12, 23)
    hbar(t[6], 20)
    # 7: top bar and rising diagonal
    hbar(t[7], 5); diag(t[7], down=False)
    # 8: rectangle outline plus middle bar
    hbar(t[8], 5); hbar(t[8], 12); hbar(t[8], 20)
    vbar(t[8], 6, 5, 23); vbar(t[8], 19, 5, 23)
    # 9: rectangle top half plus full right bar
    hbar(t[9], 5); hbar(t[9], 12); vbar(t[9], 6, 5, 14); vbar(t[9], 19, 5, 23)
    return t


_TEMPLATES = None


def glyph_templates():
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = _glyph_templates()
    return _TEMPLATES.copy()


def synth_glyphs(n_per_class, seed, jitter=2, noise_sigma=0.05):
    """Render n_per_class jittered noisy samples of each glyph class.

    Each sample is its class template shifted by up to ``jitter`` pixels in
    each direction with N(0, noise_sigma) pixel noise, clamped to [0,1].
    Returns (images [10*n,28,28] float32, labels [10*n] int64), class-major.
    """
    if n_per_class < 1:
        raise DataFormatError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    templates = glyph_templates()
    n = 10 * n_per_class
    images = np.empty((n, 28, 28), dtype=np.float32)
    labels = np.repeat(np.arange(10, dtype=np.int64), n_per_class)
    for i in range(n):
        base = templates[labels[i]]
        if jitter:
            dy, dx = rng.integers(-jitter, jitter + 1, size=2)
            img = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
        else:
            img = base.copy()
        if noise_sigma:
            img = img + rng.normal(0.0, noise_sigma, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


# -- colorization -----------------------------------------------------------

def _paint(gray, color_indices):
    """Color foreground pixels (> 0.1) with palette colors over black."""
    n = len(gray)
    fg = gray > 0.1
    out = np.zeros((n, 3, 28, 28), dtype=np.float32)
    colored = gray[:, None, :, :] * PALETTE[color_indices][:, :, None, None]
    out[:] = np.where(fg[:, None, :, :], colored, 0.0)
    return out


def colorize(gray, labels, conflict_ratio, seed) -> BiasedDataset:
    """Install the color<->label correlation with an exact conflicting count.

    Exactly round(conflict_ratio * N) examples, chosen uniformly, receive a
    color drawn uniformly from the nine non-corresponding palette entries;
    the rest get their label's color.
    """
    if not 0.0 < conflict_ratio < 1.0:
        raise DataFormatError(f"conflict_ratio must be in (0,1), got {conflict_ratio}")
    n = len(gray)
    k = int(round(conflict_ratio * n))
    if k == 0:
        raise DataFormatError(
            f"conflict_ratio {conflict_ratio} on {n} examples rounds to zero "
            f"conflicting examples")
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.int64)
    colors = labels.copy()
    conflict_idx = rng.choice(n, size=k, replace=False)
    offsets = rng.integers(0, 9, size=k)
    wrong = np.where(offsets < labels[conflict_idx], offsets, offsets + 1)
    colors[conflict_idx] = wrong
    return BiasedDataset(_paint(gray, colors), labels, colors)


def make_unbiased_test(gray, labels, seed) -> BiasedDataset:
    """Color each example uniformly at random, independent of its label."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=np.int64)
    colors = rng.integers(0, 10, size=len(gray), dtype=np.int64)
    return BiasedDataset(_paint(gray, colors), labels, colors)


# -- dataset assembly -------------------------------------------------------

_IDX_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def build_dataset(spec: BiasedDatasetSpec):
    """Materialize (biased train split, unbiased test split) from a spec."""
    ss = np.random.SeedSequence(spec.seed)
    s_train_gray, s_train_col, s_test_gray, s_test_col = ss.spawn(4)

    if spec.source == "synthetic_glyphs":
        for name, count in (("n_train", spec.n_train), ("n_test", spec.n_test)):
            if count % 10:
                raise DataFormatError(
                    f"{name}={count} must be divisible by 10 for the glyph source")
        train_gray, train_labels = synth_glyphs(
            spec.n_train // 10, np.random.default_rng(s_train_gray).integers(2**31))
        test_gray, test_labels = synth_glyphs(
            spec.n_test // 10, np.random.default_rng(s_test_gray).integers(2**31))
    elif spec.source == "idx_files":
        if not spec.idx_dir:
            raise DataFormatError("idx_files source requires idx_dir")
        import os
        paths = [os.path.join(spec.idx_dir, n) for n in _IDX_NAMES]
        all_train, all_train_labels = load_idx(paths[0], paths[1])
        all_test, all_test_labels = load_idx(paths[2], paths[3])
        if spec.n_train > len(all_train) or spec.n_test > len(all_test):
            raise DataFormatError(
                f"requested {spec.n_train}/{spec.n_test} examples, files hold "
                f"{len(all_train)}/{len(all_test)}")
        pick_tr = np.random.default_rng(s_train_gray).permutation(len(all_train))[:spec.n_train]
        pick_te = np.random.default_rng(s_test_gray).permutation(len(all_test))[:spec.n_test]
        train_gray, train_labels = all_train[pick_tr], all_train_labels[pick_tr]
        test_gray, test_labels = all_test[pick_te], all_test_labels[pick_te]
    else:
        raise DataFormatError(f"unknown data source {spec.source!r}")

    train = colorize(train_gray, train_labels, spec.conflict_ratio,
                     np.random.default_rng(s_train_col).integers(2**31))
    test = make_unbiased_test(test_gray, test_labels,
                              np.random.default_rng(s_test_col).integers(2**31))
    return train, test


# -- binary blob export ------------------------------------------------------

def save_dataset(ds: BiasedDataset, path):
    """Write a dataset blob: <u4 N,H,W header, f32-LE images, u8 labels, u8 colors."""
    n = len(ds)
    h, w = ds.images.shape[2], ds.images.shape[3]
    with open(path, "wb") as f:
        f.write(struct.pack("<III", n, h, w))
        f.write(ds.images.astype("<f4").tobytes())
        f.write(ds.labels.astype(np.uint8).tobytes())
        f.write(ds.colors.astype(np.uint8).tobytes())


def load_dataset(path) -> BiasedDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise DataFormatError(f"{path}: truncated header")
    n, h, w = struct.unpack("<III", raw[:12])
    img_bytes = n * 3 * h * w * 4
    expected = 12 + img_bytes + 2 * n
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    images = np.frombuffer(raw, dtype="<f4", count=n * 3 * h * w, offset=12)
    images = images.reshape(n, 3, h, w).copy()
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=12 + img_bytes)
    colors = np.frombuffer(raw, dtype=np.uint8, count=n, offset=12 + img_bytes + n)
    return BiasedDataset(images, labels.astype(np.int64), colors.astype(np.int64))
