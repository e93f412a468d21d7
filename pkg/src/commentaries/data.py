"""Synthetic datasets, an IDX loader, and deterministic batch sampling.

All generators are pure functions of their arguments (seeded numpy
generators); pixel values are in [0, 1] and images are flattened
channel-major into ``inputs``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

SPLITS = ("train", "validation", "test")

ROTATION_RANGES = {
    # class -> (low, high) in degrees
    "non-overlapping": {1: (15.0, 45.0), 0: (-45.0, -15.0)},
    "overlapping": {1: (-5.0, 30.0), 0: (-30.0, 5.0)},
}


class DataError(ValueError):
    pass


class EmptySplitError(DataError):
    pass


class IdxFormatError(DataError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    metadata: dict[str, np.ndarray]
    splits: dict[str, np.ndarray]
    image_shape: tuple[int, int, int]
    num_classes: int
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if self.inputs.shape[0] != n:
            raise DataError("inputs and labels differ in length")
        for key, values in self.metadata.items():
            if len(values) != n:
                raise DataError(f"metadata {key!r} has {len(values)} rows, expected {n}")
        seen: set[int] = set()
        for name, idx in self.splits.items():
            s = set(idx.tolist())
            if s & seen:
                raise DataError(f"split {name!r} overlaps another split")
            seen |= s

    @property
    def feature_dim(self) -> int:
        return self.inputs.shape[1]

    def split(self, name: str) -> "Batch":
        idx = self.splits[name]
        return Batch(self.inputs[idx], self.labels[idx], idx)

    def split_metadata(self, name: str, key: str) -> np.ndarray:
        return self.metadata[key][self.splits[name]]


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class RotatedSpec:
    mode: str = "non-overlapping"
    train: int = 2000
    validation: int = 500
    test: int = 500
    image_side: int = 16
    seed: int = 0
    jitter: float = 1.0  # max translation in pixels
    noise: float = 0.05

    def __post_init__(self):
        if self.mode not in ROTATION_RANGES:
            raise ValueError(f"unknown rotation mode {self.mode!r}")
        if min(self.train, self.validation, self.test) <= 0:
            raise ValueError("split counts must be positive")
        if self.image_side < 8:
            raise ValueError("image_side must be at least 8")


def _split_indices(counts: tuple[int, int, int]) -> dict[str, np.ndarray]:
    bounds = np.cumsum((0,) + tuple(counts))
    return {name: np.arange(bounds[i], bounds[i + 1]) for i, name in enumerate(SPLITS)}


# ---------------------------------------------------------------------------
# rotated bars


def canonical_bar(side: int) -> np.ndarray:
    """Vertical stroke centred in a side x side frame (a stand-in for digit 1)."""
    img = np.zeros((side, side))
    half_len = int(round(side * 0.32))
    mid = (side - 1) / 2.0
    top, bottom = int(np.floor(mid - half_len)) + 1, int(np.ceil(mid + half_len))
    left, right = int(np.floor(mid)), int(np.ceil(mid))
    img[top:bottom, left:right + 1] = 1.0
    return img


def render_rotated(glyph: np.ndarray, angle_deg: float, shift=(0.0, 0.0)) -> np.ndarray:
    """Rotate counter-clockwise about the frame centre with bilinear sampling."""
    h, w = glyph.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y = rr - cy - shift[0]
    x = cc - cx - shift[1]
    t = np.deg2rad(angle_deg)
    # inverse map: output pixel -> source pixel; rows point down, so a
    # counter-clockwise turn on screen sends the top of the glyph left
    src_y = np.cos(t) * y + np.sin(t) * x + cy
    src_x = -np.sin(t) * y + np.cos(t) * x + cx
    out = ndimage.map_coordinates(glyph, [src_y, src_x], order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def gen_rotated(spec: RotatedSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    counts = (spec.train, spec.validation, spec.test)
    n = sum(counts)
    labels = rng.integers(0, 2, size=n)
    ranges = ROTATION_RANGES[spec.mode]
    lo = np.where(labels == 1, ranges[1][0], ranges[0][0])
    hi = np.where(labels == 1, ranges[1][1], ranges[0][1])
    angles = rng.uniform(lo, hi)
    shifts = rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    glyph = canonical_bar(spec.image_side)
    images = np.stack([render_rotated(glyph, a, s) for a, s in zip(angles, shifts)])
    if spec.noise > 0:
        images = np.clip(images + rng.normal(0.0, spec.noise, size=images.shape), 0.0, 1.0)
    return Dataset(
        inputs=images.reshape(n, -1),
        labels=labels.astype(np.int64),
        metadata={"angle": angles, "shift_row": shifts[:, 0], "shift_col": shifts[:, 1]},
        splits=_split_indices(counts),
        image_shape=(1, spec.image_side, spec.image_side),
        num_classes=2,
        info={"kind": "rotated", "mode": spec.mode, "seed": spec.seed},
    )


# ---------------------------------------------------------------------------
# glyph library for multi-class tasks


def glyph_bank(size: int = 8) -> np.ndarray:
    """Ten distinct binary strokes on a size x size box, shape (10, size, size)."""
    s = size
    m = s // 2
    e = s - 1
    g = np.zeros((10, s, s))
    idx = np.arange(s)
    g[0, :, m - 1:m + 1] = 1                      # vertical bar
    g[1, m - 1:m + 1, :] = 1                      # horizontal bar
    g[2, idx, idx] = 1                            # diagonal
    g[2, idx[:-1], idx[1:]] = 1
    g[3, idx, e - idx] = 1                        # anti-diagonal
    g[3, idx[:-1], e - idx[1:]] = 1
    g[4, :, m - 1:m + 1] = 1                      # plus
    g[4, m - 1:m + 1, :] = 1
    g[5, 0, :] = g[5, e, :] = g[5, :, 0] = g[5, :, e] = 1   # ring
    g[6, :, 0:2] = 1                              # L
    g[6, e - 1:, :] = 1
    g[7, 0:2, :] = 1                              # T
    g[7, :, m - 1:m + 1] = 1
    g[8, idx, idx] = 1                            # X
    g[8, idx, e - idx] = 1
    g[9, 0:2, :] = 1                              # U / cup
    g[9, :, 0:2] = g[9, :, e - 1:] = 1
    g[9, 0:2, 2:e - 1] = 0
    g[9, e - 1:, :] = 1
    return g


def gen_two_object(
    counts=(2000, 500, 500),
    image_side: int = 32,
    seed: int = 0,
    num_classes: int = 10,
    glyph_size: int = 8,
) -> Dataset:
    """Red and blue glyphs in two different quadrants; the red glyph sets the label.

    Channel 0 is red, channel 1 is blue. Metadata holds both object centres
    (row, col), their quadrants and the blue glyph's class.
    """
    if image_side % 2:
        raise ValueError("image_side must be even")
    q = image_side // 2
    if glyph_size > q:
        raise ValueError("glyph does not fit in a quadrant")
    if not 2 <= num_classes <= 10:
        raise ValueError("num_classes must be in [2, 10]")
    bank = glyph_bank(glyph_size)
    rng = np.random.default_rng(seed)
    n = sum(counts)
    images = np.zeros((n, 2, image_side, image_side))
    red_cls = rng.integers(0, num_classes, size=n)
    blue_cls = (red_cls + rng.integers(1, num_classes, size=n)) % num_classes
    quads = np.array([rng.choice(4, size=2, replace=False) for _ in range(n)])
    offsets = rng.integers(0, q - glyph_size + 1, size=(n, 2, 2))
    centers = np.zeros((n, 2, 2))
    for i in range(n):
        for ch, cls in ((0, red_cls[i]), (1, blue_cls[i])):
            quad = quads[i, ch]
            r0 = (quad // 2) * q + offsets[i, ch, 0]
            c0 = (quad % 2) * q + offsets[i, ch, 1]
            images[i, ch, r0:r0 + glyph_size, c0:c0 + glyph_size] = bank[cls]
            centers[i, ch] = (r0 + (glyph_size - 1) / 2.0, c0 + (glyph_size - 1) / 2.0)
    return Dataset(
        inputs=images.reshape(n, -1),
        labels=red_cls.astype(np.int64),
        metadata={
            "red_row": centers[:, 0, 0],
            "red_col": centers[:, 0, 1],
            "blue_row": centers[:, 1, 0],
            "blue_col": centers[:, 1, 1],
            "red_quadrant": quads[:, 0],
            "blue_quadrant": quads[:, 1],
            "blue_label": blue_cls,
        },
        splits=_split_indices(tuple(counts)),
        image_shape=(2, image_side, image_side),
        num_classes=num_classes,
        info={"kind": "two_object", "seed": seed, "glyph_size": glyph_size},
    )


# ---------------------------------------------------------------------------
# spurious backgrounds


def derangement(n: int, rng) -> np.ndarray:
    """Uniform permutation of range(n) with no fixed points (n >= 2)."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


def background_textures(num: int, side: int, seed: int, amplitude: float = 0.5) -> np.ndarray:
    """Smooth fixed-seed noise fields scaled to [0, amplitude], one per background class."""
    rng = np.random.default_rng([seed, 7919])
    out = np.empty((num, side, side))
    for k in range(num):
        field_ = ndimage.gaussian_filter(rng.normal(size=(side, side)), sigma=side / 8.0, mode="wrap")
        field_ -= field_.min()
        out[k] = amplitude * field_ / max(field_.max(), 1e-12)
    return out


def gen_spurious_background(
    counts=(2000, 500, 500),
    image_side: int = 16,
    num_classes: int = 4,
    seed: int = 0,
    glyph_size: int = 6,
    background_amplitude: float = 0.5,
    noise: float = 0.05,
) -> Dataset:
    """A label-setting glyph composited over a class-correlated background.

    Train and validation use ``mapping[label]`` as the background; the test
    split uses ``mapping[derangement[label]]`` so the correlation is broken.
    """
    if num_classes < 2 or num_classes > 10:
        raise ValueError("num_classes must be in [2, 10]")
    rng = np.random.default_rng(seed)
    mapping = rng.permutation(num_classes)
    shift = derangement(num_classes, rng)
    test_mapping = mapping[shift]
    textures = background_textures(num_classes, image_side, seed, background_amplitude)
    bank = glyph_bank(glyph_size)
    n = sum(counts)
    splits = _split_indices(tuple(counts))
    labels = rng.integers(0, num_classes, size=n)
    bg = mapping[labels]
    bg[splits["test"]] = test_mapping[labels[splits["test"]]]
    pos = rng.integers(0, image_side - glyph_size + 1, size=(n, 2))
    images = textures[bg] + rng.normal(0.0, noise, size=(n, image_side, image_side))
    for i in range(n):
        r, c = pos[i]
        patch = images[i, r:r + glyph_size, c:c + glyph_size]
        g = bank[labels[i]]
        images[i, r:r + glyph_size, c:c + glyph_size] = g + (1.0 - g) * patch
    images = np.clip(images, 0.0, 1.0)
    center = pos + (glyph_size - 1) / 2.0
    return Dataset(
        inputs=images.reshape(n, -1),
        labels=labels.astype(np.int64),
        metadata={"background": bg, "object_row": center[:, 0], "object_col": center[:, 1]},
        splits=splits,
        image_shape=(1, image_side, image_side),
        num_classes=num_classes,
        info={"kind": "spurious", "seed": seed, "mapping": mapping.tolist(),
              "test_mapping": test_mapping.tolist()},
    )


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split_fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Read big-endian IDX image (0x00000803) and label (0x00000801) files."""
    images = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    n, h, w = images.shape
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(split_fractions[0] * n))
    n_val = int(round(split_fractions[1] * n))
    splits = {
        "train": np.sort(order[:n_train]),
        "validation": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }
    return Dataset(
        inputs=images.reshape(n, h * w).astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        metadata={},
        splits=splits,
        image_shape=(1, h, w),
        num_classes=10,
        info={"kind": "idx", "images": str(images_path), "labels": str(labels_path)},
    )


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX layout (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ---------------------------------------------------------------------------
# sampling


def batch_sampler(dataset: Dataset, split: str, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless stream of batches; each epoch is a fresh seeded permutation."""
    idx = dataset.splits.get(split)
    if idx is None or len(idx) == 0:
        raise EmptySplitError(f"split {split!r} is empty")
    if not 0 < batch_size <= len(idx):
        raise DataError(f"batch size {batch_size} invalid for split of {len(idx)}")
    rng = np.random.default_rng(seed)
    while True:
        perm = idx[rng.permutation(len(idx))]
        for start in range(0, len(perm) - batch_size + 1, batch_size):
            sel = perm[start:start + batch_size]
            yield Batch(dataset.inputs[sel], dataset.labels[sel], sel)
        rem = len(perm) % batch_size
        if rem:
            sel = perm[len(perm) - rem:]
            yield Batch(dataset.inputs[sel], dataset.labels[sel], sel)
