"""Small hand-built datasets shared by several test modules."""

import numpy as np

from commentaries.data import Dataset


def tiny_dataset(side: int = 4, n: int = 24, num_classes: int = 3, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    images = rng.uniform(0, 0.3, size=(n, side, side))
    for i, y in enumerate(labels):
        images[i, y % side, :] += 0.6
    inputs = images.reshape(n, side * side)
    idx = rng.permutation(n)
    a, b = n // 2, 3 * n // 4
    splits = {"train": np.sort(idx[:a]), "validation": np.sort(idx[a:b]), "test": np.sort(idx[b:])}
    meta = {"object_row": (labels % side).astype(float), "object_col": np.full(n, (side - 1) / 2)}
    return Dataset(inputs, labels, meta, splits, (1, side, side), num_classes, {})
