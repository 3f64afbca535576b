"""Seeded synthetic datasets and a flat binary import format.

Flat binary layout (little endian)::

    uint32  ndim
    uint32  dims[ndim]      per-sample shape
    uint64  count
    float64 data[count * prod(dims)]   row-major

An optional int64 label vector can be stored in a sibling file
``<name>.labels`` holding ``count`` values.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

SHAPE_CLASSES = ("hbar", "vbar", "disk", "cross", "annulus", "square")


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


class Sampler:
    """Private-PRNG stream of (samples, labels) batches."""

    def __init__(self, draw: Callable, seed):
        self._draw = draw
        self.rng = np.random.default_rng(seed)

    def sample(self, n: int) -> tuple:
        return self._draw(self.rng, n)


@dataclass
class Dataset:
    name: str
    sample_shape: tuple
    num_classes: int
    seed: int
    draw: Callable = field(repr=False)
    test_x: np.ndarray = field(repr=False, default=None)
    test_y: np.ndarray = field(repr=False, default=None)
    params: dict = field(default_factory=dict)

    def sampler(self, stream: int = 0) -> Sampler:
        """Independent training stream; ``stream`` separates runs sharing a dataset."""
        return Sampler(self.draw, [self.seed, 0, int(stream)])

    def sample(self, n: int) -> tuple:
        return self.sampler().sample(n)

    def describe(self) -> dict:
        return {"name": self.name, "seed": self.seed, **self.params}


def _finish(name, shape, k, seed, draw, n_test, params) -> Dataset:
    test_rng = np.random.default_rng([seed, 1])
    tx, ty = draw(test_rng, n_test)
    return Dataset(name, tuple(shape), k, seed, draw, tx, ty, params)


def ring_of_gaussians(modes: int = 8, radius: float = 1.0, std: float = 0.05, seed: int = 0,
                      n_test: int = 2000) -> Dataset:
    if modes < 1 or std <= 0 or radius < 0:
        raise ValueError("ring_of_gaussians needs modes >= 1, std > 0, radius >= 0")
    angles = 2 * np.pi * np.arange(modes) / modes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def draw(rng, n):
        y = _balanced_labels(rng, n, modes)
        x = centers[y] + std * rng.normal(size=(n, 2))
        return x, y

    return _finish("ring", (2,), modes, seed, draw, n_test,
                   {"modes": modes, "radius": radius, "std": std})


def _render(cls: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    w = max(r * 0.35, 0.75)
    if cls == "hbar":
        mask = (np.abs(dy) <= w) & (np.abs(dx) <= r)
    elif cls == "vbar":
        mask = (np.abs(dx) <= w) & (np.abs(dy) <= r)
    elif cls == "disk":
        mask = dx ** 2 + dy ** 2 <= r ** 2
    elif cls == "cross":
        mask = ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    elif cls == "annulus":
        d = np.sqrt(dx ** 2 + dy ** 2)
        mask = (d <= r) & (d >= r - w * 1.5)
    else:
        m = np.maximum(np.abs(dx), np.abs(dy))
        mask = (m <= r) & (m >= r - w * 1.5)
    return np.where(mask, 1.0, -1.0)


def synthetic_shapes(size: int = 16, num_classes: int = 4, seed: int = 0,
                     n_test: int = 1000, noise: float = 0.05) -> Dataset:
    """size x size x 1 images of jittered procedural shapes, one shape per class."""
    if size not in (8, 16, 32):
        raise ValueError(f"size must be one of 8, 16, 32, got {size}")
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPE_CLASSES)}]")

    def draw(rng, n):
        y = _balanced_labels(rng, n, num_classes)
        out = np.empty((n, size, size, 1))
        for i, label in enumerate(y):
            r = size * rng.uniform(0.22, 0.32)
            cx = size / 2 + rng.uniform(-1, 1) * size / 8
            cy = size / 2 + rng.uniform(-1, 1) * size / 8
            img = _render(SHAPE_CLASSES[label], size, cx, cy, r)
            out[i, :, :, 0] = img + noise * rng.normal(size=img.shape)
        return np.clip(out, -1.0, 1.0), y

    return _finish("shapes", (size, size, 1), num_classes, seed, draw, n_test,
                   {"size": size, "num_classes": num_classes})


def from_arrays(x: np.ndarray, y: Optional[np.ndarray] = None, seed: int = 0,
                test_fraction: float = 0.1, name: str = "external") -> Dataset:
    """Dataset over a fixed sample array; the test split is a seeded index partition."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    y = np.zeros(n, dtype=np.int64) if y is None else np.asarray(y, dtype=np.int64)
    perm = np.random.default_rng([seed, 2]).permutation(n)
    n_test = int(round(n * test_fraction))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if train_idx.size == 0:
        raise ValueError("no training samples left after the test split")
    train_x, train_y = x[train_idx], y[train_idx]

    def draw(rng, count):
        idx = rng.integers(0, train_x.shape[0], size=count)
        return train_x[idx], train_y[idx]

    return Dataset(name, x.shape[1:], int(y.max()) + 1 if n else 1, seed, draw,
                   x[test_idx], y[test_idx], {"count": n})


def write_flat(path: str, x: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    x = np.ascontiguousarray(x, dtype="<f8")
    dims = x.shape[1:]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<Q", x.shape[0]))
        fh.write(x.tobytes())
    if labels is not None:
        np.ascontiguousarray(labels, dtype="<i8").tofile(path + ".labels")


def read_flat(path: str) -> tuple:
    with open(path, "rb") as fh:
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        (count,) = struct.unpack("<Q", fh.read(8))
        body = fh.read()
    expected = count * int(np.prod(dims)) * 8
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(body)}")
    x = np.frombuffer(body, dtype="<f8").reshape((count,) + tuple(dims)).astype(np.float64)
    labels = None
    if os.path.exists(path + ".labels"):
        labels = np.fromfile(path + ".labels", dtype="<i8")
        if labels.shape[0] != count:
            raise ValueError(f"{path}.labels holds {labels.shape[0]} labels for {count} samples")
    return x, labels


def load_flat(path: str, seed: int = 0, test_fraction: float = 0.1) -> Dataset:
    x, labels = read_flat(path)
    ds = from_arrays(x, labels, seed, test_fraction, name=path)
    ds.params["test_fraction"] = test_fraction
    return ds


def rebuild_dataset(desc: dict) -> Dataset:
    """Inverse of :meth:`Dataset.describe` for synthetic and file-backed datasets."""
    desc = dict(desc)
    name, seed = desc.pop("name"), desc.pop("seed", 0)
    if name in ("ring", "shapes"):
        return make_dataset(name, seed, **desc)
    return load_flat(name, seed=seed, test_fraction=desc.get("test_fraction", 0.1))


def make_dataset(name: str, seed: int = 0, **kwargs) -> Dataset:
    if name == "ring":
        return ring_of_gaussians(seed=seed, **kwargs)
    if name == "shapes":
        return synthetic_shapes(seed=seed, **kwargs)
    if os.path.exists(name):
        return load_flat(name, seed=seed, **kwargs)
    raise ValueError(f"unknown dataset {name!r} (expected 'ring', 'shapes' or a flat binary path)")
