"""Synthetic desk-scale datasets and a CSV loader.

Generative formulas (all points jittered by isotropic N(0, noise^2)):

* ``two_moons``  class 0: (cos u, sin u); class 1: (1 - cos u, 0.5 - sin u); u ~ U[0, pi]
* ``gauss_blobs`` class j centred at ``separation * (cos 2 pi j / k, sin 2 pi j / k, 0, ...)``
* ``rings``      class j on the circle of radius j + 1 at a uniform angle

For ``two_moons`` and ``rings`` with ``dim > 2`` the extra coordinates carry
jitter only.

Class sizes differ by at most one. Train and test are disjoint slices of one
seeded permutation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .._seeding import mix_seed

__all__ = ["DATASETS", "DatasetSpec", "Dataset", "generate_dataset", "load_csv"]

DATASETS = ("two_moons", "gauss_blobs", "rings", "tabular_csv")


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "two_moons"
    n_train: int = 256
    n_test: int = 256
    noise: float = 0.1
    seed: int = 0
    n_classes: int = 2
    dim: int = 2
    separation: float = 4.0
    path: str | None = None
    label_column: int = -1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass(frozen=True)
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int
    noise: float

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def _class_sizes(n: int, k: int) -> np.ndarray:
    return np.array([n // k + (j < n % k) for j in range(k)])


def _two_moons(rng, sizes, noise, dim):
    xs = []
    for j, m in enumerate(sizes):
        u = rng.uniform(0.0, np.pi, m)
        if j == 0:
            pts = np.stack([np.cos(u), np.sin(u)], axis=1)
        else:
            pts = np.stack([1.0 - np.cos(u), 0.5 - np.sin(u)], axis=1)
        xs.append(pts)
    return xs


def _blobs(rng, sizes, separation, dim):
    k = len(sizes)
    xs = []
    for j, m in enumerate(sizes):
        centre = np.zeros(dim)
        centre[0] = separation * np.cos(2 * np.pi * j / k)
        if dim > 1:
            centre[1] = separation * np.sin(2 * np.pi * j / k)
        xs.append(np.broadcast_to(centre, (m, dim)).copy())
    return xs


def _rings(rng, sizes):
    xs = []
    for j, m in enumerate(sizes):
        a = rng.uniform(0.0, 2 * np.pi, m)
        xs.append((j + 1.0) * np.stack([np.cos(a), np.sin(a)], axis=1))
    return xs


def load_csv(path: str, label_column: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV with a header row; labels are mapped to 0..k-1 in sorted order."""
    raw = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    raw = np.atleast_2d(raw)
    labels = raw[:, label_column]
    x = np.delete(raw, label_column % raw.shape[1], axis=1)
    _, y = np.unique(labels, return_inverse=True)
    return x, y.astype(int)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    if spec.name not in DATASETS:
        raise ValueError(f"unknown dataset {spec.name!r}; choose from {DATASETS}")
    if spec.dim < 1 or (spec.name in ("two_moons", "rings") and spec.dim < 2):
        raise ValueError("dim must be >= 2 for two_moons and rings, >= 1 otherwise")
    if spec.noise < 0:
        raise ValueError("noise must be >= 0")
    k = spec.n_classes
    if spec.name == "two_moons":
        k = 2
    if k < 2:
        raise ValueError("need at least 2 classes")
    if spec.n_train < k or spec.n_test < k:
        raise ValueError(f"n_train and n_test must each be >= {k} for {k} classes")
    rng = np.random.default_rng(mix_seed(spec.seed, "data", spec.name))
    n = spec.n_train + spec.n_test
    if spec.name == "tabular_csv":
        if spec.path is None:
            raise ValueError("tabular_csv needs a path")
        x, y = load_csv(spec.path, spec.label_column)
        if len(y) < n:
            raise ValueError(f"CSV has {len(y)} rows, {n} requested")
        perm = rng.permutation(len(y))[:n]
        x, y = x[perm], y[perm]
    else:
        sizes = _class_sizes(n, k)
        if spec.name == "two_moons":
            parts = _two_moons(rng, sizes, spec.noise, spec.dim)
        elif spec.name == "gauss_blobs":
            parts = _blobs(rng, sizes, spec.separation, spec.dim)
        else:
            parts = _rings(rng, sizes)
        x = np.concatenate(parts)
        if x.shape[1] < spec.dim:
            x = np.pad(x, ((0, 0), (0, spec.dim - x.shape[1])))
        y = np.concatenate([np.full(m, j) for j, m in enumerate(sizes)])
        x = x + rng.normal(0.0, spec.noise, x.shape)
        perm = rng.permutation(n)
        x, y = x[perm], y[perm]
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    return Dataset(
        spec.name,
        x[: spec.n_train].copy(),
        y[: spec.n_train].copy(),
        x[spec.n_train :].copy(),
        y[spec.n_train :].copy(),
        spec.seed,
        spec.noise,
    )
