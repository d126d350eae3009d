"""Synthetic subset-selection datasets and their line-delimited JSON format.

Each sample is a ground set of feature vectors plus the indices of its
optimal subset. In both generators a fair coin picks one of two classes; the
optimal subset is drawn from that class and the rest of the ground set from
the other, then the items are shuffled.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1

GAUSSIAN_MEAN = np.array([1.0, 1.0]) / math.sqrt(2.0)
GAUSSIAN_STD = 0.5  # covariance I / 4
MOONS_NOISE_STD = math.sqrt(0.1)

# dataset sizes: total samples split 2:1, or a fixed train+validation / test count
PRESETS = {
    "table": {"n_samples": 1000, "train_fraction": 2.0 / 3.0},
    "appendix": {"n_train": 2000, "n_test": 1000},
}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SetSample:
    features: np.ndarray
    optimal: tuple

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be a non-empty (|V|, d_f) matrix, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain NaN or Inf")
        idx = [int(i) for i in self.optimal]
        if any(i != j for i, j in zip(idx, np.asarray(self.optimal).ravel())):
            raise ValueError("optimal indices must be integers")
        n = feats.shape[0]
        if len(set(idx)) != len(idx):
            raise ValueError("optimal indices are not unique")
        if not 1 <= len(idx) <= n or any(i < 0 or i >= n for i in idx):
            raise ValueError(f"optimal indices {idx} invalid for a ground set of {n} items")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "optimal", tuple(sorted(idx)))

    @property
    def ground_size(self) -> int:
        return self.features.shape[0]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.ground_size, dtype=bool)
        m[list(self.optimal)] = True
        return m


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    name: str = "custom"
    seed: int | None = None
    split: str = "all"
    d_f: int = field(init=False)
    ground_size: int | None = field(init=False)

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise ValueError("dataset must contain at least one sample")
        dims = {s.features.shape[1] for s in samples}
        if len(dims) != 1:
            raise ValueError(f"samples disagree on feature dimension: {sorted(dims)}")
        sizes = {s.ground_size for s in samples}
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "d_f", dims.pop())
        object.__setattr__(self, "ground_size", sizes.pop() if len(sizes) == 1 else None)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.name, self.seed, split or self.split)

    def metadata(self) -> dict:
        return {"version": FORMAT_VERSION, "name": self.name, "d_f": self.d_f,
                "ground_size": self.ground_size, "seed": self.seed, "split": self.split,
                "n_samples": len(self)}


def from_arrays(features, optimal, name="custom", split="all") -> Dataset:
    """Wrap precomputed per-set feature matrices and optimal index lists."""
    return Dataset([SetSample(f, o) for f, o in zip(features, optimal, strict=True)], name, None, split)


def _check_sizes(n_samples, ground_size, optimal_size):
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 1 <= optimal_size < ground_size:
        raise ValueError(f"need 1 <= optimal_size < ground_size, got {optimal_size} and {ground_size}")


def _assemble(rng, inside, outside):
    X = np.concatenate([inside, outside])
    perm = rng.permutation(X.shape[0])
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return SetSample(X[perm], inv[:inside.shape[0]])


def gen_gaussian(n_samples: int = 1000, ground_size: int = 100, optimal_size: int = 10,
                 seed: int = 0) -> Dataset:
    _check_sizes(n_samples, ground_size, optimal_size)
    rng = np.random.default_rng(seed)
    means = (GAUSSIAN_MEAN, -GAUSSIAN_MEAN)
    samples = []
    for _ in range(n_samples):
        c = int(rng.integers(2))
        inside = means[c] + GAUSSIAN_STD * rng.standard_normal((optimal_size, 2))
        outside = means[1 - c] + GAUSSIAN_STD * rng.standard_normal((ground_size - optimal_size, 2))
        samples.append(_assemble(rng, inside, outside))
    return Dataset(samples, "gaussian", seed)


def moon_points(rng, count: int, which: int, noise_std: float) -> np.ndarray:
    """Points on the upper unit half-circle (0) or the lower one shifted by (1, 0.5) (1)."""
    t = rng.uniform(0.0, math.pi, count)
    if which == 0:
        pts = np.stack([np.cos(t), np.sin(t)], axis=1)
    else:
        pts = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return pts + noise_std * rng.standard_normal((count, 2))


def gen_moons(n_samples: int = 1000, ground_size: int = 100, optimal_size: int = 10,
              noise_std: float = MOONS_NOISE_STD, seed: int = 0) -> Dataset:
    _check_sizes(n_samples, ground_size, optimal_size)
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        c = int(rng.integers(2))
        inside = moon_points(rng, optimal_size, c, noise_std)
        outside = moon_points(rng, ground_size - optimal_size, 1 - c, noise_std)
        samples.append(_assemble(rng, inside, outside))
    return Dataset(samples, "moons", seed)


GENERATORS = {"gaussian": gen_gaussian, "moons": gen_moons}


def train_test_split(dataset: Dataset, train_fraction: float = 2.0 / 3.0) -> tuple[Dataset, Dataset]:
    """Leading ``round(N * train_fraction)`` samples for training, the rest for testing."""
    n_train = int(round(len(dataset) * train_fraction))
    if not 0 < n_train < len(dataset):
        raise ValueError(f"split leaves an empty part ({n_train} of {len(dataset)})")
    return (dataset.subset(range(n_train), "train"),
            dataset.subset(range(n_train, len(dataset)), "test"))


# ---------------------------------------------------------------------------
# file format: one header line, then one JSON record per sample

def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(dataset.metadata()) + "\n")
        for s in dataset.samples:
            fh.write(json.dumps({"features": s.features.tolist(), "optimal": list(s.optimal)}) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:1: malformed header: {exc}") from None
    if not isinstance(meta, dict) or meta.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}:1: unsupported format version {meta.get('version') if isinstance(meta, dict) else meta!r}")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            s = SetSample(rec["features"], rec["optimal"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed record: {exc}") from None
        if s.features.shape[1] != meta.get("d_f"):
            raise DatasetFormatError(f"{path}:{lineno}: d_f {s.features.shape[1]} does not match header {meta.get('d_f')}")
        if meta.get("ground_size") is not None and s.ground_size != meta["ground_size"]:
            raise DatasetFormatError(f"{path}:{lineno}: |V| {s.ground_size} does not match header {meta['ground_size']}")
        samples.append(s)
    if "n_samples" in meta and meta["n_samples"] != len(samples):
        raise DatasetFormatError(f"{path}: header promises {meta['n_samples']} samples, found {len(samples)}")
    try:
        return Dataset(samples, meta.get("name", "custom"), meta.get("seed"), meta.get("split", "all"))
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
