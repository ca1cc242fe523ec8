"""Windowed input/target sequences and height normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceSample:
    inputs: np.ndarray   # (alpha, M, N)
    targets: np.ndarray  # (alpha, M, N)
    stride: int
    origin: int

    @property
    def alpha(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_index(self) -> list[int]:
        return [self.origin + j * self.stride for j in range(self.alpha)]

    @property
    def target_index(self) -> list[int]:
        a = self.alpha
        return [self.origin + (a + j) * self.stride for j in range(a)]


def sequence_origins(length: int, stride: int, alpha: int) -> range:
    if stride < 1 or alpha < 1:
        raise SequenceError(f"stride and alpha must be >= 1, got {stride}, {alpha}")
    if length < 2 * alpha * stride:
        raise SequenceError(f"dataset of length {length} too short for stride={stride}, alpha={alpha} "
                            f"(need {2 * alpha * stride})")
    # last target index is i + (2 alpha - 1) stride
    return range(0, length - (2 * alpha - 1) * stride)


def build_sequences(dataset, stride: int, alpha: int, origin_step: int = 1) -> list[SequenceSample]:
    """Cut ``dataset`` (T, M, N) into alpha-in / alpha-out samples spaced by ``stride``.

    Origin ``i`` reads inputs at ``i, i+s, ..., i+(a-1)s`` and targets at
    ``i+a*s, ..., i+(2a-1)s``.  ``origin_step`` thins the origins.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3:
        raise SequenceError(f"dataset must be (T, M, N), got shape {data.shape}")
    if origin_step < 1:
        raise SequenceError("origin_step must be >= 1")
    out = []
    for i in sequence_origins(data.shape[0], stride, alpha)[::origin_step]:
        idx = i + stride * np.arange(2 * alpha)
        out.append(SequenceSample(data[idx[:alpha]], data[idx[alpha:]], stride, i))
    return out


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise SequenceError("empty sample list")
    return np.stack([s.inputs for s in samples]), np.stack([s.targets for s in samples])


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def to_dict(self):
        return {"mean": float(self.mean), "std": float(self.std)}


def compute_stats(maps) -> NormStats:
    """Scalar mean/std over every value in ``maps``.  Zero spread falls back to unit scale."""
    arr = np.asarray(maps, dtype=np.float64)
    if arr.size == 0:
        raise SequenceError("cannot compute statistics of an empty array")
    mean = float(arr.mean())
    std = float(arr.std())
    if not std > 0:
        log.warning("zero-variance data; normalization reduces to mean subtraction")
        std = 1.0
    return NormStats(mean, std)


def stats_from_samples(samples) -> NormStats:
    x, y = stack_samples(samples)
    return compute_stats(np.concatenate([x.ravel(), y.ravel()]))


def normalize(maps, stats: NormStats) -> np.ndarray:
    return (np.asarray(maps, dtype=np.float64) - stats.mean) / stats.std


def denormalize(maps, stats: NormStats) -> np.ndarray:
    return np.asarray(maps, dtype=np.float64) * stats.std + stats.mean
