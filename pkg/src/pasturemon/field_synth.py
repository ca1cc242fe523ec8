"""Spatiotemporal pasture field synthesis from an average-height series.

A dynamic Gaussian mixture ``G_t(x, y) = sum_i w_i(t) * b_i(x, y)`` is built
from fixed Gaussian kernels whose weights drift over time as independent 1D
Gaussian-process draws.  Each map is then shifted so its spatial mean matches
the historical average height for that day, clamped at zero and perturbed with
small Gaussian noise.

Coordinates are meters, heights millimeters.  Cell ``(r, c)`` of an ``M x N``
grid over a ``width x height`` field is evaluated at its center
``((c + 0.5) * width / N, (r + 0.5) * height / M)``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hmap import write_manifest, write_sequence

log = logging.getLogger(__name__)

#: kernels smaller than this are flushed to zero (denormal avoidance)
KERNEL_FLOOR = 1e-300
GP_JITTER = 1e-10


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class HistoricalSeries:
    values: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise SynthesisError("historical series must contain at least one value")
        if not np.all(np.isfinite(vals)):
            raise SynthesisError("historical series contains non-finite values")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class BasisFunction:
    center: tuple[float, float]
    length_scale: float

    def __post_init__(self):
        if not self.length_scale > 0:
            raise SynthesisError(f"length scale must be positive, got {self.length_scale}")


# location (m), length-scale (m), initial weight
TABLE_I = (
    ((5.0, 5.0), 0.13, 4.17),
    ((3.0, 4.0), 0.13, 4.17),
    ((2.0, 1.5), 0.15, 2.50),
    ((8.0, 8.0), 0.18, 6.67),
    ((8.0, 1.5), 0.13, 3.33),
    ((1.0, 1.0), 0.13, 3.33),
    ((1.0, 9.0), 0.25, 4.17),
)


def table_i_bases(length_scale_factor: float = 1.0) -> list[BasisFunction]:
    return [BasisFunction(tuple(c), ls * length_scale_factor) for c, ls, _ in TABLE_I]


def table_i_weights() -> np.ndarray:
    return np.array([w for _, _, w in TABLE_I])


def load_historical_series(path: str | os.PathLike, start_index: int = 0) -> HistoricalSeries:
    """Read one height (mm) per line; ``#`` starts a comment."""
    values = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            v = float(line)
        except ValueError as exc:
            raise SynthesisError(f"{path}:{lineno}: cannot parse {line!r}") from exc
        if not math.isfinite(v):
            raise SynthesisError(f"{path}:{lineno}: non-finite height {line!r}")
        if v < 0:
            raise SynthesisError(f"{path}:{lineno}: negative height {v}")
        values.append(v)
    if not values:
        raise SynthesisError(f"{path}: no heights found")
    return HistoricalSeries(np.array(values), start_index)


def seasonal_series(days: int, base: float = 120.0, amplitude: float = 45.0,
                    period: float = 365.0, phase: float = 100.0) -> HistoricalSeries:
    """Smooth yearly average-height curve for demos when no simulator output exists."""
    t = np.arange(days, dtype=np.float64)
    growth = np.sin(2 * np.pi * (t - phase) / period)
    return HistoricalSeries(np.maximum(base + amplitude * growth, 0.0))


def eval_basis(b: BasisFunction, x, y):
    """Gaussian kernel value(s) in (0, 1]; works on scalars or arrays."""
    d2 = (np.asarray(x, dtype=np.float64) - b.center[0]) ** 2 + (np.asarray(y, dtype=np.float64) - b.center[1]) ** 2
    val = np.exp(-d2 / (2.0 * b.length_scale ** 2))
    val = np.where(val < KERNEL_FLOOR, 0.0, val)
    return float(val) if val.ndim == 0 else val


def cell_centers(rows: int, cols: int, width: float, height: float) -> tuple[np.ndarray, np.ndarray]:
    """Meshgrids ``(X, Y)`` of shape ``(rows, cols)`` holding cell-center coordinates."""
    xs = (np.arange(cols) + 0.5) * (width / cols)
    ys = (np.arange(rows) + 0.5) * (height / rows)
    return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class GPParams:
    """Hyperparameters of the weight-drift process.

    ``length_scale`` is in time steps; ``None`` means 10% of the horizon.
    ``variance`` may be a scalar or one value per basis; ``None`` means
    ``(0.25 * initial_weight) ** 2`` for each basis.
    """

    length_scale: float | None = None
    variance: float | Sequence[float] | None = None

    def resolve(self, horizon: int, initial_weights: np.ndarray) -> tuple[float, np.ndarray]:
        ls = 0.1 * horizon if self.length_scale is None else float(self.length_scale)
        if not ls > 0:
            raise SynthesisError(f"GP length scale must be positive, got {ls}")
        if self.variance is None:
            var = (0.25 * initial_weights) ** 2
        else:
            var = np.broadcast_to(np.asarray(self.variance, dtype=np.float64), initial_weights.shape).copy()
        if np.any(var < 0) or not np.all(np.isfinite(var)):
            raise SynthesisError("GP variance must be finite and non-negative")
        return ls, var


def _correlation_factor(horizon: int, length_scale: float) -> np.ndarray:
    t = np.arange(horizon, dtype=np.float64)
    corr = np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * length_scale ** 2))
    corr[np.diag_indices(horizon)] += GP_JITTER
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        # long horizons make the SE matrix numerically indefinite
        vals, vecs = np.linalg.eigh(corr)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_weight_trajectories(n_bases: int, horizon: int, gp: GPParams,
                               initial_weights, rng: np.random.Generator) -> np.ndarray:
    """Draw one GP weight path per basis; returns shape ``(n_bases, horizon)``."""
    if n_bases < 1 or horizon < 1:
        raise SynthesisError("need at least one basis and one time step")
    w0 = np.asarray(initial_weights, dtype=np.float64)
    if w0.shape != (n_bases,):
        raise SynthesisError(f"expected {n_bases} initial weights, got shape {w0.shape}")
    ls, var = gp.resolve(horizon, w0)
    z = rng.standard_normal((n_bases, horizon))
    factor = _correlation_factor(horizon, ls)
    paths = (factor @ z.T).T
    return w0[:, None] + np.sqrt(var)[:, None] * paths


@dataclass(frozen=True)
class DynamicField:
    bases: tuple[BasisFunction, ...]
    weights: np.ndarray  # (B, horizon)
    rows: int
    cols: int
    width: float = 10.0
    height: float = 10.0
    _basis_grid: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != len(self.bases):
            raise SynthesisError(f"weights shape {w.shape} does not match {len(self.bases)} bases")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bases", tuple(self.bases))
        X, Y = cell_centers(self.rows, self.cols, self.width, self.height)
        grid = np.stack([eval_basis(b, X, Y) for b in self.bases]) if self.bases else np.zeros((0, self.rows, self.cols))
        object.__setattr__(self, "_basis_grid", grid)

    @property
    def horizon(self) -> int:
        return self.weights.shape[1]


def eval_field(f: DynamicField, t: int) -> np.ndarray:
    if not 0 <= t < f.horizon:
        raise SynthesisError(f"time index {t} outside horizon [0, {f.horizon})")
    return np.tensordot(f.weights[:, t], f._basis_grid, axes=1)


def adjust_to_history(raw, h: HistoricalSeries) -> np.ndarray:
    """Shift every map uniformly so its mean equals the historical height."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != len(h):
        raise SynthesisError(f"{raw.shape[0] if raw.ndim == 3 else '?'} maps vs {len(h)} historical values")
    shift = h.values - raw.mean(axis=(1, 2))
    return raw + shift[:, None, None]


def truncate_and_noise(m, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    if noise_std < 0:
        raise SynthesisError("noise_std must be non-negative")
    out = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    if noise_std > 0:
        out = np.maximum(out + rng.normal(0.0, noise_std, size=out.shape), 0.0)
    return out


@dataclass(frozen=True)
class SynthConfig:
    rows: int = 100
    cols: int = 100
    width: float = 10.0
    height: float = 10.0
    bases: tuple = TABLE_I  # (center, length_scale, initial_weight) triples
    gp: GPParams = GPParams()
    noise_std: float = 2.0
    length_scale_factor: float = 1.0
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise SynthesisError("grid dimensions must be >= 1")
        if not (self.width > 0 and self.height > 0):
            raise SynthesisError("field extent must be positive")

    def basis_functions(self) -> list[BasisFunction]:
        return [BasisFunction(tuple(c), ls * self.length_scale_factor) for c, ls, _ in self.bases]

    def initial_weights(self) -> np.ndarray:
        return np.array([w for _, _, w in self.bases], dtype=np.float64) * self.weight_scale


@dataclass
class SynthResult:
    maps: np.ndarray            # (T, M, N) final dataset, >= 0
    adjusted: np.ndarray        # (T, M, N) history-matched, before truncation/noise
    field: DynamicField
    manifest: dict


def synthesize_dataset(cfg: SynthConfig, series: HistoricalSeries, seed: int) -> SynthResult:
    horizon = len(series)
    root = np.random.SeedSequence(seed)
    weight_seq, noise_seq = root.spawn(2)
    bases = cfg.basis_functions()
    w0 = cfg.initial_weights()
    weights = sample_weight_trajectories(len(bases), horizon, cfg.gp, w0, np.random.default_rng(weight_seq))
    fld = DynamicField(tuple(bases), weights, cfg.rows, cfg.cols, cfg.width, cfg.height)
    raw = np.stack([eval_field(fld, t) for t in range(horizon)])
    adjusted = adjust_to_history(raw, series)
    # one independent stream per time index so maps can be produced in any order
    streams = noise_seq.spawn(horizon)
    maps = np.stack([truncate_and_noise(adjusted[t], cfg.noise_std, np.random.default_rng(streams[t]))
                     for t in range(horizon)])
    n_clamped = int(np.count_nonzero(adjusted < 0))
    if n_clamped:
        log.info("truncated %d negative cells", n_clamped)
    ls, var = cfg.gp.resolve(horizon, w0)
    manifest = {
        "rows": cfg.rows,
        "cols": cfg.cols,
        "width_m": float(cfg.width),
        "height_m": float(cfg.height),
        "horizon": horizon,
        "series_start_index": series.start_index,
        "n_bases": len(bases),
        "basis_centers": [float(v) for b in bases for v in b.center],
        "basis_length_scales": [float(b.length_scale) for b in bases],
        "initial_weights": [float(v) for v in w0],
        "gp_kernel": "squared_exponential",
        "gp_length_scale": float(ls),
        "gp_variance": [float(v) for v in var],
        "gp_jitter": GP_JITTER,
        "noise_std": float(cfg.noise_std),
        "truncated_cells": n_clamped,
        "seed": seed,
    }
    return SynthResult(maps, adjusted, fld, manifest)


def write_dataset(result: SynthResult, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    write_sequence(out, result.maps, prefix="map")
    write_manifest(out / "manifest.txt", result.manifest)
    return out


__all__ = [
    "BasisFunction", "DynamicField", "GPParams", "HistoricalSeries", "SynthConfig", "SynthResult",
    "SynthesisError", "TABLE_I", "adjust_to_history", "cell_centers", "eval_basis", "eval_field",
    "load_historical_series", "sample_weight_trajectories", "seasonal_series", "synthesize_dataset",
    "table_i_bases", "table_i_weights", "truncate_and_noise", "write_dataset",
]
