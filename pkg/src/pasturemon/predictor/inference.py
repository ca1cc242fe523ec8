"""Monte-Carlo dropout prediction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..hmap import write_manifest, write_sequence
from .network import Network, draw_masks
from .sequences import NormStats, denormalize, normalize


@dataclass
class PredictionResult:
    means: np.ndarray      # (horizon, M, N) mm
    variances: np.ndarray  # (horizon, M, N) mm^2, population variance over K passes
    K: int
    p: float
    seed: int | None = None
    samples: np.ndarray | None = None  # (K, horizon, M, N) when kept


def sample_streams(seed, K: int) -> list[np.random.Generator]:
    """One generator per MC sample index, independent of evaluation order."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(c) for c in ss.spawn(K)]


def population_moments(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = samples.mean(axis=0)
    if np.all(samples == samples[0]):
        # identical passes: avoid the rounding of sum / K
        mean = samples[0].copy()
    var = ((samples - mean) ** 2).mean(axis=0)
    return mean, var


def mc_predict(net: Network, inputs, K: int, p: float | None = None, seed=0, *,
               horizon: int | None = None, batch: int = 64, keep_samples: bool = False,
               stats: NormStats | None = None) -> PredictionResult:
    """K stochastic passes over ``inputs`` (alpha, M, N) in mm.

    Sample ``k`` uses the mask drawn from the k-th child stream of ``seed``, so
    any batching of the K passes gives the same aggregate.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    p = net.config.dropout if p is None else float(p)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    stats = stats or net.stats or NormStats(0.0, 1.0)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"inputs must be (alpha, M, N), got shape {x.shape}")
    dtype = next(net.parameters()).dtype
    xt = torch.as_tensor(normalize(x, stats), dtype=dtype)[None]
    rngs = sample_streams(seed, K)
    chunks = []
    with torch.no_grad():
        if p == 0.0:
            # every pass is the same deterministic pass
            one = net(xt, None, horizon=horizon).double().numpy()
            chunks.append(np.repeat(one, K, axis=0))
        for s in range(0, K if p > 0.0 else 0, batch):
            part = rngs[s:s + batch]
            masks = draw_masks(net, part, p, like=xt)
            xb = xt.expand(len(part), *xt.shape[1:])
            chunks.append(net(xb, masks, horizon=horizon).double().numpy())
    samples = denormalize(np.concatenate(chunks), stats)
    mean, var = population_moments(samples)
    return PredictionResult(mean, var, K, p, seed if isinstance(seed, int) else None,
                            samples if keep_samples else None)


def write_prediction(result: PredictionResult, out_dir) -> None:
    out = Path(out_dir)
    write_sequence(out, result.means, prefix="mean")
    write_sequence(out, result.variances, prefix="var")
    write_manifest(out / "manifest.txt", {
        "K": result.K,
        "p": result.p,
        "seed": "" if result.seed is None else result.seed,
        "variance": "population",
        "horizon": result.means.shape[0],
        "rows": result.means.shape[1],
        "cols": result.means.shape[2],
    })
