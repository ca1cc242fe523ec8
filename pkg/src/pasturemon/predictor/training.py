"""Mini-batch training with early stopping on validation loss."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .network import Network, draw_masks
from .sequences import NormStats, SequenceError, normalize, stack_samples, stats_from_samples

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    dropout: float | None = None  # None: use the network's p
    seed: int = 0


@dataclass
class TrainResult:
    net: Network
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def _tensor(a, net):
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)


def evaluate_loss(net: Network, x: torch.Tensor, y: torch.Tensor, batch_size: int = 64) -> float:
    """Deterministic (no dropout) MSE over normalized tensors."""
    total = 0.0
    with torch.no_grad():
        for s in range(0, x.shape[0], batch_size):
            pred = net(x[s:s + batch_size])
            total += float(((pred - y[s:s + batch_size]) ** 2).sum())
    return total / y.numel()


def train(net: Network, train_samples, val_samples, config: TrainConfig = TrainConfig(),
          stats: NormStats | None = None) -> TrainResult:
    """Fit ``net`` by SGD with momentum on MSE of normalized heights.

    Normalization statistics come from the training samples unless given.
    Stops after ``patience`` epochs without strict validation improvement or
    at ``max_epochs``; the best-validation parameters are loaded back.
    """
    if not train_samples or not val_samples:
        raise SequenceError("need at least one training and one validation sample")
    if config.batch_size < 1 or config.max_epochs < 1 or config.patience < 1:
        raise ValueError("batch_size, max_epochs and patience must be >= 1")
    stats = stats or stats_from_samples(train_samples)
    net.stats = stats
    xs, ys = stack_samples(train_samples)
    xv, yv = stack_samples(val_samples)
    xs, ys = _tensor(normalize(xs, stats), net), _tensor(normalize(ys, stats), net)
    xv, yv = _tensor(normalize(xv, stats), net), _tensor(normalize(yv, stats), net)
    p = net.config.dropout if config.dropout is None else config.dropout

    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(net)
    best = math.inf
    best_state = copy.deepcopy(net.state_dict())
    stagnant = 0
    n = xs.shape[0]
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[s:s + config.batch_size])
            xb, yb = xs[idx], ys[idx]
            masks = draw_masks(net, [rng] * len(idx), p, like=xb)
            opt.zero_grad()
            loss = torch.mean((net(xb, masks) - yb) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            if not all(torch.isfinite(q).all() for q in net.parameters()):
                raise TrainingDivergedError(f"non-finite parameters at epoch {epoch}")
            running += loss.item() * len(idx)
        val = evaluate_loss(net, xv, yv)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        result.train_loss.append(running / n)
        result.val_loss.append(val)
        log.info("epoch %d train %.6g val %.6g", epoch, running / n, val)
        if val < best:
            best, stagnant = val, 0
            result.best_epoch = epoch
            best_state = copy.deepcopy(net.state_dict())
        else:
            stagnant += 1
            if stagnant >= config.patience:
                result.stopped_early = True
                break
    net.load_state_dict(best_state)
    return result
