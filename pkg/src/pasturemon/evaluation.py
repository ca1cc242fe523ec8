"""Prediction metrics, baseline deployment policies and the comparison harness.

A comparison trial runs on a synthesized test year:

1. an input window of ``alpha`` maps at times ``o, o + delta, ...`` is fed to
   the predictor, giving means and variances for the next ``horizon`` steps;
2. each method (greedy intermittent planner, fixed-interval heuristic,
   uniform random) builds a policy over those steps and is scored by the
   deployment objective;
3. robots measure the true field at the planned factors (with noise), the
   measurements overwrite their cells in the most recent map of the predicted
   window, and the corrected window is used to predict ``repredict`` further
   steps;
4. the mean absolute error of that re-prediction against the truth is
   recorded per method, next to a ``no_update`` row that uses the
   uncorrected window.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .planner import (BudgetConstraint, Factor, GroundSet, PlannerWeights, Policy, check_variances,
                      greedy_plan, is_independent, objective_terms, write_policy)

log = logging.getLogger(__name__)

MAPE_EPS = 1e-6
METHODS = ("intermittent", "heuristic", "random")
CSV_FIELDS = ("trial", "method", "f_value", "uncertainty_term", "wait_penalty", "mean_pred_error_mm")


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- metrics

@dataclass
class MetricReport:
    rmse: float
    mae: float
    mape: float
    astd: float | None
    per_step: dict = field(default_factory=dict)  # name -> (T,) per-step values, cell and instance averaged
    H: int = 0
    mape_skipped: int = 0


def _as_instances(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise EvaluationError(f"{name} must be (H, T, M, N) or (T, M, N), got shape {a.shape}")
    return a


def metrics(truth, means, variances=None) -> MetricReport:
    """RMSE, MAE, MAPE (%) and ASTD over ``H`` prediction instances.

    Inside each map the error is averaged over cells; the result is then
    summed over horizon steps and averaged over instances.  MAPE ignores
    cells whose true height is below ``MAPE_EPS`` in magnitude and reports
    how many were ignored.
    """
    if isinstance(means, (list, tuple)) and means and hasattr(means[0], "means"):
        variances = np.stack([r.variances for r in means])
        means = np.stack([r.means for r in means])
    y = _as_instances(truth, "truth")
    m = _as_instances(means, "means")
    if y.shape != m.shape:
        raise EvaluationError(f"truth shape {y.shape} does not match prediction shape {m.shape}")
    H = y.shape[0]
    err = y - m
    sq = (err ** 2).mean(axis=(2, 3))             # (H, T)
    ab = np.abs(err).mean(axis=(2, 3))
    ok = np.abs(y) >= MAPE_EPS
    skipped = int(np.count_nonzero(~ok))
    with np.errstate(invalid="ignore", divide="ignore"):
        cell_pct = np.where(ok, 100.0 * np.abs(err) / np.where(ok, np.abs(y), 1.0), 0.0)
        pct = cell_pct.sum(axis=(2, 3)) / ok.sum(axis=(2, 3))
    if skipped:
        log.info("MAPE skipped %d near-zero truth cells", skipped)
    report = MetricReport(
        rmse=float(math.sqrt(sq.sum() / H)),
        mae=float(ab.sum() / H),
        mape=float(pct.sum() / H),
        astd=None,
        per_step={"rmse": np.sqrt(sq.mean(axis=0)), "mae": ab.mean(axis=0), "mape": pct.mean(axis=0)},
        H=H,
        mape_skipped=skipped,
    )
    if variances is not None:
        v = _as_instances(variances, "variances")
        if v.shape != y.shape:
            raise EvaluationError(f"variance shape {v.shape} does not match truth shape {y.shape}")
        if np.any(v < 0):
            raise EvaluationError("variances must be non-negative")
        mv = v.mean(axis=(2, 3))
        report.astd = float(math.sqrt(mv.sum() / H))
        report.per_step["astd"] = np.sqrt(mv.mean(axis=0))
    return report


# ---------------------------------------------------------------- trial configuration

@dataclass(frozen=True)
class TrialConfig:
    seed: int
    ell: int                              # total-days budget
    ell_t: int                            # per-day budget
    horizon: int = 15
    weights: PlannerWeights = PlannerWeights()
    robot_weights: tuple[float, ...] = ()

    @property
    def n_robots(self) -> int:
        return self.ell * self.ell_t

    @property
    def budget(self) -> BudgetConstraint:
        return BudgetConstraint(self.ell_t, self.ell)


def sample_trial_config(seed: int, rng: np.random.Generator, *, ell_choices=tuple(range(5, 13)),
                        ell_t_choices=(4, 9, 16, 25, 36, 49, 64), horizon: int = 15,
                        weights: PlannerWeights = PlannerWeights(),
                        robot_weight_range: tuple[float, float] = (0.5, 1.5)) -> TrialConfig:
    ell = int(rng.choice(ell_choices))
    ell_t = int(rng.choice(ell_t_choices))
    lo, hi = robot_weight_range
    rho = rng.uniform(lo, hi, ell * ell_t)
    return TrialConfig(seed, ell, ell_t, horizon, weights, tuple(float(v) for v in rho))


# ---------------------------------------------------------------- baseline policies

def random_policy(V: GroundSet, c: BudgetConstraint, rng: np.random.Generator) -> Policy:
    """Uniformly random factors, each drawn from those still addable, until none remain.

    Drawing from ``V`` and rejecting dependent factors gives the same law as
    drawing uniformly from the currently addable ones, which is what is done
    here: pick a step with probability proportional to its free factors, then
    a free ``(x, y, r)`` on that step.
    """
    per_cell = V.rows * V.cols * V.n_robots
    taken: dict[int, set[int]] = {}
    S: list[Factor] = []
    while True:
        open_days = len(taken) < c.total_days
        free = np.array([
            (per_cell - len(taken[t]) if len(taken[t]) < c.per_day else 0) if t in taken
            else (per_cell if open_days else 0)
            for t in V.times], dtype=np.float64)
        total = free.sum()
        if total == 0:
            break
        t = V.t1 + int(rng.choice(V.horizon, p=free / total))
        used = taken.setdefault(t, set())
        # j-th free index on this step, skipping the taken ones in order
        j = int(rng.integers(per_cell - len(used)))
        for u in sorted(used):
            if u <= j:
                j += 1
        used.add(j)
        y, rest = divmod(j, V.cols * V.n_robots)
        x, r = divmod(rest, V.n_robots)
        S.append(Factor(x, y, r, t))
    return Policy(S, math.nan)


def grid_positions(k: int, size: int) -> list[int]:
    """Cell indices of ``k`` evenly spread points on ``size`` cells (cell-centre convention)."""
    return [min(int(math.floor((i + 0.5) * size / k)), size - 1) for i in range(k)]


def heuristic_policy(V: GroundSet, c: BudgetConstraint) -> Policy:
    """Fixed-interval days with locations on a uniform square grid.

    Days are ``t1 + j * floor(horizon / total_days)``.  A non-square per-day
    budget uses the largest square grid that fits and puts the remaining
    factors at the field centre.  Robots are assigned round-robin.
    """
    step = max(V.horizon // c.total_days, 1)
    days = [V.t1 + j * step for j in range(c.total_days) if j * step < V.horizon]
    k = math.isqrt(c.per_day)
    cells = [(x, y) for y in grid_positions(k, V.rows) for x in grid_positions(k, V.cols)]
    cells += [(V.cols // 2, V.rows // 2)] * (c.per_day - k * k)
    S: list[Factor] = []
    seen: set[Factor] = set()
    r = 0
    for t in days:
        for x, y in cells:
            v = Factor(x, y, r % V.n_robots, t)
            r += 1
            if v in seen:  # fewer robots than slots at a cell
                continue
            seen.add(v)
            S.append(v)
    return Policy(S, math.nan)


# ---------------------------------------------------------------- measurements

@dataclass(frozen=True)
class Observation:
    x: int
    y: int
    t: int
    r: int
    value: float


def collect_measurements(policy, truth, meas_std: float = 4.0, rng=None, *, t0: int = 0) -> list[Observation]:
    """True height at each factor plus Gaussian noise; ``truth[t - t0]`` is the map at step ``t``."""
    if meas_std < 0:
        raise EvaluationError("meas_std must be non-negative")
    truth = np.asarray(truth, dtype=np.float64)
    factors = policy.factors if isinstance(policy, Policy) else list(policy)
    rng = np.random.default_rng(rng)
    T, M, N = truth.shape
    out = []
    for v in factors:
        k = v.t - t0
        if not (0 <= k < T and 0 <= v.y < M and 0 <= v.x < N):
            raise EvaluationError(f"factor {v} lies outside the truth maps")
        noise = rng.normal(0.0, meas_std) if meas_std > 0 else 0.0
        out.append(Observation(v.x, v.y, v.t, v.r, float(truth[k, v.y, v.x] + noise)))
    return out


def fold_observations(window, observations: Sequence[Observation], *, t0: int = 0,
                      mode: str = "recent") -> np.ndarray:
    """Copy of ``window`` with measured cells replaced by measurements.

    ``mode="recent"``: every measurement lands in the last (most recent) map;
    where a cell was measured on several steps the latest step wins.
    ``mode="per_step"``: a measurement at step ``t`` lands in
    ``window[t - t0]``.  Robots measuring the same cell on the same step are
    averaged in both modes.
    """
    if mode not in ("recent", "per_step"):
        raise EvaluationError(f"unknown fold mode {mode!r}")
    out = np.array(window, dtype=np.float64, copy=True)
    groups: dict[tuple[int, int, int], list[float]] = {}
    for o in observations:
        k = o.t - t0
        if not (0 <= k < out.shape[0] and 0 <= o.y < out.shape[1] and 0 <= o.x < out.shape[2]):
            raise EvaluationError(f"observation at t={o.t} ({o.x}, {o.y}) lies outside the window")
        groups.setdefault((k, o.y, o.x), []).append(o.value)
    last = out.shape[0] - 1
    for (k, y, x), vals in sorted(groups.items()):   # ascending step: later steps overwrite
        out[last if mode == "recent" else k, y, x] = float(np.mean(vals))
    return out


# ---------------------------------------------------------------- predictors

Predictor = Callable[[np.ndarray, int, int, int], tuple[np.ndarray, np.ndarray]]
"""``predict(window, first_time, horizon, seed) -> (means, variances)``, maps in mm."""


class NetPredictor:
    """MC-dropout predictions from a trained network."""

    def __init__(self, net, K: int = 100, p: float | None = None, batch: int = 64):
        self.net, self.K, self.p, self.batch = net, K, p, batch

    def __call__(self, window, first_time, horizon, seed):
        from .predictor import mc_predict
        res = mc_predict(self.net, window, self.K, self.p, seed, horizon=horizon, batch=self.batch)
        return res.means, res.variances


class OraclePredictor:
    """Returns the true future maps with a fixed variance; ignores its input window."""

    def __init__(self, maps, stride: int, variance: float = 0.0):
        self.maps = np.asarray(maps, dtype=np.float64)
        self.stride, self.variance = stride, variance

    def __call__(self, window, first_time, horizon, seed):
        idx = first_time + self.stride * np.arange(horizon)
        means = self.maps[idx].copy()
        return means, np.full_like(means, self.variance)


# ---------------------------------------------------------------- comparison harness

@dataclass
class EvalConfig:
    stride: int = 2
    alpha: int = 15
    horizon: int = 15
    repredict: int = 10
    meas_std: float = 4.0
    weights: PlannerWeights = PlannerWeights()
    ell_choices: tuple[int, ...] = tuple(range(5, 13))
    ell_t_choices: tuple[int, ...] = (4, 9, 16, 25, 36, 49, 64)
    robot_weight_range: tuple[float, float] = (0.5, 1.5)
    test_start: int = 365
    test_end: int | None = None   # exclusive; None = end of data
    fold: str = "recent"

    def span(self) -> int:
        """Time indices covered by one trial, counted from its origin."""
        return self.stride * (self.alpha + self.horizon + self.repredict - 1) + 1


@dataclass
class TrialRecord:
    trial: int
    config: TrialConfig
    origin: int
    policies: dict[str, Policy]
    rows: list[dict]


@dataclass
class ComparisonResult:
    rows: list[dict]
    trials: list[TrialRecord]

    def summary(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for method in dict.fromkeys(r["method"] for r in self.rows):
            sel = [r for r in self.rows if r["method"] == method]
            out[method] = {
                "n": len(sel),
                "mean_f": float(np.mean([r["f_value"] for r in sel])),
                "mean_error_mm": float(np.mean([r["mean_pred_error_mm"] for r in sel])),
            }
        return out


def _row(trial, method, unc, wait, err):
    return {"trial": trial, "method": method, "f_value": unc - wait, "uncertainty_term": unc,
            "wait_penalty": wait, "mean_pred_error_mm": err}


def run_trial(maps, predictor: Predictor, cfg: EvalConfig, trial: int, ss: np.random.SeedSequence) -> TrialRecord:
    maps = np.asarray(maps, dtype=np.float64)
    T_total = maps.shape[0]
    d, a = cfg.stride, cfg.alpha
    end = T_total if cfg.test_end is None else cfg.test_end
    last_origin = end - cfg.span()
    if last_origin < cfg.test_start:
        raise EvaluationError(f"test split [{cfg.test_start}, {end}) is shorter than one trial ({cfg.span()} steps)")
    cfg_ss, origin_ss, policy_ss, meas_ss, pred_ss = ss.spawn(5)
    tc = sample_trial_config(trial, np.random.default_rng(cfg_ss), ell_choices=cfg.ell_choices,
                             ell_t_choices=cfg.ell_t_choices, horizon=cfg.horizon, weights=cfg.weights,
                             robot_weight_range=cfg.robot_weight_range)
    o = int(np.random.default_rng(origin_ss).integers(cfg.test_start, last_origin + 1))
    pred_seed_1, pred_seed_2 = (int(s.generate_state(1)[0]) for s in pred_ss.spawn(2))

    window = maps[o:o + a * d:d]
    y_first = o + a * d
    means, variances = predictor(window, y_first, cfg.horizon, pred_seed_1)
    V = GroundSet(maps.shape[1], maps.shape[2], tc.robot_weights, 0, cfg.horizon)
    var = check_variances(variances, V)
    truth_y = maps[y_first:y_first + cfg.horizon * d:d]
    r_first = y_first + cfg.horizon * d
    truth_r = maps[r_first:r_first + cfg.repredict * d:d]

    policies = {
        "intermittent": greedy_plan(V, var, tc.weights, tc.budget),
        "heuristic": heuristic_policy(V, tc.budget),
        "random": random_policy(V, tc.budget, np.random.default_rng(policy_ss)),
    }
    meas_rngs = dict(zip(METHODS, (np.random.default_rng(s) for s in meas_ss.spawn(len(METHODS)))))
    rows = []
    for method in METHODS:
        pol = policies[method]
        if not is_independent(pol.factors, tc.budget):
            raise EvaluationError(f"{method} policy violates the budgets")
        unc, wait = objective_terms(pol.factors, var, tc.weights, 0, tc.robot_weights)
        pol.value = unc - wait
        obs = collect_measurements(pol, truth_y, cfg.meas_std, meas_rngs[method])
        folded = fold_observations(means, obs, mode=cfg.fold)
        rmeans, _ = predictor(folded, r_first, cfg.repredict, pred_seed_2)
        rows.append(_row(trial, method, unc, wait, float(np.mean(np.abs(rmeans - truth_r)))))
    rmeans, _ = predictor(np.asarray(means, dtype=np.float64), r_first, cfg.repredict, pred_seed_2)
    rows.append(_row(trial, "no_update", 0.0, 0.0, float(np.mean(np.abs(rmeans - truth_r)))))
    return TrialRecord(trial, tc, o, policies, rows)


def run_comparison(maps, predictor: Predictor, n_trials: int, cfg: EvalConfig = EvalConfig(), seed: int = 0,
                   out_dir: str | os.PathLike | None = None, progress: Callable[[int], None] | None = None
                   ) -> ComparisonResult:
    """Run ``n_trials`` independent seeded trials; optionally write CSVs and policy files."""
    if n_trials < 1:
        raise EvaluationError("n_trials must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n_trials)
    trials = []
    for i, ss in enumerate(streams):
        trials.append(run_trial(maps, predictor, cfg, i, ss))
        if progress:
            progress(i)
    result = ComparisonResult([r for t in trials for r in t.rows], trials)
    if out_dir is not None:
        write_comparison(result, out_dir, seed=seed)
    return result


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_comparison(result: ComparisonResult, out_dir, seed=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in result.rows:
            w.writerow([_fmt(r[k]) for k in CSV_FIELDS])
    with open(out / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("trial", "ell", "ell_t", "n_robots", "origin"))
        for t in result.trials:
            w.writerow((t.trial, t.config.ell, t.config.ell_t, t.config.n_robots, t.origin))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "n", "mean_f", "mean_error_mm"))
        for method, s in result.summary().items():
            w.writerow((method, s["n"], _fmt(s["mean_f"]), _fmt(s["mean_error_mm"])))
    pdir = out / "policies"
    pdir.mkdir(exist_ok=True)
    for t in result.trials:
        for method, pol in t.policies.items():
            write_policy(pdir / f"trial{t.trial:03d}_{method}.txt", pol, weights=t.config.weights,
                         budget=t.config.budget, seed=seed)
    return out


# ---------------------------------------------------------------- desk-scale setup

@dataclass
class DeskSetup:
    """Synthesis and training settings for the 16x16 two-year comparison."""
    rows: int = 16
    cols: int = 16
    days: int = 730
    stride: int = 2
    alpha: int = 15
    train_end: int = 292
    val_end: int = 365
    channels: tuple[int, int] = (8, 16)
    dropout: float = 0.4
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 10
    length_scale_factor: float = 10.0
    weight_scale: float = 10.0
    seed: int = 0


def desk_dataset(setup: DeskSetup = DeskSetup()) -> np.ndarray:
    from .field_synth import SynthConfig, seasonal_series, synthesize_dataset
    cfg = SynthConfig(rows=setup.rows, cols=setup.cols, length_scale_factor=setup.length_scale_factor,
                      weight_scale=setup.weight_scale)
    return synthesize_dataset(cfg, seasonal_series(setup.days), setup.seed).maps


def split_samples(maps, stride: int, alpha: int, bounds: Sequence[tuple[int, int]]):
    """Sequence samples whose every index lies inside each ``[start, end)`` bound."""
    from .predictor import build_sequences
    return [build_sequences(maps[s:e], stride, alpha) for s, e in bounds]


def train_desk_predictor(maps, setup: DeskSetup = DeskSetup(), dtype=None):
    """Train the default network on the first year's training and validation ranges."""
    import torch

    from .predictor import Network, NetworkConfig, TrainConfig, train
    torch.manual_seed(setup.seed)
    net = Network(NetworkConfig(setup.rows, setup.cols, setup.channels, 3, setup.dropout))
    net = net.to(dtype or torch.float32)
    tr, va = split_samples(maps, setup.stride, setup.alpha, [(0, setup.train_end), (setup.train_end, setup.val_end)])
    result = train(net, tr, va, TrainConfig(setup.lr, setup.momentum, setup.batch_size, setup.max_epochs,
                                            setup.patience, None, setup.seed))
    return net, result


__all__ = [
    "CSV_FIELDS", "ComparisonResult", "DeskSetup", "EvalConfig", "EvaluationError", "METHODS", "MetricReport",
    "NetPredictor", "Observation", "OraclePredictor", "TrialConfig", "TrialRecord", "collect_measurements",
    "desk_dataset", "fold_observations", "grid_positions", "heuristic_policy", "metrics", "random_policy",
    "run_comparison", "run_trial", "sample_trial_config", "split_samples", "train_desk_predictor",
    "write_comparison",
]
