"""Intermittent multi-robot deployment planning.

A deployment factor ``(x, y, r, t)`` means "robot ``r`` senses grid cell
``(x, y)`` on planning step ``t``".  The objective rewards predicted variance
weighted by how dispersed a factor is from the rest of the policy in space
(log distance) and time, minus a per-factor waiting penalty:

    f(S) = sum_{s in S} var_t(s) * mean_{s' in S \\ s} d(s, s') - w1 * rho_r(s) * (t_s - t1)
    d(s, s') = w2 * log(max(||(x, y) - (x', y')||, eps)) + w3 * |t - t'|

with the mean taken as 1 for singletons and ``rho_r`` a per-robot cost weight.
Feasible policies satisfy a per-step cap ``|S ∩ V_t| <= per_day`` and a cap
``total_days`` on the number of steps used.  ``greedy_plan`` repeatedly adds the
feasible factor of largest marginal gain; ``brute_force_plan``, ``curvature``
and ``certificate`` check its ``1 / (2 + c_f)`` guarantee on small instances.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

LOG_EPS = 1e-6
MAX_EXHAUSTIVE = 20


class PlanningError(ValueError):
    pass


class Factor(NamedTuple):
    x: int
    y: int
    r: int
    t: int

    def order_key(self) -> tuple[int, int, int, int]:
        return (self.t, self.y, self.x, self.r)


@dataclass(frozen=True)
class PlannerWeights:
    w1: float = 5.0
    w2: float = 0.1
    w3: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.w1, self.w2, self.w3)):
            raise PlanningError("planner weights must be finite")
        if self.w2 < 0 or self.w3 < 0:
            raise PlanningError("w2 and w3 must be non-negative")


@dataclass(frozen=True)
class BudgetConstraint:
    per_day: int
    total_days: int

    def __post_init__(self):
        if self.per_day < 1 or self.total_days < 1:
            raise PlanningError("budgets must be >= 1")


@dataclass(frozen=True)
class GroundSet:
    """All factors over an ``rows x cols`` grid, robots and ``horizon`` steps from ``t1``.

    ``robot_weights[r]`` scales the waiting penalty of robot ``r``.
    """

    rows: int
    cols: int
    robot_weights: tuple[float, ...] = (1.0,)
    t1: int = 0
    horizon: int = 1

    def __post_init__(self):
        object.__setattr__(self, "robot_weights", tuple(float(w) for w in self.robot_weights))
        if self.rows < 1 or self.cols < 1 or self.horizon < 1 or not self.robot_weights:
            raise PlanningError("ground set must have at least one cell, robot and step")

    @property
    def n_robots(self) -> int:
        return len(self.robot_weights)

    @property
    def times(self) -> range:
        return range(self.t1, self.t1 + self.horizon)

    def __len__(self) -> int:
        return self.rows * self.cols * self.n_robots * self.horizon

    def __iter__(self) -> Iterator[Factor]:
        for t in self.times:
            for y in range(self.rows):
                for x in range(self.cols):
                    for r in range(self.n_robots):
                        yield Factor(x, y, r, t)

    def __contains__(self, v) -> bool:
        return (0 <= v.x < self.cols and 0 <= v.y < self.rows and 0 <= v.r < self.n_robots
                and self.t1 <= v.t < self.t1 + self.horizon)


def check_variances(variances, ground: GroundSet) -> np.ndarray:
    var = np.asarray(variances, dtype=np.float64)
    expected = (ground.horizon, ground.rows, ground.cols)
    if var.shape != expected:
        raise PlanningError(f"variance set has shape {var.shape}, expected {expected}")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise PlanningError("variances must be finite and non-negative")
    return var


def distance(s: Factor, s2: Factor, w: PlannerWeights) -> float:
    spatial = math.hypot(s.x - s2.x, s.y - s2.y)
    return w.w2 * math.log(max(spatial, LOG_EPS)) + w.w3 * abs(s.t - s2.t)


def objective_terms(S: Sequence[Factor], variances, w: PlannerWeights, t1: int,
                    robot_weights: Sequence[float] | None = None) -> tuple[float, float]:
    """Return ``(uncertainty_term, wait_penalty)``; ``f = uncertainty - wait``."""
    var = np.asarray(variances)
    S = list(S)
    n = len(S)
    if n == 0:
        return 0.0, 0.0
    a = np.array(S, dtype=np.int64)  # columns x, y, r, t
    x, y, r, t = a.T
    k = t - t1
    if np.any((k < 0) | (k >= var.shape[0]) | (y < 0) | (y >= var.shape[1]) | (x < 0) | (x >= var.shape[2])):
        bad = next(s for s, kk in zip(S, k) if not (0 <= kk < var.shape[0] and 0 <= s.y < var.shape[1]
                                                     and 0 <= s.x < var.shape[2]))
        raise PlanningError(f"no variance for factor {bad}")
    if n == 1:
        disp = np.ones(1)
    else:
        spatial = np.hypot(x[:, None] - x[None, :], y[:, None] - y[None, :])
        d = w.w2 * np.log(np.maximum(spatial, LOG_EPS)) + w.w3 * np.abs(t[:, None] - t[None, :])
        np.fill_diagonal(d, 0.0)
        disp = d.sum(axis=1) / (n - 1)
    unc = float(np.sum(var[k, y, x] * disp))
    rho = np.ones(n) if robot_weights is None else np.asarray(robot_weights, dtype=np.float64)[r]
    wait = float(np.sum(w.w1 * rho * k))
    return unc, wait


def objective(S: Sequence[Factor], variances, w: PlannerWeights, t1: int,
              robot_weights: Sequence[float] | None = None) -> float:
    unc, wait = objective_terms(S, variances, w, t1, robot_weights)
    return unc - wait


def is_independent(S: Iterable[Factor], c: BudgetConstraint) -> bool:
    per_t: dict[int, int] = {}
    for s in S:
        per_t[s.t] = per_t.get(s.t, 0) + 1
    return all(n <= c.per_day for n in per_t.values()) and len(per_t) <= c.total_days


@dataclass
class TraceEntry:
    factor: Factor
    gain: float
    accepted: bool


@dataclass
class Policy:
    factors: list[Factor]
    value: float
    trace: list[TraceEntry] = field(default_factory=list)
    rejected: int = 0

    def __len__(self):
        return len(self.factors)


def greedy_plan(V: GroundSet, variances, w: PlannerWeights, c: BudgetConstraint, *,
                stop_at_nonpositive: bool = False, literal: bool = False) -> Policy:
    """Greedy maximization of the deployment objective under both budgets.

    The default path evaluates marginal gains for every ``(t, y, x)`` cell at
    once and skips factors that can no longer be added (infeasibility is
    monotone, so this selects exactly what the check-every-factor loop
    selects).  ``literal=True`` runs that loop verbatim, recording every
    rejected factor in the trace; it is quadratic in ``|V|``.

    Ties in the argmax go to the smallest ``(t, y, x, r)``.
    """
    var = check_variances(variances, V)
    if literal:
        return _greedy_literal(V, var, w, c, stop_at_nonpositive)
    return _greedy_vectorized(V, var, w, c, stop_at_nonpositive)


def _greedy_literal(V, var, w, c, stop_at_nonpositive) -> Policy:
    unchecked = sorted(V, key=Factor.order_key)
    S: list[Factor] = []
    f_S = 0.0
    trace = []
    rejected = 0
    while unchecked:
        best_i, best_gain = 0, -math.inf
        for i, v in enumerate(unchecked):
            gain = objective(S + [v], var, w, V.t1, V.robot_weights) - f_S
            if gain > best_gain:
                best_i, best_gain = i, gain
        if stop_at_nonpositive and best_gain <= 0:
            break
        v = unchecked.pop(best_i)
        ok = is_independent(S + [v], c)
        if ok:
            S.append(v)
            f_S += best_gain
        else:
            rejected += 1
        trace.append(TraceEntry(v, best_gain, ok))
    return Policy(S, objective(S, var, w, V.t1, V.robot_weights), trace, rejected)


def _greedy_vectorized(V: GroundSet, var, w: PlannerWeights, c: BudgetConstraint, stop_at_nonpositive) -> Policy:
    T, M, N = var.shape
    tt, yy, xx = np.meshgrid(np.arange(T) + V.t1, np.arange(M), np.arange(N), indexing="ij")
    rho = np.asarray(V.robot_weights)
    n_r = rho.size
    # robot preference per step: lowest waiting penalty first, then lowest id
    pen_tr = w.w1 * (np.arange(T)[:, None]) * rho[None, :]
    order = np.stack([np.lexsort((np.arange(n_r), pen_tr[k])) for k in range(T)])
    ordered_pen = np.take_along_axis(pen_tr, order, axis=1)

    used = np.zeros((T, M, N), dtype=np.int64)
    d_sum = np.zeros((T, M, N))     # sum_{s in S} d(cell, s)
    a_sum = np.zeros((T, M, N))     # sum_{s in S} var(s) * d(s, cell)
    per_t = np.zeros(T, dtype=np.int64)
    sum_sd = 0.0                    # sum_{s in S} var(s) * D(s)
    disp_S = 0.0                    # dispersion part of f(S)
    pen_S = 0.0
    n = 0
    S: list[Factor] = []
    trace: list[TraceEntry] = []

    while True:
        days_used = int(np.count_nonzero(per_t))
        day_ok = (per_t < c.per_day) & ((per_t > 0) | (days_used < c.total_days))
        avail = day_ok[:, None, None] & (used < n_r)
        if not avail.any():
            break
        if n == 0:
            disp_new = var
        else:
            disp_new = (sum_sd + a_sum + var * d_sum) / n
        robot_pen = np.take_along_axis(ordered_pen, np.minimum(used, n_r - 1).reshape(T, -1), axis=1).reshape(T, M, N)
        gain = np.where(avail, disp_new - disp_S - robot_pen, -np.inf)
        idx = int(np.argmax(gain))
        best = float(gain.flat[idx])
        if stop_at_nonpositive and best <= 0:
            break
        k, yv, xv = np.unravel_index(idx, (T, M, N))
        r = int(order[k, used[k, yv, xv]])
        v = Factor(int(xv), int(yv), r, int(k) + V.t1)

        # update running sums with the new member
        d_new = w.w2 * np.log(np.maximum(np.hypot(xx - v.x, yy - v.y), LOG_EPS)) + w.w3 * np.abs(tt - v.t)
        sum_sd += a_sum[k, yv, xv] + var[k, yv, xv] * d_sum[k, yv, xv]
        d_sum += d_new
        a_sum += var[k, yv, xv] * d_new
        n += 1
        disp_S = float(var[k, yv, xv]) if n == 1 else sum_sd / (n - 1)
        pen_S += float(ordered_pen[k, used[k, yv, xv]])
        used[k, yv, xv] += 1
        per_t[k] += 1
        S.append(v)
        trace.append(TraceEntry(v, best, True))

    return Policy(S, disp_S - pen_S, trace)


def independent_subsets(V: Sequence[Factor], c: BudgetConstraint) -> Iterator[tuple[Factor, ...]]:
    """All independent subsets of ``V`` (downward closure lets us prune)."""
    items = list(V)

    def rec(start, chosen, per_t):
        yield tuple(chosen)
        for i in range(start, len(items)):
            v = items[i]
            cnt = per_t.get(v.t, 0)
            if cnt >= c.per_day or (cnt == 0 and len(per_t) >= c.total_days):
                continue
            per_t[v.t] = cnt + 1
            chosen.append(v)
            yield from rec(i + 1, chosen, per_t)
            chosen.pop()
            if cnt == 0:
                del per_t[v.t]
            else:
                per_t[v.t] = cnt

    yield from rec(0, [], {})


def _require_small(V: GroundSet):
    if len(V) > MAX_EXHAUSTIVE:
        raise PlanningError(f"exhaustive evaluation needs |V| <= {MAX_EXHAUSTIVE}, got {len(V)}")


def brute_force_plan(V: GroundSet, variances, w: PlannerWeights, c: BudgetConstraint) -> Policy:
    _require_small(V)
    var = check_variances(variances, V)
    best: tuple[Factor, ...] = ()
    best_val = 0.0
    for S in independent_subsets(sorted(V, key=Factor.order_key), c):
        val = objective(S, var, w, V.t1, V.robot_weights)
        if val > best_val:
            best, best_val = S, val
    return Policy(list(best), best_val)


@dataclass
class Curvature:
    value: float              # clamped to [0, 1]
    raw: float
    ratios: dict              # factor -> (f(V) - f(V \\ v)) / f(v)
    skipped: list             # factors with f(v) <= 0

    @property
    def in_range(self) -> bool:
        return 0.0 <= self.raw <= 1.0


def curvature(V: GroundSet, variances, w: PlannerWeights) -> Curvature:
    """Total curvature ``1 - min_v (f(V) - f(V \\ v)) / f(v)``.

    Zero for modular objectives, one when some factor adds nothing on top of
    the rest.  Factors with ``f(v) <= 0`` are skipped.
    """
    _require_small(V)
    var = check_variances(variances, V)
    items = sorted(V, key=Factor.order_key)
    f_all = objective(items, var, w, V.t1, V.robot_weights)
    ratios = {}
    skipped = []
    for i, v in enumerate(items):
        f_v = objective([v], var, w, V.t1, V.robot_weights)
        if f_v <= 0:
            skipped.append(v)
            continue
        rest = items[:i] + items[i + 1:]
        ratios[v] = (f_all - objective(rest, var, w, V.t1, V.robot_weights)) / f_v
    if not ratios:
        raise PlanningError("curvature undefined: every singleton value is non-positive")
    if skipped:
        log.warning("curvature: skipped %d factors with non-positive singleton value", len(skipped))
    raw = 1.0 - min(ratios.values())
    value = min(max(raw, 0.0), 1.0)
    if value != raw:
        log.warning("curvature %.6g outside [0, 1]; clamped to %.6g", raw, value)
    return Curvature(value, raw, ratios, skipped)


@dataclass
class Certificate:
    passed: bool
    ratio: float
    bound: float
    greedy_value: float
    optimal_value: float
    curvature: float


def certificate(greedy_value: float, optimal_value: float, c_f: float) -> Certificate:
    bound = optimal_value / (2.0 + c_f)
    tol = 1e-12 * max(1.0, abs(bound))
    ratio = greedy_value / optimal_value if optimal_value != 0 else (1.0 if greedy_value >= 0 else -math.inf)
    return Certificate(greedy_value >= bound - tol, ratio, bound, greedy_value, optimal_value, c_f)


# ---------------------------------------------------------------- policy files

def write_policy(path: str | os.PathLike, policy: Policy, *, weights: PlannerWeights,
                 budget: BudgetConstraint, seed=None, curvature_value=None, ratio=None) -> None:
    lines = [
        f"# weights w1={weights.w1!r} w2={weights.w2!r} w3={weights.w3!r}",
        f"# budgets per_day={budget.per_day} total_days={budget.total_days}",
        f"# seed={seed}",
        f"# f={float(policy.value)!r}",
    ]
    if curvature_value is not None:
        lines.append(f"# c_f={float(curvature_value)!r}")
    if ratio is not None:
        lines.append(f"# ratio={float(ratio)!r}")
    lines.append("# t x y r gain accepted")
    entries = policy.trace or [TraceEntry(v, math.nan, True) for v in policy.factors]
    for e in entries:
        v = e.factor
        lines.append(f"{v.t} {v.x} {v.y} {v.r} {e.gain!r} {int(e.accepted)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_policy(path: str | os.PathLike) -> tuple[Policy, dict[str, str]]:
    header: dict[str, str] = {}
    trace = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                k, sep, val = tok.partition("=")
                if sep:
                    header[k] = val
            continue
        t, x, y, r, gain, acc = line.split()
        trace.append(TraceEntry(Factor(int(x), int(y), int(r), int(t)), float(gain), acc == "1"))
    factors = [e.factor for e in trace if e.accepted]
    value = float(header.get("f", "nan"))
    return Policy(factors, value, trace, sum(not e.accepted for e in trace)), header


def subsets(items: Sequence) -> Iterator[tuple]:
    return itertools.chain.from_iterable(itertools.combinations(items, k) for k in range(len(items) + 1))
