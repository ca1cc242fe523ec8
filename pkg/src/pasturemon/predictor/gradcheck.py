"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    floor: float

    @property
    def n(self) -> int:
        return self.rel_error.size

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.rel_error <= self.tol))

    @property
    def pure_pass_fraction(self) -> float:
        """Pass rate with no denominator floor at all."""
        return float(np.mean(relative_error(self.analytic, self.numeric, 0.0) <= self.tol))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> np.ndarray:
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    diff = np.abs(a - b)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(diff == 0, 0.0, diff / den)


def resolvable_floor(loss: float, step: float, tol: float) -> float:
    """Smallest gradient whose relative error ``tol`` central differences can resolve.

    A difference quotient carries roundoff of order ``eps * |loss| / step``;
    below ``eps * |loss| / (step * tol)`` that noise alone exceeds ``tol``.
    """
    return float(np.finfo(np.float64).eps * abs(loss) / (step * tol))


def check_gradients(module: torch.nn.Module, loss_fn, step: float = 1e-5, tol: float = 1e-4,
                    floor: float | None = None) -> GradCheckReport:
    """Compare ``d loss_fn() / d theta`` from autograd with central differences.

    ``loss_fn`` takes no arguments and returns a scalar tensor computed from
    the module's current parameters.  Parameters should be float64.  The
    relative-error denominator is floored at ``floor``, by default the
    roundoff-resolvable magnitude from ``resolvable_floor``.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    if floor is None:
        floor = resolvable_floor(loss.item(), step, tol)
    analytic = np.concatenate([p.grad.detach().double().numpy().ravel() for p in params])
    numeric = np.empty_like(analytic)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = float(loss_fn())
                flat[j] = orig - step
                down = float(loss_fn())
                flat[j] = orig
                numeric[k] = (up - down) / (2 * step)
                k += 1
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol, floor)
