"""Independent reference values for invariant averages and finite-time laws.

Three provenances, in decreasing order of authority:

- closed form: the OU process dX = -gamma X dt + sigma dB has stationary
  law N(0, sigma^2 / (2 gamma)), so its moments are exact.
- quadrature: for 1D gradient problems with isotropic noise the
  stationary density is proportional to exp(-2 V / scale^2); averages
  follow from deterministic quadrature of that density.
- fine step: for everything else, the tamed scheme itself at a much
  smaller step acts as the stand-in for the continuous-time law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Problem, gibbs_log_density
from .montecarlo import Estimate, Observable, estimate_observable
from .noise import MasterSeed
from .scheme import SchemeParams, StepKind

__all__ = [
    "GridTooNarrow",
    "NodesTooFew",
    "QuadratureGrid",
    "ou_stationary_moment",
    "ou_second_moment_at_time",
    "quadrature_invariant_average",
    "checked_quadrature_invariant_average",
    "reference_finite_time",
]


class GridTooNarrow(Exception):
    """Quadrature grid leaves non-negligible density mass at the boundary."""


class NodesTooFew(Exception):
    """Doubling the node count moved the quadrature result too much."""


@dataclass(frozen=True)
class QuadratureGrid:
    """Uniform 1D grid with a composite trapezoid or Simpson rule."""

    lower: float
    upper: float
    n_nodes: int
    rule: str = "simpson"

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("lower must be below upper")
        if self.n_nodes < 9:
            raise ValueError("n_nodes must be at least 9")
        if self.rule not in ("trapezoid", "simpson"):
            raise ValueError("rule must be 'trapezoid' or 'simpson'")
        if self.rule == "simpson" and self.n_nodes % 2 == 0:
            raise ValueError("simpson rule needs an odd number of nodes")

    def nodes(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n_nodes)

    def weights(self) -> np.ndarray:
        h = (self.upper - self.lower) / (self.n_nodes - 1)
        w = np.full(self.n_nodes, h)
        if self.rule == "trapezoid":
            w[0] = w[-1] = h / 2.0
            return w
        w[:] = h / 3.0
        w[1:-1:2] *= 4.0
        w[2:-1:2] *= 2.0
        return w


def ou_stationary_moment(gamma: float, sigma: float, order: int) -> float:
    """Even moment of the OU stationary law N(0, sigma^2 / (2 gamma)).

    E[X^(2k)] = (2k - 1)!! * variance^k; odd moments vanish by symmetry
    and are not served here.
    """
    if not gamma > 0.0 or not sigma > 0.0:
        raise ValueError("gamma and sigma must be positive")
    if order < 0 or order % 2 != 0:
        raise ValueError("order must be a nonnegative even integer")
    variance = sigma**2 / (2.0 * gamma)
    double_factorial = math.prod(range(1, order, 2)) if order >= 2 else 1
    return double_factorial * variance ** (order // 2)


def ou_second_moment_at_time(gamma: float, sigma: float, t: float, x0: float) -> float:
    """E[X_t^2] for OU started at x0: x0^2 e^{-2 gamma t} plus the relaxed part."""
    decay = math.exp(-2.0 * gamma * t)
    return x0**2 * decay + sigma**2 / (2.0 * gamma) * (1.0 - decay)


_BOUNDARY_MASS = 1e-12


def quadrature_invariant_average(
    problem: Problem, obs: Observable, noise_scale: float, grid: QuadratureGrid
) -> float:
    """integral of obs against the Gibbs density, normalized numerically.

    Log-densities are shifted by their maximum before exponentiation so
    the normalization is overflow-safe. The grid must be wide enough
    that the boundary density is below 1e-12 of the peak.
    """
    if problem.dim != 1:
        raise ValueError("quadrature oracle is restricted to 1D problems")
    xs = grid.nodes()
    log_rho = np.array(
        [gibbs_log_density(problem, np.array([x]), noise_scale) for x in xs]
    )
    log_rho -= log_rho.max()
    rho = np.exp(log_rho)
    if rho[0] > _BOUNDARY_MASS or rho[-1] > _BOUNDARY_MASS:
        raise GridTooNarrow(
            f"boundary density {max(rho[0], rho[-1]):.3e} exceeds {_BOUNDARY_MASS:g} "
            f"of the peak; widen [{grid.lower}, {grid.upper}]"
        )
    w = grid.weights()
    phi = obs.evaluate(xs[:, None])
    return float(np.sum(w * phi * rho) / np.sum(w * rho))


_REFINEMENT_TOL = 1e-8


def checked_quadrature_invariant_average(
    problem: Problem, obs: Observable, noise_scale: float, grid: QuadratureGrid
) -> float:
    """Quadrature average with a node-doubling stability check."""
    coarse = quadrature_invariant_average(problem, obs, noise_scale, grid)
    finer = QuadratureGrid(
        lower=grid.lower,
        upper=grid.upper,
        n_nodes=2 * grid.n_nodes - 1 if grid.rule == "simpson" else 2 * grid.n_nodes,
        rule=grid.rule,
    )
    fine = quadrature_invariant_average(problem, obs, noise_scale, finer)
    if abs(fine - coarse) > _REFINEMENT_TOL:
        raise NodesTooFew(
            f"doubling nodes moved the result by {abs(fine - coarse):.3e} "
            f"(> {_REFINEMENT_TOL:g}); increase n_nodes"
        )
    return fine


def reference_finite_time(
    problem: Problem,
    obs: Observable,
    T: float,
    dt_ref: float,
    M: int,
    master: MasterSeed,
    x0,
    alpha: float = 1.0,
    dt_cap: float = 1.0,
    workers=None,
) -> Estimate:
    """Fine-step tamed estimate of E[obs(X(T))], the continuous-law stand-in.

    dt_ref should be at least 16x smaller than any step size under test;
    the per-path noise keying lets coarser coupled runs reuse the same
    Brownian paths through increment group sums (common random numbers).
    """
    n_steps = round(T / dt_ref)
    if abs(T - n_steps * dt_ref) > 1e-9 * max(1.0, T) or n_steps < 0:
        raise ValueError("T must be an integer multiple of dt_ref")
    params = SchemeParams(dt=dt_ref, n_steps=n_steps, dt_cap=dt_cap, alpha=alpha)
    return estimate_observable(
        problem, params, StepKind.TAMED, x0, obs, M, master, workers=workers
    )
