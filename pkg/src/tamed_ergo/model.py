"""SDE problem definitions and executable checks of their structural assumptions.

A Problem bundles a drift f, its declared contraction rate gamma and
polynomial growth degree q, and an additive-noise model. The declared
constants are never trusted blindly: check_one_sided and
check_poly_growth are sampling-based falsifiers that search for
counterexamples inside a ball. They certify only "no counterexample in
n samples within this radius", which is as strong as a black-box drift
allows.

Drift and potential callables must be vectorized over leading axes:
they map arrays of shape (..., d) to (..., d) (respectively scalars
of shape (...)). All built-in problems satisfy this.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DriftOverflow",
    "NotGradientProblem",
    "InsufficientSamples",
    "NoiseModel",
    "Problem",
    "AssumptionReport",
    "eval_drift",
    "check_one_sided",
    "check_poly_growth",
    "one_sided_ratio",
    "gibbs_log_density",
    "ou_problem",
    "cubic_problem",
    "rotating_problem",
    "polynomial_problem",
    "catalog",
    "CATALOG_NAMES",
]


class DriftOverflow(Exception):
    """Drift returned a non-finite value; carries the offending input."""

    def __init__(self, x):
        self.x = np.array(x, copy=True)
        super().__init__(f"drift evaluated to a non-finite value at x={self.x!r}")


class NotGradientProblem(Exception):
    """Operation requires a gradient problem with isotropic noise."""


class InsufficientSamples(Exception):
    """All sampled pairs were degenerate; no ratio could be formed."""


@dataclass(frozen=True)
class NoiseModel:
    """Additive noise sum_k sigma_k dbeta^k with K independent channels."""

    columns: tuple

    def __post_init__(self):
        cols = tuple(np.asarray(c, dtype=np.float64) for c in self.columns)
        if not cols:
            raise ValueError("noise model needs at least one column")
        d = cols[0].shape
        if any(c.shape != d for c in cols):
            raise ValueError("all noise columns must share the problem dimension")
        if not any(np.any(c != 0.0) for c in cols):
            raise ValueError("degenerate all-zero noise is rejected")
        object.__setattr__(self, "columns", cols)

    @property
    def K(self) -> int:
        return len(self.columns)

    @property
    def dim(self) -> int:
        return self.columns[0].shape[0]

    @property
    def amplitude(self) -> np.ndarray:
        """d x K matrix with sigma_k as columns."""
        return np.column_stack(self.columns)

    def isotropic_scale(self) -> Optional[float]:
        """Scale s if the amplitude is s * Identity (up to 1e-12), else None."""
        if self.K != self.dim:
            return None
        amp = self.amplitude
        s = abs(float(amp[0, 0]))
        if s == 0.0:
            return None
        if np.allclose(amp, s * np.eye(self.dim), rtol=0.0, atol=1e-12 * s):
            return s
        if np.allclose(amp, -s * np.eye(self.dim), rtol=0.0, atol=1e-12 * s):
            return s
        return None

    @classmethod
    def isotropic(cls, dim: int, scale: float) -> "NoiseModel":
        if scale == 0.0:
            raise ValueError("isotropic noise scale must be nonzero")
        return cls(columns=tuple(scale * np.eye(dim)[:, k] for k in range(dim)))


@dataclass(frozen=True)
class Problem:
    """An additive-noise SDE dX = f(X) dt + sigma dB with declared constants."""

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    gamma: float
    growth_degree: int
    noise: NoiseModel
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "unnamed"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if not self.gamma > 0.0:
            raise ValueError("gamma must be positive")
        if self.growth_degree < 0:
            raise ValueError("growth_degree must be nonnegative")
        if self.noise.dim != self.dim:
            raise ValueError("noise columns must have the problem dimension")
        origin = np.zeros(self.dim)
        f0 = np.asarray(self.drift(origin), dtype=np.float64)
        if f0.shape != (self.dim,) or not np.all(np.isfinite(f0)):
            raise ValueError("drift must map the origin to a finite d-vector")


@dataclass(frozen=True)
class AssumptionReport:
    """Outcome of a sampling-based assumption check.

    worst_ratio is the maximum of the tested ratio over all samples and
    witness is the sample (or pair) attaining it, so the reported value
    can be reproduced exactly by re-evaluating the witness.
    """

    kind: str  # "one_sided" | "poly_growth"
    samples_tested: int
    worst_ratio: float
    passed: bool
    witness: tuple
    notes: str = ""


def eval_drift(problem: Problem, x: np.ndarray) -> np.ndarray:
    """Evaluate f at a single point; raises DriftOverflow on non-finite output."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (problem.dim,):
        raise ValueError(f"x must have shape ({problem.dim},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    fx = np.asarray(problem.drift(x), dtype=np.float64)
    if not np.all(np.isfinite(fx)):
        raise DriftOverflow(x)
    return fx


def one_sided_ratio(problem: Problem, x1: np.ndarray, x2: np.ndarray) -> float:
    """<f(x2) - f(x1), x2 - x1> / ||x2 - x1||^2 for a single pair."""
    diff = np.asarray(x2, dtype=np.float64) - np.asarray(x1, dtype=np.float64)
    df = eval_drift(problem, np.asarray(x2)) - eval_drift(problem, np.asarray(x1))
    return float(np.dot(df, diff) / np.dot(diff, diff))


def _uniform_ball(rng: np.random.Generator, dim: int, radius: float, n: int) -> np.ndarray:
    direction = rng.standard_normal((n, dim))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    r = radius * rng.random((n, 1)) ** (1.0 / dim)
    return direction / norms * r


_ONE_SIDED_TOL = 1e-6
_DEGENERATE_PAIR = 1e-12
_GROWTH_FLAG_LEVEL = 1e3


def check_one_sided(
    problem: Problem, n_pairs: int, sampling_radius: float, seed: int
) -> AssumptionReport:
    """Search the centered ball for pairs violating the contraction condition.

    Passes iff the worst sampled ratio is <= -gamma * (1 - 1e-6). Pairs
    closer than 1e-12 are skipped to avoid 0/0 ratios.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if not sampling_radius > 0.0:
        raise ValueError("sampling_radius must be positive")
    rng = np.random.default_rng(seed)
    x1s = _uniform_ball(rng, problem.dim, sampling_radius, n_pairs)
    x2s = _uniform_ball(rng, problem.dim, sampling_radius, n_pairs)
    worst = -np.inf
    witness = None
    tested = 0
    for x1, x2 in zip(x1s, x2s):
        if np.linalg.norm(x2 - x1) < _DEGENERATE_PAIR:
            continue
        tested += 1
        ratio = one_sided_ratio(problem, x1, x2)
        if ratio > worst:
            worst = ratio
            witness = (x1.copy(), x2.copy())
    if witness is None:
        raise InsufficientSamples(
            f"all {n_pairs} sampled pairs were closer than {_DEGENERATE_PAIR}"
        )
    passed = worst <= -problem.gamma * (1.0 - _ONE_SIDED_TOL)
    return AssumptionReport(
        kind="one_sided",
        samples_tested=tested,
        worst_ratio=worst,
        passed=passed,
        witness=witness,
    )


def check_poly_growth(
    problem: Problem, n_points: int, sampling_radius: float, seed: int
) -> AssumptionReport:
    """Sample max ||f(x)|| / (1 + ||x||^q) over the centered ball.

    The check covers the zeroth-order part of the growth condition only;
    the drift is consumed as a black-box value map.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not sampling_radius > 0.0:
        raise ValueError("sampling_radius must be positive")
    rng = np.random.default_rng(seed)
    xs = _uniform_ball(rng, problem.dim, sampling_radius, n_points)
    worst = -np.inf
    witness = None
    q = problem.growth_degree
    for x in xs:
        fx = eval_drift(problem, x)
        ratio = float(np.linalg.norm(fx) / (1.0 + np.linalg.norm(x) ** q))
        if ratio > worst:
            worst = ratio
            witness = (x.copy(),)
    notes = ""
    if worst > _GROWTH_FLAG_LEVEL:
        notes = (
            f"worst_ratio {worst:.6g} exceeds {_GROWTH_FLAG_LEVEL:g}; the declared "
            f"degree q={q} is likely too small for this drift"
        )
    return AssumptionReport(
        kind="poly_growth",
        samples_tested=n_points,
        worst_ratio=worst,
        passed=np.isfinite(worst),
        witness=witness,
        notes=notes,
    )


def gibbs_log_density(problem: Problem, x: np.ndarray, noise_scale: float) -> float:
    """Unnormalized stationary log-density -2 V(x) / noise_scale^2.

    Valid only for gradient problems (f = -grad V) with isotropic noise;
    used as a test oracle, never inside the integrators.
    """
    if problem.potential is None:
        raise NotGradientProblem(f"problem {problem.name!r} has no potential")
    if problem.noise.isotropic_scale() is None:
        raise NotGradientProblem(f"problem {problem.name!r} does not have isotropic noise")
    if not noise_scale > 0.0:
        raise ValueError("noise_scale must be positive")
    x = np.asarray(x, dtype=np.float64)
    v = float(problem.potential(x))
    return -2.0 * v / noise_scale**2


# ---------------------------------------------------------------------------
# Built-in problem catalog. Drifts and potentials are module-level callables
# so Problem values pickle cleanly into worker processes.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearDrift:
    """f(x) = -gamma * x."""

    gamma: float

    def __call__(self, x):
        return -self.gamma * np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class QuadraticPotential:
    gamma: float

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * self.gamma * np.sum(x * x, axis=-1)


@dataclass(frozen=True)
class CubicDrift:
    """f(x) = -x - x^3 (componentwise; the catalog uses it in d=1)."""

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return -x - x**3


@dataclass(frozen=True)
class CubicPotential:
    """V(x) = x^2/2 + x^4/4, so that -V' is the cubic drift."""

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.sum(0.5 * x**2 + 0.25 * x**4, axis=-1)


@dataclass(frozen=True)
class RotatingDrift:
    """f(x) = -x + eps * (-x2, x1); the rotation is skew-symmetric, so the
    one-sided constant stays at 1 while the problem is non-gradient."""

    eps: float

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = -x.copy()
        out[..., 0] -= self.eps * x[..., 1]
        out[..., 1] += self.eps * x[..., 0]
        return out


@dataclass(frozen=True)
class PolynomialDrift:
    """f(x) = sum_j c_j x^j in one dimension."""

    coeffs: tuple

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        acc = np.zeros_like(x)
        for c in reversed(self.coeffs):
            acc = acc * x + c
        return acc


def ou_problem(gamma: float = 1.0, sigma: float = 1.0) -> Problem:
    """Ornstein-Uhlenbeck: dX = -gamma X dt + sigma dB, d = 1."""
    return Problem(
        dim=1,
        drift=LinearDrift(gamma=gamma),
        gamma=gamma,
        growth_degree=1,
        noise=NoiseModel.isotropic(1, sigma),
        potential=QuadraticPotential(gamma=gamma),
        name="ou",
    )


def cubic_problem(sigma: float = float(np.sqrt(2.0))) -> Problem:
    """Cubic double-confinement: dX = (-X - X^3) dt + sigma dB, d = 1.

    With the default sigma = sqrt(2) the stationary density is
    proportional to exp(-V), V = x^2/2 + x^4/4.
    """
    return Problem(
        dim=1,
        drift=CubicDrift(),
        gamma=1.0,
        growth_degree=3,
        noise=NoiseModel.isotropic(1, sigma),
        potential=CubicPotential(),
        name="cubic",
    )


def rotating_problem(eps: float = 1.0, sigma: float = 1.0) -> Problem:
    """Two-dimensional non-gradient example: linear contraction plus rotation."""
    return Problem(
        dim=2,
        drift=RotatingDrift(eps=eps),
        gamma=1.0,
        growth_degree=1,
        noise=NoiseModel.isotropic(2, sigma),
        potential=None,
        name="rotating",
    )


def polynomial_problem(
    coeffs, gamma: float, growth_degree: int, sigma: float = 1.0, name: str = "custom"
) -> Problem:
    """One-dimensional drift from a coefficient list, f(x) = sum c_j x^j."""
    coeffs = tuple(float(c) for c in coeffs)
    if not coeffs:
        raise ValueError("at least one drift coefficient is required")
    return Problem(
        dim=1,
        drift=PolynomialDrift(coeffs=coeffs),
        gamma=gamma,
        growth_degree=growth_degree,
        noise=NoiseModel.isotropic(1, sigma),
        potential=None,
        name=name,
    )


CATALOG_NAMES = ("ou", "cubic", "rotating")


def catalog(name: str, sigma: Optional[float] = None, **kwargs) -> Problem:
    """Look up a built-in problem by name."""
    if name == "ou":
        return ou_problem(sigma=sigma if sigma is not None else 1.0, **kwargs)
    if name == "cubic":
        return cubic_problem(sigma=sigma if sigma is not None else float(np.sqrt(2.0)))
    if name == "rotating":
        return rotating_problem(sigma=sigma if sigma is not None else 1.0, **kwargs)
    raise KeyError(f"unknown catalog problem {name!r}; known: {CATALOG_NAMES}")
