"""One-step integrators and single-path simulation.

The tamed update replaces the explicit Euler drift increment dt*f(x) by

    dt * f(x) / (1 + alpha * dt * ||f(x)||),

which bounds every drift displacement by 1/alpha and prevents the
blow-up that plain explicit Euler suffers under superlinear drift. The
plain Euler step is kept as the divergence baseline.

Step functions are pure and vectorized: x and fx may carry leading batch
axes, with norms taken over the last axis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import Problem, eval_drift
from .noise import MasterSeed, NoiseStream, gaussian_increments

__all__ = [
    "OVERFLOW_THRESHOLD",
    "SchemeParams",
    "StepKind",
    "PathResult",
    "tamed_step",
    "euler_step",
    "modified_drift",
    "simulate_path",
]

# Declares explosion: far above any stationary scale of the catalog
# problems, far below floating-point overflow.
OVERFLOW_THRESHOLD = 1e10


@dataclass(frozen=True)
class SchemeParams:
    """Time-step size dt in (0, dt_cap], taming parameter alpha, step count."""

    dt: float
    n_steps: int
    dt_cap: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.dt > self.dt_cap:
            raise ValueError(f"dt={self.dt} exceeds dt_cap={self.dt_cap}")
        if not self.alpha > 0.0:
            raise ValueError("alpha must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")


class StepKind(str, enum.Enum):
    TAMED = "tamed"
    EULER = "euler"


@dataclass(frozen=True)
class PathResult:
    """Outcome of one simulated path.

    exploded_at is the first step index whose state exceeded the overflow
    threshold (or went non-finite); explosion is data, not an error.
    max_drift_displacement records the largest per-step drift move, which
    for the tamed scheme can never exceed 1/alpha.
    """

    final_state: np.ndarray
    sup_norm: float
    exploded_at: Optional[int] = None
    recorded_states: Optional[tuple] = None
    max_drift_displacement: float = 0.0


def tamed_step(
    x: np.ndarray, fx: np.ndarray, params: SchemeParams, noise_term: np.ndarray
) -> np.ndarray:
    """x + dt * fx / (1 + alpha * dt * ||fx||) + noise_term."""
    norm_f = np.linalg.norm(fx, axis=-1, keepdims=True)
    denom = 1.0 + params.alpha * params.dt * norm_f
    return x + params.dt * fx / denom + noise_term


def euler_step(
    x: np.ndarray, fx: np.ndarray, params: SchemeParams, noise_term: np.ndarray
) -> np.ndarray:
    """Plain explicit Euler-Maruyama update x + dt * fx + noise_term."""
    return x + params.dt * fx + noise_term


def modified_drift(problem: Problem, x: np.ndarray, alpha: float) -> np.ndarray:
    """f(x) / (1 + alpha * ||f(x)||), the drift the tamed scheme effectively uses.

    Its norm is below 1/alpha everywhere, which is exactly why the tamed
    update cannot blow up, and also why it cannot inherit the one-sided
    Lipschitz condition of f.
    """
    if not alpha > 0.0:
        raise ValueError("alpha must be positive")
    fx = eval_drift(problem, x)
    return fx / (1.0 + alpha * float(np.linalg.norm(fx)))


def simulate_path(
    problem: Problem,
    params: SchemeParams,
    kind: StepKind,
    x0: np.ndarray,
    stream: NoiseStream,
    checkpoints: Sequence[int] = (),
    zero_noise: bool = False,
) -> PathResult:
    """Iterate the chosen one-step map n_steps times along one noise stream.

    States are recorded at the requested checkpoint step indices. The
    path stops early at the first step whose state norm exceeds the
    overflow threshold or goes non-finite.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (problem.dim,):
        raise ValueError(f"x0 must have shape ({problem.dim},)")
    checkpoints = sorted(int(c) for c in checkpoints)
    if checkpoints and (checkpoints[0] < 0 or checkpoints[-1] > params.n_steps):
        raise ValueError("checkpoints must lie in [0, n_steps]")
    ckpt_set = set(checkpoints)

    amp = problem.noise.amplitude
    K = problem.noise.K
    kind = StepKind(kind)

    recorded = []
    x = x0.copy()
    sup_norm = float(np.linalg.norm(x))
    max_disp = 0.0
    exploded_at: Optional[int] = None

    if 0 in ckpt_set:
        recorded.append((0, x.copy()))
    if sup_norm > OVERFLOW_THRESHOLD or not np.isfinite(sup_norm):
        exploded_at = 0

    if exploded_at is None:
        for n in range(params.n_steps):
            with np.errstate(over="ignore", invalid="ignore"):
                fx = np.asarray(problem.drift(x), dtype=np.float64)
                if zero_noise:
                    noise_term = np.zeros(problem.dim)
                else:
                    noise_term = amp @ gaussian_increments(stream, params.dt, K)
                if kind is StepKind.TAMED:
                    x_next = tamed_step(x, fx, params, noise_term)
                else:
                    x_next = euler_step(x, fx, params, noise_term)
                disp = float(np.linalg.norm(x_next - x - noise_term))
            norm_next = float(np.linalg.norm(x_next))
            x = x_next
            if norm_next > OVERFLOW_THRESHOLD or not np.isfinite(norm_next):
                exploded_at = n + 1
                break
            if disp > max_disp:
                max_disp = disp
            if norm_next > sup_norm:
                sup_norm = norm_next
            if (n + 1) in ckpt_set:
                recorded.append((n + 1, x.copy()))

    return PathResult(
        final_state=x,
        sup_norm=sup_norm,
        exploded_at=exploded_at,
        recorded_states=tuple(recorded) if checkpoints else None,
        max_drift_displacement=max_disp,
    )
