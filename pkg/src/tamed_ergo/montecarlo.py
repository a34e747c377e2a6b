"""Parallel Monte Carlo estimation of path functionals.

Paths are simulated in vectorized blocks whose contents depend only on
the absolute path index, never on the total path count or the worker
count. Per-path observable values are aggregated with math.fsum (exact
summation), so an Estimate is bit-identical for any worker count and
the first M paths of a larger run reproduce the standalone M-path run.

Exploded paths (possible only for the plain Euler baseline) are
excluded from the average and counted; the tamed scheme is asserted to
never explode on catalog-scale runs.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import Problem
from .noise import MasterSeed, normal_path_block
from .scheme import OVERFLOW_THRESHOLD, SchemeParams, StepKind

__all__ = [
    "AllPathsExploded",
    "Observable",
    "Estimate",
    "EnsembleResult",
    "CoupledResult",
    "run_ensemble",
    "run_coupled",
    "estimate_observable",
    "estimate_moments_at_times",
    "resolve_workers",
]

# Paths per simulation block, chosen so one block's increment buffer
# stays modest; depends only on the run shape, never on M or workers.
_TARGET_BLOCK_DRAWS = 4_000_000
_MAX_BLOCK_PATHS = 8192


class AllPathsExploded(Exception):
    """Every requested path exploded; no estimate can be formed."""


@dataclass(frozen=True)
class Observable:
    """A pure scalar functional of the state, evaluated on batches.

    kinds: norm_moment (||x||^order), coordinate_moment (x[index]^order),
    custom_polynomial (sum_j coeffs[j] * x[0]^j).
    """

    kind: str
    order: int = 0
    index: int = 0
    coeffs: tuple = ()
    description: str = ""

    @classmethod
    def norm_moment(cls, order: int) -> "Observable":
        if order < 1:
            raise ValueError("order must be positive")
        return cls(kind="norm_moment", order=order, description=f"||x||^{order}")

    @classmethod
    def coordinate_moment(cls, index: int, order: int) -> "Observable":
        if order < 1:
            raise ValueError("order must be positive")
        if index < 0:
            raise ValueError("index must be nonnegative")
        return cls(
            kind="coordinate_moment",
            index=index,
            order=order,
            description=f"x[{index}]^{order}",
        )

    @classmethod
    def polynomial(cls, coeffs) -> "Observable":
        coeffs = tuple(float(c) for c in coeffs)
        if not coeffs:
            raise ValueError("at least one coefficient is required")
        return cls(
            kind="custom_polynomial",
            coeffs=coeffs,
            description="poly(" + ",".join(repr(c) for c in coeffs) + ")",
        )

    def evaluate(self, states: np.ndarray) -> np.ndarray:
        """Map states of shape (..., d) to values of shape (...)."""
        states = np.asarray(states, dtype=np.float64)
        if self.kind == "norm_moment":
            s = np.sum(states * states, axis=-1)
            if self.order % 2 == 0:
                return s ** (self.order // 2)
            return s ** (self.order / 2.0)
        if self.kind == "coordinate_moment":
            return states[..., self.index] ** self.order
        if self.kind == "custom_polynomial":
            x = states[..., 0]
            acc = np.zeros_like(x)
            for c in reversed(self.coeffs):
                acc = acc * x + c
            return acc
        raise ValueError(f"unknown observable kind {self.kind!r}")


def _fsum(values: np.ndarray) -> float:
    return math.fsum(values.tolist())


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with rigorous uncertainty bookkeeping."""

    mean: float
    variance: float
    n_samples: int
    stderr: float
    ci95_halfwidth: float
    n_exploded: int = 0

    @classmethod
    def from_values(cls, values: np.ndarray, n_exploded: int = 0) -> "Estimate":
        values = np.asarray(values, dtype=np.float64)
        n = values.size
        if n < 1:
            raise ValueError("at least one sample value is required")
        mean = _fsum(values) / n
        variance = _fsum((values - mean) ** 2) / (n - 1) if n > 1 else 0.0
        variance = max(variance, 0.0)
        stderr = math.sqrt(variance / n)
        return cls(
            mean=mean,
            variance=variance,
            n_samples=n,
            stderr=stderr,
            ci95_halfwidth=1.96 * stderr,
            n_exploded=n_exploded,
        )


def resolve_workers(workers: Optional[int]) -> int:
    """Explicit worker count, or the TAMED_ERGO_WORKERS default, or 1."""
    if workers is None:
        workers = int(os.environ.get("TAMED_ERGO_WORKERS", "1"))
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def _block_size(draws_per_path: int) -> int:
    b = _TARGET_BLOCK_DRAWS // max(1, draws_per_path)
    return max(1, min(_MAX_BLOCK_PATHS, b))


@dataclass(frozen=True)
class EnsembleResult:
    """Per-path observable readouts for one shared path ensemble.

    values has shape (n_checkpoints, n_observables, M); entries for paths
    already exploded at a checkpoint are NaN. exploded_at is -1 for paths
    that never exploded.
    """

    checkpoint_steps: tuple
    observables: tuple
    values: np.ndarray
    exploded_at: np.ndarray
    max_drift_displacement: float
    dt: float

    def included(self, ckpt_index: int) -> np.ndarray:
        step = self.checkpoint_steps[ckpt_index]
        ex = self.exploded_at
        return (ex < 0) | (ex > step)

    def estimate(self, ckpt_index: int, obs_index: int = 0) -> Estimate:
        mask = self.included(ckpt_index)
        vals = self.values[ckpt_index, obs_index, mask]
        n_exploded = int(np.count_nonzero(~mask))
        if vals.size == 0:
            raise AllPathsExploded(
                f"all {mask.size} paths exploded before step "
                f"{self.checkpoint_steps[ckpt_index]}"
            )
        return Estimate.from_values(vals, n_exploded=n_exploded)


def _simulate_block(
    problem: Problem,
    params: SchemeParams,
    kind: StepKind,
    x0: np.ndarray,
    seed: int,
    path0: int,
    n_paths: int,
    ckpt_steps: tuple,
    observables: tuple,
    zero_noise: bool,
):
    d = problem.dim
    K = problem.noise.K
    N = params.n_steps
    B = n_paths
    dt = params.dt
    alpha = params.alpha
    tamed = StepKind(kind) is StepKind.TAMED
    amp_t = np.ascontiguousarray(problem.noise.amplitude.T)  # (K, d)

    if zero_noise or N == 0:
        incr = None
    else:
        incr = normal_path_block(seed, path0, B, N * K)
        incr *= math.sqrt(dt)
        incr = incr.reshape(B, N, K)

    ckpt_of_step = {s: i for i, s in enumerate(ckpt_steps)}
    values = np.full((len(ckpt_steps), len(observables), B), np.nan)
    exploded_at = np.full(B, -1, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    max_disp = 0.0

    state = np.broadcast_to(np.asarray(x0, dtype=np.float64), (B, d)).copy()
    if float(np.linalg.norm(x0)) > OVERFLOW_THRESHOLD or not np.all(np.isfinite(x0)):
        exploded_at[:] = 0
        alive[:] = False
        state[:] = 0.0

    def record(ci):
        for oi, obs in enumerate(observables):
            v = obs.evaluate(state)
            v[~alive] = np.nan
            values[ci, oi, :] = v

    if 0 in ckpt_of_step:
        record(ckpt_of_step[0])

    for n in range(N):
        if not alive.any():
            break
        with np.errstate(over="ignore", invalid="ignore"):
            fx = np.asarray(problem.drift(state), dtype=np.float64)
            if tamed:
                norm_f = np.sqrt(np.einsum("ij,ij->i", fx, fx))[:, None]
                upd = dt * fx / (1.0 + alpha * dt * norm_f)
            else:
                upd = dt * fx
            if incr is None:
                new = state + upd
            else:
                new = state + upd + incr[:, n, :] @ amp_t
            norms = np.sqrt(np.einsum("ij,ij->i", new, new))
        bad = alive & (~np.isfinite(norms) | (norms > OVERFLOW_THRESHOLD))
        if bad.any():
            exploded_at[bad] = n + 1
            alive &= ~bad
            new[~alive] = 0.0
        if alive.any():
            with np.errstate(invalid="ignore"):
                disp = np.sqrt(np.einsum("ij,ij->i", upd, upd))
            step_max = float(np.max(disp[alive]))
            if step_max > max_disp:
                max_disp = step_max
        state = new
        ci = ckpt_of_step.get(n + 1)
        if ci is not None:
            record(ci)

    return values, exploded_at, max_disp


def _ensemble_task(args):
    return _simulate_block(*args)


def _run_tasks(tasks, worker_fn, workers: int):
    if workers == 1 or len(tasks) == 1:
        return [worker_fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(worker_fn, tasks, chunksize=1))


def run_ensemble(
    problem: Problem,
    params: SchemeParams,
    kind: StepKind,
    x0,
    observables: Sequence[Observable],
    checkpoint_steps: Sequence[int],
    M: int,
    master: MasterSeed,
    workers: Optional[int] = None,
    zero_noise: bool = False,
) -> EnsembleResult:
    """Simulate paths 0..M-1 once and read out every observable at every
    checkpoint step from the shared ensemble."""
    if M < 1:
        raise ValueError("M must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (problem.dim,):
        raise ValueError(f"x0 must have shape ({problem.dim},)")
    ckpt_steps = tuple(sorted(set(int(s) for s in checkpoint_steps)))
    if ckpt_steps and (ckpt_steps[0] < 0 or ckpt_steps[-1] > params.n_steps):
        raise ValueError("checkpoint steps must lie in [0, n_steps]")
    observables = tuple(observables)
    workers = resolve_workers(workers)

    B = _block_size(params.n_steps * problem.noise.K)
    starts = list(range(0, M, B))
    tasks = [
        (problem, params, kind, x0, master.seed, p0, min(B, M - p0),
         ckpt_steps, observables, zero_noise)
        for p0 in starts
    ]
    results = _run_tasks(tasks, _ensemble_task, workers)

    values = np.full((len(ckpt_steps), len(observables), M), np.nan)
    exploded_at = np.full(M, -1, dtype=np.int64)
    max_disp = 0.0
    for p0, (vals, expl, disp) in zip(starts, results):
        b = vals.shape[2]
        values[:, :, p0 : p0 + b] = vals
        exploded_at[p0 : p0 + b] = expl
        max_disp = max(max_disp, disp)

    return EnsembleResult(
        checkpoint_steps=ckpt_steps,
        observables=observables,
        values=values,
        exploded_at=exploded_at,
        max_drift_displacement=max_disp,
        dt=params.dt,
    )


def _assert_no_tamed_explosions(kind: StepKind, result_exploded: np.ndarray):
    if StepKind(kind) is StepKind.TAMED and np.any(result_exploded >= 0):
        raise AssertionError(
            "tamed-scheme run reported exploded paths; the taming bound makes "
            "this impossible at catalog scales, so something is broken"
        )


def estimate_observable(
    problem: Problem,
    params: SchemeParams,
    kind: StepKind,
    x0,
    obs: Observable,
    M: int,
    master: MasterSeed,
    workers: Optional[int] = None,
) -> Estimate:
    """Monte Carlo estimate of E[obs(X_N)] over M independent paths."""
    if M < 2:
        raise ValueError("M must be >= 2")
    result = run_ensemble(
        problem, params, kind, x0,
        observables=(obs,),
        checkpoint_steps=(params.n_steps,),
        M=M, master=master, workers=workers,
    )
    _assert_no_tamed_explosions(kind, result.exploded_at)
    return result.estimate(0, 0)


def estimate_moments_at_times(
    problem: Problem,
    params: SchemeParams,
    x0,
    order: int,
    time_checkpoints: Sequence[float],
    M: int,
    master: MasterSeed,
    workers: Optional[int] = None,
) -> list:
    """E[||X_t||^order] at several times, all from one shared tamed ensemble."""
    if M < 2:
        raise ValueError("M must be >= 2")
    if order < 1 or order % 2 != 0:
        raise ValueError("order must be a positive even integer")
    times = [float(t) for t in time_checkpoints]
    steps = []
    for t in times:
        s = round(t / params.dt)
        if abs(t - s * params.dt) > 1e-9 * max(1.0, abs(t)) or s < 0 or s > params.n_steps:
            raise ValueError(f"checkpoint {t} is not a step multiple within [0, N*dt]")
        steps.append(s)
    obs = Observable.norm_moment(order)
    result = run_ensemble(
        problem, params, StepKind.TAMED, x0,
        observables=(obs,),
        checkpoint_steps=tuple(steps),
        M=M, master=master, workers=workers,
    )
    _assert_no_tamed_explosions(StepKind.TAMED, result.exploded_at)
    step_to_ci = {s: i for i, s in enumerate(result.checkpoint_steps)}
    return [(t, result.estimate(step_to_ci[s], 0)) for t, s in zip(times, steps)]


# ---------------------------------------------------------------------------
# Common-random-numbers coupling: several time-step sizes share one Brownian
# path per path index by deriving each level's increments as fixed-order
# group sums over a common fine grid (repeated coarse_from_fine coupling).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledResult:
    """Per-path readouts for dt levels driven by shared Brownian paths.

    values has shape (n_levels, n_checkpoint_times, M).
    """

    level_dts: tuple
    checkpoint_times: tuple
    values: np.ndarray
    exploded_at: np.ndarray  # (n_levels, M)

    def estimate(self, level: int, ckpt_index: int = 0) -> Estimate:
        ex = self.exploded_at[level]
        mask = ex < 0
        vals = self.values[level, ckpt_index, mask]
        if vals.size == 0:
            raise AllPathsExploded(f"all paths exploded at level {level}")
        return Estimate.from_values(vals, n_exploded=int(np.count_nonzero(~mask)))

    def difference_estimate(self, level_a: int, level_b: int, ckpt_index: int = 0) -> Estimate:
        """Estimate of E[obs_a - obs_b] over shared paths (the CRN estimator)."""
        mask = (self.exploded_at[level_a] < 0) & (self.exploded_at[level_b] < 0)
        d = self.values[level_a, ckpt_index, mask] - self.values[level_b, ckpt_index, mask]
        if d.size == 0:
            raise AllPathsExploded("no surviving path pairs")
        return Estimate.from_values(d, n_exploded=int(np.count_nonzero(~mask)))


def _integer_ratio(a: float, b: float) -> int:
    g = a / b
    r = round(g)
    if r < 1 or abs(g - r) > 1e-9 * max(1.0, abs(g)):
        raise ValueError(f"{a} is not an integer multiple of {b}")
    return r


def _simulate_coupled_block(
    problem: Problem,
    x0: np.ndarray,
    level_dts: tuple,
    level_steps: tuple,
    dt_base: float,
    n_base: int,
    alpha: float,
    kind: StepKind,
    obs: Observable,
    ckpt_steps_per_level: tuple,
    seed: int,
    path0: int,
    n_paths: int,
):
    d = problem.dim
    K = problem.noise.K
    B = n_paths
    tamed = StepKind(kind) is StepKind.TAMED
    amp_t = np.ascontiguousarray(problem.noise.amplitude.T)

    z = normal_path_block(seed, path0, B, n_base * K)
    z *= math.sqrt(dt_base)
    z = z.reshape(B, n_base, K)

    n_levels = len(level_dts)
    n_ckpts = len(ckpt_steps_per_level[0])
    values = np.full((n_levels, n_ckpts, B), np.nan)
    exploded_at = np.full((n_levels, B), -1, dtype=np.int64)

    for li in range(n_levels):
        dt = level_dts[li]
        n_steps = level_steps[li]
        g = _integer_ratio(dt, dt_base)
        incr = z[:, : n_steps * g, :].reshape(B, n_steps, g, K).sum(axis=2)
        ckpt_of_step = {s: i for i, s in enumerate(ckpt_steps_per_level[li])}
        state = np.broadcast_to(np.asarray(x0, dtype=np.float64), (B, d)).copy()
        alive = np.ones(B, dtype=bool)
        if 0 in ckpt_of_step:
            v = obs.evaluate(state)
            values[li, ckpt_of_step[0], :] = v
        for n in range(n_steps):
            if not alive.any():
                break
            with np.errstate(over="ignore", invalid="ignore"):
                fx = np.asarray(problem.drift(state), dtype=np.float64)
                if tamed:
                    norm_f = np.sqrt(np.einsum("ij,ij->i", fx, fx))[:, None]
                    upd = dt * fx / (1.0 + alpha * dt * norm_f)
                else:
                    upd = dt * fx
                new = state + upd + incr[:, n, :] @ amp_t
                norms = np.sqrt(np.einsum("ij,ij->i", new, new))
            bad = alive & (~np.isfinite(norms) | (norms > OVERFLOW_THRESHOLD))
            if bad.any():
                exploded_at[li, bad] = n + 1
                alive &= ~bad
                new[~alive] = 0.0
            state = new
            ci = ckpt_of_step.get(n + 1)
            if ci is not None:
                v = obs.evaluate(state)
                v[~alive] = np.nan
                values[li, ci, :] = v
    return values, exploded_at


def _coupled_task(args):
    return _simulate_coupled_block(*args)


def run_coupled(
    problem: Problem,
    x0,
    T: float,
    dt_list: Sequence[float],
    obs: Observable,
    M: int,
    master: MasterSeed,
    checkpoint_times: Optional[Sequence[float]] = None,
    fine_ratio: Optional[int] = None,
    alpha: float = 1.0,
    dt_cap: float = 1.0,
    kind: StepKind = StepKind.TAMED,
    workers: Optional[int] = None,
) -> CoupledResult:
    """Simulate all dt levels over [0, T] with shared Brownian paths.

    Levels are the entries of dt_list, plus one extra fine level of step
    dt_min / fine_ratio appended last when fine_ratio is given (the
    fine-step reference for weak-error comparisons). Each level's
    increments are group sums of the common fine-grid increments.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    x0 = np.asarray(x0, dtype=np.float64)
    dts = [float(dt) for dt in dt_list]
    if sorted(dts, reverse=True) != dts or len(set(dts)) != len(dts):
        raise ValueError("dt_list must be strictly decreasing")
    dt_base = dts[-1] / fine_ratio if fine_ratio else dts[-1]
    level_dts = tuple(dts + [dt_base]) if fine_ratio else tuple(dts)
    for dt in level_dts:
        SchemeParams(dt=dt, n_steps=1, dt_cap=dt_cap, alpha=alpha)
        _integer_ratio(dt, dt_base)
    level_steps = tuple(_integer_ratio(T, dt) for dt in level_dts)
    n_base = _integer_ratio(T, dt_base)

    if checkpoint_times is None:
        checkpoint_times = (T,)
    checkpoint_times = tuple(float(t) for t in checkpoint_times)
    ckpt_steps_per_level = []
    for dt, n_steps in zip(level_dts, level_steps):
        steps = []
        for t in checkpoint_times:
            s = round(t / dt)
            if abs(t - s * dt) > 1e-9 * max(1.0, abs(t)) or s > n_steps:
                raise ValueError(f"checkpoint time {t} not on the dt={dt} grid")
            steps.append(s)
        ckpt_steps_per_level.append(tuple(steps))
    ckpt_steps_per_level = tuple(ckpt_steps_per_level)

    workers = resolve_workers(workers)
    B = _block_size(n_base * problem.noise.K)
    starts = list(range(0, M, B))
    tasks = [
        (problem, x0, level_dts, level_steps, dt_base, n_base, alpha, kind,
         obs, ckpt_steps_per_level, master.seed, p0, min(B, M - p0))
        for p0 in starts
    ]
    results = _run_tasks(tasks, _coupled_task, workers)

    values = np.full((len(level_dts), len(checkpoint_times), M), np.nan)
    exploded_at = np.full((len(level_dts), M), -1, dtype=np.int64)
    for p0, (vals, expl) in zip(starts, results):
        b = vals.shape[2]
        values[:, :, p0 : p0 + b] = vals
        exploded_at[:, p0 : p0 + b] = expl

    if StepKind(kind) is StepKind.TAMED and np.any(exploded_at >= 0):
        raise AssertionError("tamed-scheme coupled run reported exploded paths")
    return CoupledResult(
        level_dts=level_dts,
        checkpoint_times=checkpoint_times,
        values=values,
        exploded_at=exploded_at,
    )
