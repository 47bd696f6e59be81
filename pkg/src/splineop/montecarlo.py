"""Sampling oracles: SDE simulation, first-event estimates, closed forms.

Trajectories use per-trajectory Philox substreams (stream j is the base
key jumped j times), so estimates are bit-reproducible for a given
(seed, n_paths, dt) regardless of chunking, and estimates at nested
horizons reuse identical noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidSpecError
from .surface import ProblemKind
from .systems import SineDrift, SystemSpec, drift_batch

_NEVER = np.iinfo(np.int64).max


@dataclass(frozen=True)
class McResult:
    estimate: float
    stderr: float
    n_paths: int
    dt: float


def random_sine_dynamics(seed: int) -> SystemSpec:
    """Random two-tone drift; with probability 0.5 the second tone is off.

    Amplitudes ~ U(-1, 1), frequencies ~ U(0.5, 2), phases ~ U(0, 2 pi).
    The system recovers to [4, inf); surfaces live on x in [-10, 4].
    """
    rng = np.random.default_rng(seed)
    a1, a2 = rng.uniform(-1.0, 1.0, size=2)
    w1, w2 = rng.uniform(0.5, 2.0, size=2)
    psi1, psi2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
    if rng.random() < 0.5:
        a2 = 0.0
    drift = SineDrift(a1=a1, a2=a2, w1=w1, w2=w2, psi1=psi1, psi2=psi2)
    return SystemSpec(
        drift=drift,
        sigma=np.array([1.0]),
        safe_box=((4.0, math.inf),),
        kind=ProblemKind.RECOVERY,
        domain=((-10.0, 4.0),),
    )


def integrated_drift(system: SystemSpec, t) -> np.ndarray:
    """S(t) = integral of the (time-only) drift from 0 to t, closed form."""
    if not isinstance(system.drift, SineDrift):
        raise InvalidSpecError("integrated_drift requires a sine-family drift")
    return system.drift.antiderivative(t)


def _hit_density(system: SystemSpec, x: float, tau: np.ndarray) -> np.ndarray:
    bound = system.safe_box[0][0]
    a = bound - x
    s = integrated_drift(system, tau)
    out = np.zeros_like(tau)
    pos = tau > 0
    tp = tau[pos]
    out[pos] = a / np.sqrt(2.0 * np.pi * tp**3) * np.exp(-((a - s[pos]) ** 2) / (2.0 * tp))
    return out


def recovery_truth(system: SystemSpec, x: float, t: float, panels: int = 4096) -> float:
    """Probability of reaching the safe boundary by time t from x below it.

    Composite trapezoid over the hitting-time density; the integrand
    vanishes at tau -> 0 for x strictly below the boundary.  States at or
    above the boundary return 1.
    """
    bound = system.safe_box[0][0]
    if x >= bound:
        return 1.0
    if t <= 0.0:
        return 0.0
    tau = np.linspace(0.0, t, panels + 1)
    dens = _hit_density(system, x, tau)
    return float(np.clip(np.trapezoid(dens, tau), 0.0, 1.0))


def recovery_profile(system: SystemSpec, xs, ts, panels: int = 8192) -> np.ndarray:
    """recovery_truth on a grid: shape (len(xs), len(ts)).

    One dense cumulative trapezoid per state, then linear interpolation
    onto the requested horizons.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    t_max = float(ts.max())
    bound = system.safe_box[0][0]
    out = np.empty((len(xs), len(ts)))
    if t_max <= 0.0:
        for i, x in enumerate(xs):
            out[i] = 1.0 if x >= bound else 0.0
        return out
    tau = np.linspace(0.0, t_max, panels + 1)
    dtau = tau[1] - tau[0]
    for i, x in enumerate(xs):
        if x >= bound:
            out[i] = 1.0
            continue
        dens = _hit_density(system, x, tau)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * dtau)])
        out[i] = np.clip(np.interp(ts, tau, cum), 0.0, 1.0)
        out[i][ts <= 0.0] = 0.0
    return out


def first_event_steps(
    drift_fn: Callable[[np.ndarray, float], np.ndarray],
    sigma: np.ndarray,
    event_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    n_steps: int,
    dt: float,
    n_paths: int,
    seed: int,
    chunk: int = 4096,
    time_block: int = 1000,
) -> np.ndarray:
    """First step index (0..n_steps) at which event_fn holds, per path.

    Index 0 is the initial state; paths without an event get a sentinel
    larger than n_steps.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    nd = len(x0)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (nd,))
    root_dt = math.sqrt(dt)
    base = np.random.Philox(key=seed)
    out = np.full(n_paths, _NEVER, dtype=np.int64)
    for start in range(0, n_paths, chunk):
        count = min(chunk, n_paths - start)
        gens = [np.random.Generator(base.jumped(start + j)) for j in range(count)]
        x = np.tile(x0, (count, 1))
        steps = np.full(count, _NEVER, dtype=np.int64)
        hit = event_fn(x)
        steps[hit] = 0
        done = 0
        for j0 in range(0, n_steps, time_block):
            blk = min(time_block, n_steps - j0)
            noise = np.empty((count, blk, nd))
            for j, gen in enumerate(gens):
                noise[j] = gen.standard_normal((blk, nd))
            for b in range(blk):
                step = j0 + b + 1
                t = (step - 1) * dt
                x += drift_fn(x, t) * dt + sigma * root_dt * noise[:, b, :]
                hit = event_fn(x) & (steps == _NEVER)
                steps[hit] = step
            done = int(np.sum(steps != _NEVER))
            if done == count:
                break
        out[start: start + count] = steps
    return out


def _event_fn(system: SystemSpec):
    los = np.array([lo for lo, _ in system.safe_box])
    his = np.array([hi for _, hi in system.safe_box])
    if system.kind is ProblemKind.SAFETY:
        # exit: leaving the open box (being on the boundary counts as exit)
        return lambda x: np.any((x <= los) | (x >= his), axis=1)
    # recovery: entering the closed safe region
    return lambda x: np.all((x >= los) & (x <= his), axis=1)


def _estimate_at(steps: np.ndarray, step_index: int, kind: ProblemKind,
                 n_paths: int, dt: float) -> McResult:
    if kind is ProblemKind.SAFETY:
        p = float(np.mean(steps > step_index))
    else:
        p = float(np.mean(steps <= step_index))
    return McResult(estimate=p, stderr=math.sqrt(p * (1.0 - p) / n_paths),
                    n_paths=n_paths, dt=dt)


def mc_estimate(system: SystemSpec, x0, horizon: float, n_paths: int,
                dt: float, seed: int) -> McResult:
    """Euler-Maruyama estimate of the safety (or recovery) probability.

    Safety counts paths that never leave the open safe box up to the
    horizon; recovery counts paths that touch the closed safe region at
    least once.  The initial state is checked at t = 0.
    """
    if n_paths < 1:
        raise InvalidSpecError("n_paths must be >= 1")
    if dt <= 0.0:
        raise InvalidSpecError("dt must be > 0")
    n_steps = int(round(horizon / dt)) if horizon > 0 else 0
    steps = first_event_steps(
        lambda x, t: drift_batch(system, x, t), system.sigma, _event_fn(system),
        x0, n_steps, dt, n_paths, seed,
    )
    return _estimate_at(steps, n_steps, system.kind, n_paths, dt)


def mc_profile(system: SystemSpec, x0, horizon: float, n_paths: int,
               dt: float, seed: int, times) -> list[McResult]:
    """mc_estimate at several nested horizons from one set of trajectories."""
    n_steps = int(round(horizon / dt)) if horizon > 0 else 0
    steps = first_event_steps(
        lambda x, t: drift_batch(system, x, t), system.sigma, _event_fn(system),
        x0, n_steps, dt, n_paths, seed,
    )
    out = []
    for t in np.asarray(times, dtype=np.float64):
        idx = min(int(round(t / dt)), n_steps)
        out.append(_estimate_at(steps, idx, system.kind, n_paths, dt))
    return out
