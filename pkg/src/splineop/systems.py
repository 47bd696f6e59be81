"""Dynamics and safe-set specifications shared by all oracles and models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import InvalidSpecError
from .surface import ProblemKind

Interval = tuple[float, float]


@dataclass(frozen=True)
class SineDrift:
    """Two-tone time-only drift a1 sin(2 pi w1 t / 10 + psi1) + a2 sin(...)."""

    a1: float
    a2: float
    w1: float
    w2: float
    psi1: float
    psi2: float

    def value(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (self.a1 * np.sin(2.0 * np.pi * self.w1 * t / 10.0 + self.psi1)
                + self.a2 * np.sin(2.0 * np.pi * self.w2 * t / 10.0 + self.psi2))

    def antiderivative(self, t):
        """Closed-form integral of the drift from 0 to t."""
        t = np.asarray(t, dtype=np.float64)
        total = np.zeros_like(t)
        for a, w, psi in ((self.a1, self.w1, self.psi1), (self.a2, self.w2, self.psi2)):
            if a == 0.0:
                continue
            if w == 0.0:
                total = total + a * math.sin(psi) * t
                continue
            c = 2.0 * np.pi * w / 10.0
            total = total + (-a / c) * (np.cos(c * t + psi) - math.cos(psi))
        return total


@dataclass(frozen=True)
class LinearDrift:
    """Drift f(x) = H x for a constant square matrix H."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise InvalidSpecError("H must be square")
        object.__setattr__(self, "h", h)


@dataclass(frozen=True)
class ModeDrift:
    """One interaction mode of the agent network: (p, v) spring-damper.

    dp = v dt, dv = -(gamma p + beta2 v) dt with gamma = beta1 + lam.
    """

    lam: float
    beta1: float
    beta2: float

    @property
    def gamma(self) -> float:
        return self.beta1 + self.lam


Drift = Union[SineDrift, LinearDrift, ModeDrift]


@dataclass(frozen=True)
class SystemSpec:
    """A stochastic system, its noise, its safe box and the problem kind.

    safe_box bounds may be infinite on one side (e.g. recovery to
    [4, inf)).  ``domain`` is the bounded analysis region surfaces and
    solvers work on; it defaults to the safe box.
    """

    drift: Drift
    sigma: np.ndarray
    safe_box: tuple[Interval, ...]
    kind: ProblemKind
    domain: tuple[Interval, ...] = field(default=None)

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if np.any(sigma < 0):
            raise InvalidSpecError("noise magnitudes must be >= 0")
        object.__setattr__(self, "sigma", sigma)
        box = tuple((float(a), float(b)) for a, b in self.safe_box)
        for lo, hi in box:
            if not hi > lo:
                raise InvalidSpecError(f"empty safe box [{lo}, {hi}]")
        object.__setattr__(self, "safe_box", box)
        if self.domain is None:
            object.__setattr__(self, "domain", box)
        else:
            dom = tuple((float(a), float(b)) for a, b in self.domain)
            for lo, hi in dom:
                if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
                    raise InvalidSpecError(f"analysis domain [{lo}, {hi}] must be finite")
            object.__setattr__(self, "domain", dom)

    @property
    def n_state(self) -> int:
        return len(self.safe_box)


def drift_batch(spec: SystemSpec, x: np.ndarray, t: float) -> np.ndarray:
    """Drift evaluated for a batch of states x of shape (M, n)."""
    d = spec.drift
    if isinstance(d, SineDrift):
        return np.full_like(x, float(d.value(t)))
    if isinstance(d, LinearDrift):
        return x @ d.h.T
    if isinstance(d, ModeDrift):
        out = np.empty_like(x)
        out[:, 0] = x[:, 1]
        out[:, 1] = -(d.gamma * x[:, 0] + d.beta2 * x[:, 1])
        return out
    raise InvalidSpecError(f"unknown drift kind {type(d).__name__}")


def drift_points(spec: SystemSpec, points: np.ndarray) -> np.ndarray:
    """Drift at (x..., t) rows of `points`: shape (Q, n_state)."""
    points = np.asarray(points, dtype=np.float64)
    x, t = points[:, :-1], points[:, -1]
    d = spec.drift
    if isinstance(d, SineDrift):
        return d.value(t)[:, None]
    if isinstance(d, LinearDrift):
        return x @ d.h.T
    if isinstance(d, ModeDrift):
        out = np.empty_like(x)
        out[:, 0] = x[:, 1]
        out[:, 1] = -(d.gamma * x[:, 0] + d.beta2 * x[:, 1])
        return out
    raise InvalidSpecError(f"unknown drift kind {type(d).__name__}")


def drift_on_grid(spec: SystemSpec, axes: list[np.ndarray], t: float) -> list[np.ndarray]:
    """Per-component drift fields on a tensor grid of state axes."""
    mesh = np.meshgrid(*axes, indexing="ij")
    d = spec.drift
    if isinstance(d, SineDrift):
        return [np.full(mesh[0].shape, float(d.value(t)))]
    if isinstance(d, ModeDrift):
        p, v = mesh
        return [v, -(d.gamma * p + d.beta2 * v)]
    if isinstance(d, LinearDrift):
        stacked = np.stack([m.ravel() for m in mesh], axis=1)
        vals = stacked @ d.h.T
        return [vals[:, k].reshape(mesh[0].shape) for k in range(len(mesh))]
    raise InvalidSpecError(f"unknown drift kind {type(d).__name__}")
