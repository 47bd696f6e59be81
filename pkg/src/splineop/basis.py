"""Clamped B-spline bases on [0, 1] with analytic derivatives.

Basis functions follow the Cox-de Boor recursion with a clamped knot
vector: the first and last knot repeat ``order + 1`` times and interior
knots are equispaced, so the first/last basis functions interpolate the
endpoints.  Everything is defined on the normalized interval [0, 1];
``rescale`` maps physical coordinates (and derivative jacobians) onto it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidOrderError, InvalidSpecError

Interval = tuple[float, float]


@dataclass(frozen=True)
class KnotVector:
    """Non-decreasing knots of length ``count + order + 1`` on [0, 1].

    ``order`` is the piecewise-polynomial degree (order 0 = indicator
    functions), ``count`` the number of basis functions.
    """

    knots: np.ndarray
    order: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        object.__setattr__(self, "knots", knots)
        if self.order < 0:
            raise InvalidSpecError("spline order must be >= 0")
        if np.any(np.diff(knots) < 0):
            raise InvalidSpecError("knots must be non-decreasing")
        if self.count < self.order + 1:
            raise InvalidSpecError(
                f"need at least order+1 = {self.order + 1} basis functions, got {self.count}"
            )

    @property
    def count(self) -> int:
        return len(self.knots) - self.order - 1

    @property
    def n_spans(self) -> int:
        """Number of nonempty polynomial spans."""
        return self.count - self.order

    @property
    def span_width(self) -> float:
        """Width of one (equispaced) interior span."""
        return 1.0 / self.n_spans


def make_knots(count: int, order: int, domain: Interval = (0.0, 1.0)) -> KnotVector:
    """Clamped knot vector with equispaced interior knots.

    ``domain`` is validated (the basis itself lives on [0, 1]; physical
    domains are carried by :class:`BasisSpec`).
    """
    if count <= order:
        raise InvalidSpecError(
            f"count must exceed order: got count={count}, order={order}"
        )
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise InvalidSpecError(f"empty domain [{lo}, {hi}]")
    breaks = np.linspace(0.0, 1.0, count - order + 1)
    knots = np.concatenate([
        np.zeros(order),
        breaks,
        np.ones(order),
    ])
    return KnotVector(knots=knots, order=order)


def find_span(kv: KnotVector, x: float) -> int:
    """Index mu of the nonempty span with knots[mu] <= x < knots[mu+1].

    x = 1 is assigned to the last nonempty span (limit from the left).
    """
    mu = int(np.searchsorted(kv.knots, x, side="right")) - 1
    return min(max(mu, kv.order), kv.count - 1)


def _span_basis(knots: np.ndarray, degree: int, span: int, x: float) -> np.ndarray:
    """Values of the degree+1 basis functions that are nonzero on span."""
    vals = np.empty(degree + 1)
    vals[0] = 1.0
    left = np.empty(degree)
    right = np.empty(degree)
    for j in range(1, degree + 1):
        left[j - 1] = x - knots[span + 1 - j]
        right[j - 1] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            tmp = vals[r] / (right[r] + left[j - 1 - r])
            vals[r] = saved + right[r] * tmp
            saved = left[j - 1 - r] * tmp
        vals[j] = saved
    return vals


def _all_basis(kv: KnotVector, degree: int, x: float) -> np.ndarray:
    """Values of all degree-`degree` basis functions on kv's knots at x."""
    knots = kv.knots
    out = np.zeros(len(knots) - degree - 1)
    span = find_span(kv, x)
    out[span - degree: span + 1] = _span_basis(knots, degree, span, x)
    return out


def _check_unit_interval(x: float) -> float:
    x = float(x)
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"x = {x} outside the normalized domain [0, 1]")
    return x


def eval_all(kv: KnotVector, x: float) -> np.ndarray:
    """All basis values ``[B_1(x) ... B_count(x)]`` at x in [0, 1]."""
    x = _check_unit_interval(x)
    return _all_basis(kv, kv.order, x)


def _derivative_step(knots: np.ndarray, degree: int, vals: np.ndarray) -> np.ndarray:
    """Map degree-1 basis values to derivatives of the degree basis.

    B'_{i,degree} = degree * (v_i / (t_{i+degree} - t_i)
                              - v_{i+1} / (t_{i+degree+1} - t_{i+1}))
    with 0/0 := 0 at repeated knots.
    """
    n = len(vals) - 1
    idx = np.arange(n)
    d1 = knots[idx + degree] - knots[idx]
    d2 = knots[idx + degree + 1] - knots[idx + 1]
    t1 = np.divide(vals[:-1], d1, out=np.zeros(n), where=d1 > 0)
    t2 = np.divide(vals[1:], d2, out=np.zeros(n), where=d2 > 0)
    return degree * (t1 - t2)


def eval_derivative(kv: KnotVector, p: int, x: float) -> np.ndarray:
    """p-th derivatives of all basis functions at x (normalized domain).

    Exact on polynomial pieces: the closed-form derivative is evaluated
    by expanding it as p knot-difference steps applied to the lower-order
    basis values, with the 0/0 := 0 convention at repeated knots.
    """
    x = _check_unit_interval(x)
    if p < 0 or p > kv.order:
        raise InvalidOrderError(
            f"derivative order p={p} invalid for spline order {kv.order}"
        )
    if p == 0:
        return eval_all(kv, x)
    vals = _all_basis(kv, kv.order - p, x)
    for degree in range(kv.order - p + 1, kv.order + 1):
        vals = _derivative_step(kv.knots, degree, vals)
    return vals


def basis_matrix(kv: KnotVector, xs: np.ndarray, p: int = 0) -> np.ndarray:
    """Stack eval_derivative(kv, p, x) rows for each x: shape (len(xs), count)."""
    xs = np.asarray(xs, dtype=np.float64)
    out = np.empty((len(xs), kv.count))
    for q, x in enumerate(xs):
        out[q] = eval_derivative(kv, p, x)
    return out


def rescale(x_phys: float, domain: Interval) -> tuple[float, float]:
    """Map a physical coordinate to ([0,1], jacobian).

    The jacobian 1/(hi-lo) multiplies a normalized-domain derivative once
    per derivative order to produce the physical-domain derivative.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise InvalidSpecError(f"empty domain [{lo}, {hi}]")
    x = float(x_phys)
    if not (lo <= x <= hi):
        raise DomainError(f"x = {x} outside the physical domain [{lo}, {hi}]")
    return (x - lo) / (hi - lo), 1.0 / (hi - lo)


@dataclass(frozen=True)
class BasisSpec:
    """Tensor-product basis: one knot vector and physical interval per axis.

    Axis order is state dimensions first, time last.
    """

    knots: tuple[KnotVector, ...]
    domains: tuple[Interval, ...]

    def __post_init__(self):
        if len(self.knots) != len(self.domains):
            raise InvalidSpecError("one domain interval is required per axis")
        for lo, hi in self.domains:
            if not hi > lo:
                raise InvalidSpecError(f"empty domain [{lo}, {hi}]")

    @classmethod
    def uniform(cls, counts, orders, domains) -> "BasisSpec":
        kvs = tuple(make_knots(c, o, dom) for c, o, dom in zip(counts, orders, domains))
        return cls(knots=kvs, domains=tuple((float(a), float(b)) for a, b in domains))

    @property
    def ndim(self) -> int:
        return len(self.knots)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(kv.count for kv in self.knots)

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(kv.order for kv in self.knots)

    def normalize(self, point) -> tuple[np.ndarray, np.ndarray]:
        """Physical point -> (normalized coords, per-axis jacobians)."""
        point = np.asarray(point, dtype=np.float64)
        if point.shape != (self.ndim,):
            raise DomainError(
                f"expected a point with {self.ndim} coordinates, got shape {point.shape}"
            )
        us = np.empty(self.ndim)
        jacs = np.empty(self.ndim)
        for k in range(self.ndim):
            us[k], jacs[k] = rescale(point[k], self.domains[k])
        return us, jacs
