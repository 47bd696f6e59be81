"""Tensor-product spline surfaces driven by a control-point tensor.

A surface F(x_1..x_n, t) is the full tensor contraction of a control
tensor with per-axis clamped B-spline bases.  Because end knots repeat,
initial and boundary conditions are imposed *exactly* by overwriting
control-point slices; no learning or penalty is involved.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .basis import BasisSpec, KnotVector, basis_matrix, eval_all, eval_derivative, make_knots
from .errors import ConditioningError, ConfigError, DomainError, InvalidSpecError
from .serialization import read_payload, take_floats, write_payload


class ProblemKind(Enum):
    """Which it/boundary constants the surface is clamped to.

    SAFETY: stay-inside probability; starts at 1, absorbed to 0 on every
    face of the box.  RECOVERY: hit-the-safe-set probability on a domain
    truncated below; starts at 0, equals 1 on the safe-set face (upper
    end of each state axis) and 0 on the far truncation face.
    """

    SAFETY = "safety"
    RECOVERY = "recovery"


# (initial value, lower-face value, upper-face value) per kind
_CLAMP = {
    ProblemKind.SAFETY: (1.0, 0.0, 0.0),
    ProblemKind.RECOVERY: (0.0, 0.0, 1.0),
}


@dataclass
class ControlTensor:
    """Dense control points of shape basis.shape (state axes, then time)."""

    values: np.ndarray
    basis: BasisSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.basis.shape:
            raise InvalidSpecError(
                f"control tensor shape {self.values.shape} does not match "
                f"basis counts {self.basis.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidSpecError("control tensor contains non-finite values")

    @property
    def ndim(self) -> int:
        return self.values.ndim


class SurfacePartials(NamedTuple):
    value: float
    dt: float
    grad_x: np.ndarray
    hess_diag: np.ndarray


def _contract(values: np.ndarray, vecs: list[np.ndarray]) -> float:
    out = values
    for v in vecs:
        out = np.tensordot(out, v, axes=([0], [0]))
    return float(out)


def eval_surface(ct: ControlTensor, x, t: float) -> SurfacePartials:
    """Value, time derivative, spatial gradient and diagonal Hessian at (x, t).

    All derivatives are in physical coordinates (jacobian-corrected).
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    point = np.concatenate([x, [t]])
    us, jacs = ct.basis.normalize(point)
    ndim = ct.ndim
    b0 = [eval_all(ct.basis.knots[k], us[k]) for k in range(ndim)]
    value = _contract(ct.values, b0)

    def _with_deriv(axis: int, p: int) -> float:
        vecs = list(b0)
        vecs[axis] = eval_derivative(ct.basis.knots[axis], p, us[axis]) * jacs[axis] ** p
        return _contract(ct.values, vecs)

    n_state = ndim - 1
    grad = np.array([_with_deriv(k, 1) for k in range(n_state)])
    hess = np.array([_with_deriv(k, 2) for k in range(n_state)])
    dt = _with_deriv(ndim - 1, 1)
    return SurfacePartials(value=value, dt=dt, grad_x=grad, hess_diag=hess)


def point_matrices(basis: BasisSpec, points: np.ndarray, p_per_axis=None) -> list[np.ndarray]:
    """Per-axis basis(-derivative) matrices for a batch of physical points.

    points: (Q, ndim).  p_per_axis: derivative order per axis (default 0).
    Jacobian powers for derivative axes are included.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != basis.ndim:
        raise DomainError(f"points must have shape (Q, {basis.ndim})")
    if p_per_axis is None:
        p_per_axis = [0] * basis.ndim
    mats = []
    for k in range(basis.ndim):
        lo, hi = basis.domains[k]
        xs = points[:, k]
        if np.any(xs < lo) or np.any(xs > hi):
            raise DomainError(f"axis {k}: points outside [{lo}, {hi}]")
        us = (xs - lo) / (hi - lo)
        p = p_per_axis[k]
        mat = basis_matrix(basis.knots[k], us, p=p)
        if p:
            mat = mat * (1.0 / (hi - lo)) ** p
        mats.append(mat)
    return mats


_LETTERS = "abcdefghij"


def contract_batch(values: np.ndarray, mats: list[np.ndarray]) -> np.ndarray:
    """einsum of a control tensor against per-axis (Q, ell_k) matrices -> (Q,)."""
    axes = _LETTERS[: values.ndim]
    spec = axes + "," + ",".join("q" + c for c in axes) + "->q"
    return np.einsum(spec, values, *mats)


def evaluate_batch(ct: ControlTensor, points: np.ndarray) -> np.ndarray:
    """Surface values at a batch of physical points (Q, ndim)."""
    return contract_batch(ct.values, point_matrices(ct.basis, points))


def icbc_mask(shape: tuple[int, ...]) -> np.ndarray:
    """Boolean mask of control entries overwritten by apply_icbc."""
    mask = np.zeros(shape, dtype=bool)
    mask[..., 0] = True
    for k in range(len(shape) - 1):
        sl = [slice(None)] * len(shape)
        sl[k] = 0
        mask[tuple(sl)] = True
        sl[k] = shape[k] - 1
        mask[tuple(sl)] = True
    return mask


def apply_icbc(ct: ControlTensor, kind: ProblemKind) -> ControlTensor:
    """Copy with initial slice and boundary faces overwritten.

    The initial (first time index) slice is set first; boundary faces are
    written afterwards for every time index, so faces win at shared
    corners.
    """
    ic, bc_lo, bc_hi = _CLAMP[kind]
    vals = ct.values.copy()
    vals[..., 0] = ic
    for k in range(ct.ndim - 1):
        sl = [slice(None)] * ct.ndim
        sl[k] = 0
        vals[tuple(sl)] = bc_lo
        sl[k] = vals.shape[k] - 1
        vals[tuple(sl)] = bc_hi
    return ControlTensor(values=vals, basis=ct.basis)


def span_quadrature(kv: KnotVector, points_per_span: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1], per nonempty span."""
    if points_per_span < 1:
        raise ConfigError("points_per_span must be >= 1")
    g, w = np.polynomial.legendre.leggauss(points_per_span)
    breaks = np.unique(kv.knots)
    nodes, weights = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        nodes.append(0.5 * (a + b) + 0.5 * (b - a) * g)
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _quad_pieces(basis: BasisSpec, points_per_span: int):
    """Per-axis (physical nodes, weights, basis matrix at nodes)."""
    pieces = []
    for kv, (lo, hi) in zip(basis.knots, basis.domains):
        pps = max(points_per_span, kv.order + 1)
        u, w = span_quadrature(kv, pps)
        phi = basis_matrix(kv, u)
        pieces.append((lo + (hi - lo) * u, w, phi))
    return pieces


def _sample_target(target: Callable, phys_nodes: list[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*phys_nodes, indexing="ij")
    vals = np.asarray(target(*mesh), dtype=np.float64)
    expected = tuple(len(n) for n in phys_nodes)
    if vals.shape != expected:
        raise ConfigError(
            f"target must evaluate elementwise on the grid: got shape {vals.shape}, "
            f"expected {expected}"
        )
    if not np.all(np.isfinite(vals)):
        raise ConditioningError("target produced non-finite values on the quadrature grid")
    return vals


def _weighted_rhs(target_vals: np.ndarray, pieces) -> np.ndarray:
    """b[i1..im] = sum_q w_q target_q prod_k phi_k[q_k, i_k]."""
    out = target_vals
    for _, w, phi in pieces:
        out = np.tensordot(out, w[:, None] * phi, axes=([0], [0]))
    return out


def _gram_apply(c: np.ndarray, pieces) -> np.ndarray:
    out = c
    for _, w, phi in pieces:
        gram = phi.T @ (w[:, None] * phi)
        out = np.tensordot(out, gram, axes=([0], [0]))
    return out


def l2_project(target: Callable, basis: BasisSpec, points_per_span: int = 8) -> ControlTensor:
    """Best L2 approximation of a scalar field in the spline span.

    The Gram matrix factorizes over axes, so the normal equations are
    solved by one SPD solve per axis.  ``target`` must evaluate
    elementwise on meshgrid arrays of physical coordinates.
    """
    if points_per_span < 4:
        raise ConfigError("points_per_span must be >= 4")
    pieces = _quad_pieces(basis, points_per_span)
    vals = _sample_target(target, [p[0] for p in pieces])
    c = _weighted_rhs(vals, pieces)
    for _, w, phi in pieces:
        gram = phi.T @ (w[:, None] * phi)
        try:
            factor = cho_factor(gram)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"Gram matrix is not SPD: {exc}") from exc
        flat = c.reshape(c.shape[0], -1)
        solved = cho_solve(factor, flat)
        c = solved.reshape(c.shape)
        c = np.moveaxis(c, 0, -1)
    return ControlTensor(values=c, basis=basis)


def l2_error(target: Callable, ct: ControlTensor, points_per_span: int = 8) -> float:
    """Quadrature L2 norm of target - surface over the physical domain."""
    pieces = _quad_pieces(ct.basis, points_per_span)
    vals = _sample_target(target, [p[0] for p in pieces])
    approx = ct.values
    for _, _, phi in pieces:
        approx = np.tensordot(approx, phi, axes=([0], [1]))
    err2 = (vals - approx) ** 2
    for _, w, _ in pieces:
        err2 = np.tensordot(err2, w, axes=([0], [0]))
    return float(np.sqrt(err2))


def projection_orthogonality(target: Callable, ct: ControlTensor,
                             points_per_span: int = 8) -> np.ndarray:
    """<target - surface, phi_i> for every basis function (quadrature)."""
    pieces = _quad_pieces(ct.basis, points_per_span)
    vals = _sample_target(target, [p[0] for p in pieces])
    return _weighted_rhs(vals, pieces) - _gram_apply(ct.values, pieces)


def save_control_tensor(ct: ControlTensor, path) -> None:
    lines = [f"dims {ct.ndim}"]
    for kv, (lo, hi) in zip(ct.basis.knots, ct.basis.domains):
        lines.append(f"dim ell {kv.count} order {kv.order} lo {lo!r} hi {hi!r}")
    write_payload(path, "control-tensor", lines, [ct.values])


def load_control_tensor(path) -> ControlTensor:
    lines, payload = read_payload(path, "control-tensor")
    ndim = None
    counts, orders, domains = [], [], []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "dims":
            ndim = int(tok[1])
        elif tok[0] == "dim":
            counts.append(int(tok[2]))
            orders.append(int(tok[4]))
            domains.append((float(tok[6]), float(tok[8])))
    if ndim is None or len(counts) != ndim:
        raise ConfigError(f"{path}: malformed control-tensor header")
    basis = BasisSpec.uniform(counts, orders, domains)
    values, _ = take_floats(payload, 0, tuple(counts))
    return ControlTensor(values=values, basis=basis)
