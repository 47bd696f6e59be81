"""Finite-difference oracle for the safety/recovery convection-diffusion PDE.

Crank-Nicolson in time with centered second-order space differences;
the convection term switches to first-order upwinding wherever the cell
Peclet number |f| h / D exceeds 2, which keeps the scheme
oscillation-free in convection-dominated regions.  1-D solves use banded
LU; 2-D solves prefactor one sparse LU (coefficients are constant in
time there).

The marching direction follows the generator form dF/dt = f . grad F
+ sum_k (sigma_k^2 / 2) d2F/dx_k2, the well-posed arrangement consistent
with the sampling oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import csc_matrix, csr_matrix, identity
from scipy.sparse.linalg import splu

from .errors import ConditioningError, ConfigError, DomainError, InvalidSpecError
from .serialization import read_payload, take_floats, write_payload
from .surface import ProblemKind
from .systems import ModeDrift, SystemSpec, drift_batch, drift_on_grid

_PECLET_SWITCH = 2.0


@dataclass
class GridSolution:
    """Space-time probability field on a regular grid (state axes, then time)."""

    values: np.ndarray
    axes: tuple[np.ndarray, ...]
    times: np.ndarray
    kind: ProblemKind

    @property
    def domains(self):
        spatial = tuple((float(a[0]), float(a[-1])) for a in self.axes)
        return spatial + ((float(self.times[0]), float(self.times[-1])),)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation at physical (x..., t) points."""
        from .operator import grid_interpolate

        points = np.asarray(points, dtype=np.float64)
        for k, (lo, hi) in enumerate(self.domains):
            if np.any(points[:, k] < lo - 1e-12) or np.any(points[:, k] > hi + 1e-12):
                raise DomainError(f"axis {k}: points outside [{lo}, {hi}]")
        return grid_interpolate(self.values, self.domains, points)


def _clamp_constants(kind: ProblemKind) -> tuple[float, float, float]:
    from .surface import _CLAMP

    return _CLAMP[kind]


def _stability_steps(horizon: float, h: float, d_max: float, f_max: float) -> int:
    dt_max = h * h / (d_max + f_max * h + 1e-300)
    return max(int(math.ceil(horizon / dt_max)), 1)


def _axis_coeffs(f: np.ndarray, h: float, d: float):
    """Per-node (lower, diag, upper) stencil weights for f d/dx + d d2/dx2."""
    lower = np.full_like(f, d / h**2)
    diag = np.full_like(f, -2.0 * d / h**2)
    upper = np.full_like(f, d / h**2)
    pe = np.abs(f) * h / d if d > 0 else np.full_like(f, np.inf)
    up = pe > _PECLET_SWITCH
    cen = ~up
    lower[cen] += -f[cen] / (2.0 * h)
    upper[cen] += f[cen] / (2.0 * h)
    pos = up & (f > 0)
    neg = up & (f < 0)
    diag[pos] += -f[pos] / h
    upper[pos] += f[pos] / h
    diag[neg] += f[neg] / h
    lower[neg] += -f[neg] / h
    return lower, diag, upper


_MAX_SAVED = 400


def _saved_steps(n_steps: int, save_every: int | None) -> tuple[int, int, np.ndarray]:
    """Resolve (n_steps, save_every, saved step indices).

    With save_every=None a stride is chosen so at most ~400 slices are
    stored, rounding n_steps up so the stride divides it.
    """
    if save_every is None:
        save_every = max(1, int(round(n_steps / _MAX_SAVED)))
        n_steps = int(math.ceil(n_steps / save_every)) * save_every
    if save_every < 1 or n_steps % save_every:
        raise ConfigError("save_every must divide the number of time steps")
    return n_steps, save_every, np.arange(0, n_steps + 1, save_every)


def _solve_1d(system: SystemSpec, nx: int, horizon: float,
              n_steps: int | None, save_every: int | None) -> GridSolution:
    lo, hi = system.domain[0]
    x = np.linspace(lo, hi, nx)
    h = x[1] - x[0]
    d = 0.5 * float(system.sigma[0]) ** 2
    f_probe = np.max(np.abs([
        drift_batch(system, x[:, None], t)[:, 0]
        for t in np.linspace(0.0, horizon, 33)
    ]))
    if n_steps is None:
        n_steps = _stability_steps(horizon, h, d, float(f_probe))
    n_steps, save_every, saved = _saved_steps(n_steps, save_every)
    dt = horizon / n_steps

    ic, bc_lo, bc_hi = _clamp_constants(system.kind)
    u = np.full(nx, ic)
    u[0], u[-1] = bc_lo, bc_hi

    out = np.empty((nx, len(saved)))
    out[:, 0] = u
    saved_pos = 1

    def coeffs(t):
        f = drift_batch(system, x[:, None], t)[:, 0]
        return _axis_coeffs(f, h, d)

    low1, dia1, upp1 = coeffs(0.0)
    for step in range(1, n_steps + 1):
        low0, dia0, upp0 = low1, dia1, upp1
        low1, dia1, upp1 = coeffs(step * dt)
        rhs = u.copy()
        rhs[1:-1] += 0.5 * dt * (
            low0[1:-1] * u[:-2] + dia0[1:-1] * u[1:-1] + upp0[1:-1] * u[2:]
        )
        rhs[0], rhs[-1] = bc_lo, bc_hi
        ab = np.zeros((3, nx))
        ab[1, :] = 1.0
        ab[1, 1:-1] -= 0.5 * dt * dia1[1:-1]
        ab[0, 2:] = -0.5 * dt * upp1[1:-1]
        ab[2, :-2] = -0.5 * dt * low1[1:-1]
        u = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(u)):
            raise ConditioningError(
                f"1-D solve diverged at step {step} (nx={nx}, dt={dt:g})"
            )
        if step % save_every == 0:
            out[:, saved_pos] = np.clip(u, 0.0, 1.0)
            saved_pos += 1

    return GridSolution(values=out, axes=(x,), times=saved * dt, kind=system.kind)


def _solve_2d(system: SystemSpec, shape: tuple[int, int], horizon: float,
              n_steps: int | None, save_every: int | None) -> GridSolution:
    if system.kind is not ProblemKind.SAFETY:
        raise InvalidSpecError("2-D solves support the safety problem only")
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(system.domain, shape)]
    hs = [a[1] - a[0] for a in axes]
    ds = [0.5 * float(s) ** 2 for s in system.sigma]
    fields = drift_on_grid(system, axes, 0.0)
    f_max = max(float(np.max(np.abs(f))) for f in fields)
    if n_steps is None:
        n_steps = _stability_steps(horizon, min(hs), max(ds), f_max)
    n_steps, save_every, saved = _saved_steps(n_steps, save_every)
    dt = horizon / n_steps

    n0, n1 = shape
    n_nodes = n0 * n1
    interior = np.zeros(shape, dtype=bool)
    interior[1:-1, 1:-1] = True

    rows, cols, vals = [], [], []
    node = np.arange(n_nodes).reshape(shape)
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    low0, dia0, upp0 = _axis_coeffs(fields[0], hs[0], ds[0])
    low1, dia1, upp1 = _axis_coeffs(fields[1], hs[1], ds[1])
    diag = dia0 + dia1
    stencil = {(-1, 0): low0, (1, 0): upp0, (0, -1): low1, (0, 1): upp1}
    idx_int = node[interior]
    rows.append(idx_int)
    cols.append(idx_int)
    vals.append(diag[interior])
    for (di, dj), coef in stencil.items():
        nb = np.roll(node, (-di, -dj), axis=(0, 1))
        rows.append(idx_int)
        cols.append(nb[interior])
        vals.append(coef[interior])
    a_mat = csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_nodes, n_nodes),
    )
    eye = identity(n_nodes, format="csr")
    m_plus = (eye + 0.5 * dt * a_mat).tocsr()
    m_minus = csc_matrix(eye - 0.5 * dt * a_mat)
    try:
        lu = splu(m_minus)
    except RuntimeError as exc:
        raise ConditioningError(f"2-D implicit matrix factorization failed: {exc}") from exc

    ic, bc, _ = _clamp_constants(system.kind)
    u = np.full(shape, ic)
    u[0, :] = u[-1, :] = bc
    u[:, 0] = u[:, -1] = bc
    u = u.ravel()

    out = np.empty(shape + (len(saved),))
    out[..., 0] = u.reshape(shape)
    saved_pos = 1
    for step in range(1, n_steps + 1):
        u = lu.solve(m_plus @ u)
        if not np.all(np.isfinite(u)):
            raise ConditioningError(
                f"2-D solve diverged at step {step} (shape={shape}, dt={dt:g})"
            )
        if step % save_every == 0:
            out[..., saved_pos] = np.clip(u.reshape(shape), 0.0, 1.0)
            saved_pos += 1

    return GridSolution(values=out, axes=tuple(axes), times=saved * dt, kind=system.kind)


def solve_pde(system: SystemSpec, grid_shape, horizon: float,
              n_steps: int | None = None, save_every: int | None = None) -> GridSolution:
    """Solve the safety/recovery PDE on the system's analysis domain.

    grid_shape lists the node count per state dimension.  n_steps
    defaults to the accuracy heuristic dt <= h^2 / (D + max|f| h).
    """
    grid_shape = tuple(int(n) for n in np.atleast_1d(grid_shape))
    if len(grid_shape) != system.n_state:
        raise ConfigError(
            f"grid_shape has {len(grid_shape)} entries for {system.n_state} state dims"
        )
    if any(n < 3 for n in grid_shape):
        raise ConfigError("need at least 3 nodes per dimension")
    if horizon <= 0:
        raise ConfigError("horizon must be > 0")
    if system.n_state == 1:
        return _solve_1d(system, grid_shape[0], horizon, n_steps, save_every)
    if system.n_state == 2:
        return _solve_2d(system, grid_shape, horizon, n_steps, save_every)
    raise ConfigError("direct solves support 1-D and 2-D state spaces only")


def mode_system(lam: float, beta1: float, beta2: float, sigma: float,
                alpha: float) -> SystemSpec:
    """Safety problem for one interaction mode on the box [-alpha, alpha]^2."""
    return SystemSpec(
        drift=ModeDrift(lam=lam, beta1=beta1, beta2=beta2),
        sigma=np.array([sigma, sigma]),
        safe_box=((-alpha, alpha), (-alpha, alpha)),
        kind=ProblemKind.SAFETY,
    )


def solve_subsystem_pde(gamma: float, beta2: float, sigma: float, alpha: float,
                        grid_shape=(81, 81), horizon: float = 10.0,
                        n_steps: int | None = None, save_every: int | None = None,
                        beta1: float = 1.0) -> GridSolution:
    """Mode safety probability F_k(p, v, t) on [-alpha, alpha]^2.

    Drift (v, -(gamma p + beta2 v)), isotropic noise sigma per axis,
    starts at 1 inside and is absorbed to 0 on the box boundary.
    """
    if alpha <= 0:
        raise InvalidSpecError("alpha must be > 0")
    system = mode_system(gamma - beta1, beta1, beta2, sigma, alpha)
    return solve_pde(system, grid_shape, horizon, n_steps=n_steps, save_every=save_every)


def save_grid_solution(sol: GridSolution, path) -> None:
    lines = [f"kind {sol.kind.value}", f"dims {len(sol.axes)}"]
    for a in sol.axes:
        lines.append(f"axis n {len(a)} lo {float(a[0])!r} hi {float(a[-1])!r}")
    lines.append(f"time n {len(sol.times)} lo {float(sol.times[0])!r} hi {float(sol.times[-1])!r}")
    write_payload(path, "grid-solution", lines, [sol.values])


def load_grid_solution(path) -> GridSolution:
    lines, payload = read_payload(path, "grid-solution")
    kind = None
    axes = []
    times = None
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "kind":
            kind = ProblemKind(tok[1])
        elif tok[0] == "axis":
            axes.append(np.linspace(float(tok[4]), float(tok[6]), int(tok[2])))
        elif tok[0] == "time":
            times = np.linspace(float(tok[4]), float(tok[6]), int(tok[2]))
    if kind is None or times is None or not axes:
        raise ConfigError(f"{path}: malformed grid-solution header")
    shape = tuple(len(a) for a in axes) + (len(times),)
    values, _ = take_floats(payload, 0, shape)
    return GridSolution(values=values, axes=tuple(axes), times=times, kind=kind)
