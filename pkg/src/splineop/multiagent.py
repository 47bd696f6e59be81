"""Networked mass-spring-damper agents and their modal decomposition.

Seven agents couple through a graph Laplacian; projecting the stacked
2N-dimensional state onto Laplacian eigenvectors decouples it into N
independent (position, velocity) modes whose safety probabilities
multiply to the network probability.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvalidSpecError
from .montecarlo import first_event_steps
from .pde import GridSolution
from .surface import ProblemKind

#: Interaction Laplacian of the seven-agent case study.
NETWORK_LAPLACIAN = np.array([
    [5, -1, -1, -1, -1, -1, 0],
    [-1, 3, 0, -1, 0, 0, -1],
    [-1, 0, 2, 0, -1, 0, 0],
    [-1, -1, 0, 4, -1, -1, 0],
    [-1, 0, -1, -1, 4, -1, 0],
    [-1, 0, 0, -1, -1, 3, 0],
    [0, -1, 0, 0, 0, 0, 1],
], dtype=np.float64)


@dataclass(frozen=True)
class MultiAgentSpec:
    """N coupled agents: spring beta1, damper beta2, per-mode thresholds."""

    beta2: float
    alphas: np.ndarray
    beta1: float = 1.0
    sigma: float = 0.2
    laplacian: np.ndarray = field(default_factory=lambda: NETWORK_LAPLACIAN.copy())

    def __post_init__(self):
        lap = np.asarray(self.laplacian, dtype=np.float64)
        alphas = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "laplacian", lap)
        object.__setattr__(self, "alphas", alphas)
        if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
            raise InvalidSpecError("Laplacian must be square")
        if not np.allclose(lap, lap.T, atol=1e-12):
            raise InvalidSpecError("Laplacian must be symmetric")
        if np.max(np.abs(lap.sum(axis=1))) > 1e-12:
            raise InvalidSpecError("Laplacian rows must sum to zero")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise InvalidSpecError("beta1 and beta2 must be > 0")
        if alphas.shape != (lap.shape[0],) or np.any(alphas <= 0):
            raise InvalidSpecError("one positive threshold per agent is required")

    @property
    def n_agents(self) -> int:
        return self.laplacian.shape[0]


def laplacian_modes(laplacian: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs (ascending); eigenvectors are columns, first nonzero
    entry of each made positive."""
    lap = np.asarray(laplacian, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1] or not np.allclose(lap, lap.T, atol=1e-12):
        raise InvalidSpecError("laplacian_modes requires a symmetric square matrix")
    lams, vecs = np.linalg.eigh(lap)
    for k in range(vecs.shape[1]):
        col = vecs[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if len(nz) and col[nz[0]] < 0:
            vecs[:, k] = -col
    return lams, vecs


def assemble_H(spec: MultiAgentSpec) -> np.ndarray:
    """Stacked closed-loop dynamics matrix I_N x A - L x (B C)."""
    a_mat = np.array([[0.0, 1.0], [-spec.beta1, -spec.beta2]])
    bc = np.array([[0.0], [1.0]]) @ np.array([[1.0, 0.0]])
    n = spec.n_agents
    return np.kron(np.eye(n), a_mat) - np.kron(spec.laplacian, bc)


def mode_projection(modes_t: np.ndarray) -> np.ndarray:
    """(T^T kron I_2): maps the stacked state to per-mode (p, v) pairs."""
    return np.kron(modes_t.T, np.eye(2))


def project_state(modes_t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-mode coordinates, shape (N, 2), for one stacked state."""
    z = mode_projection(modes_t) @ np.asarray(x, dtype=np.float64)
    return z.reshape(-1, 2)


def product_safety(solutions: list[GridSolution], modes_t: np.ndarray,
                   x: np.ndarray, t: float) -> float:
    """Network safety probability as the product over mode surfaces.

    Each mode surface is interpolated at its projected (p, v, t); a
    projection outside a mode's box contributes probability 0.
    """
    z = project_state(modes_t, x)
    prob = 1.0
    for k, sol in enumerate(solutions):
        (p_lo, p_hi), (v_lo, v_hi), (t_lo, t_hi) = sol.domains
        p, v = z[k]
        if not (p_lo <= p <= p_hi and v_lo <= v <= v_hi):
            return 0.0
        if not (t_lo <= t <= t_hi):
            raise DomainError(f"t = {t} outside mode-{k} horizon [{t_lo}, {t_hi}]")
        prob *= float(sol.sample(np.array([[p, v, t]]))[0])
    return prob


def network_safety_profile(spec: MultiAgentSpec, x0: np.ndarray, horizon: float,
                           n_paths: int, dt: float, seed: int, times) -> np.ndarray:
    """Full-state MC of the 2N-dim network, checked against the modal boxes.

    Simulates dx = H x dt + sigma dW in original coordinates and counts a
    path safe while every projected mode stays inside its open box.
    Returns safety estimates at the requested horizons.
    """
    h_mat = assemble_H(spec)
    _, modes_t = laplacian_modes(spec.laplacian)
    proj = mode_projection(modes_t)
    alphas = np.repeat(spec.alphas, 2)
    x0 = np.asarray(x0, dtype=np.float64)

    def exited(x: np.ndarray) -> np.ndarray:
        z = x @ proj.T
        return np.any(np.abs(z) >= alphas, axis=1)

    n_steps = int(round(horizon / dt))
    steps = first_event_steps(
        lambda x, t: x @ h_mat.T,
        np.full(2 * spec.n_agents, spec.sigma),
        exited, x0, n_steps, dt, n_paths, seed,
    )
    times = np.asarray(times, dtype=np.float64)
    out = np.empty(len(times))
    for i, t in enumerate(times):
        idx = min(int(round(t / dt)), n_steps)
        out[i] = float(np.mean(steps > idx))
    return out


def mode_mc_safety(lam: float, beta1: float, beta2: float, sigma: float,
                   alpha: float, x0, horizon: float, n_paths: int, dt: float,
                   seed: int, times) -> list:
    """Direct MC of one 2-D mode SDE on its box (oracle for the mode PDE)."""
    from .montecarlo import mc_profile
    from .pde import mode_system

    system = mode_system(lam, beta1, beta2, sigma, alpha)
    return mc_profile(system, x0, horizon, n_paths, dt, seed, times)
