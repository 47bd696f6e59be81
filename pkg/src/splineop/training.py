"""Physics-informed training of the coefficient functional.

The PDE residual is linear in the control tensor, so for fixed
collocation points the physics loss is a quadratic form whose gradient
on the control tensor is assembled analytically from precomputed basis
tensors; only that single upstream gradient is chained through the
network's reverse-mode pass per record and step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec
from .errors import ConfigError, InvalidSpecError, TrainingDivergedError
from .operator import (FunctionalParams, InputField, OperatorConfig, _backward_core,
                       _forward_core, backward_from_tape, forward_with_tape,
                       sample_input)
from .surface import (_CLAMP, ProblemKind, SurfacePartials, contract_batch,
                      point_matrices)
from .systems import SystemSpec, drift_points

_LETTERS = "abcdefghij"


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights, optimizer settings and collocation budget."""

    w_p: float = 1.0
    w_d: float = 3.0
    epochs: int = 500
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_collocation: int = 2000
    seed: int = 0
    batch_size: int = 0
    icbc_weight: float = 10.0

    def __post_init__(self):
        if self.w_p < 0 or self.w_d < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.w_p == 0 and self.w_d == 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.w_p > 0 and self.n_collocation < 1:
            raise ConfigError("collocation points are required when w_p > 0")


@dataclass
class TrainRecord:
    """One system with target probabilities at evaluation points."""

    system: SystemSpec
    points: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) != len(self.targets):
            raise InvalidSpecError("points must be (Q, ndim) matching targets (Q,)")
        if np.any(self.targets < -1e-9) or np.any(self.targets > 1.0 + 1e-9):
            raise InvalidSpecError("targets must be probabilities in [0, 1]")


def pde_residual(partials: SurfacePartials, f_at_point, sigma) -> float:
    """W = dF/dt - f . grad F - sum_k (sigma_k^2 / 2) d2F/dx_k2.

    Diffusion acts per axis (diagonal noise), which reduces to the scalar
    form in one dimension and matches the mode dynamics in two.
    """
    f = np.atleast_1d(np.asarray(f_at_point, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), f.shape)
    return float(partials.dt - f @ partials.grad_x
                 - 0.5 * (sigma**2) @ partials.hess_diag)


def sample_collocation(basis: BasisSpec, count: int, seed: int) -> np.ndarray:
    """Uniform interior points, at least one knot span away from clamped faces.

    State axes keep the margin on both ends; the time axis only at t = 0
    (the final time carries no condition).
    """
    if count < 1:
        raise ConfigError("collocation count must be >= 1")
    rng = np.random.default_rng(seed)
    ndim = basis.ndim
    out = np.empty((count, ndim))
    for k in range(ndim):
        margin = basis.knots[k].span_width
        lo_u = margin
        hi_u = 1.0 if k == ndim - 1 else 1.0 - margin
        u = rng.uniform(lo_u, hi_u, size=count)
        lo, hi = basis.domains[k]
        out[:, k] = lo + (hi - lo) * u
    return out


def _outer_rows(mats: list[np.ndarray]) -> np.ndarray:
    axes = _LETTERS[: len(mats)]
    spec = ",".join("q" + c for c in axes) + "->q" + axes
    return np.einsum(spec, *mats)


def residual_tensor(system: SystemSpec, basis: BasisSpec,
                    coll: np.ndarray) -> np.ndarray:
    """U with W_q = <U_q, C> for every collocation point q.

    Stacks the time-derivative, convection and diffusion basis products
    once; the physics loss and its control-tensor gradient then reduce to
    two einsums per step.
    """
    ndim = basis.ndim
    n_state = ndim - 1
    b0 = point_matrices(basis, coll)
    f_vals = drift_points(system, coll)
    sigma = np.broadcast_to(system.sigma, (n_state,))

    mats = list(b0)
    mats[-1] = point_matrices(basis, coll, p_per_axis=[0] * n_state + [1])[-1]
    u_tensor = _outer_rows(mats)
    for k in range(n_state):
        p_spec = [0] * ndim
        p_spec[k] = 1
        mats = list(b0)
        mats[k] = point_matrices(basis, coll, p_per_axis=p_spec)[k]
        u_tensor -= f_vals[:, k].reshape((-1,) + (1,) * ndim) * _outer_rows(mats)
        p_spec[k] = 2
        mats = list(b0)
        mats[k] = point_matrices(basis, coll, p_per_axis=p_spec)[k]
        u_tensor -= 0.5 * sigma[k] ** 2 * _outer_rows(mats)
    return u_tensor


@dataclass
class _Prepared:
    field: InputField
    targets: np.ndarray
    kind: ProblemKind
    data_mats: list[np.ndarray] | None = None     # spline path
    u_tensor: np.ndarray | None = None            # spline path
    grid_targets: np.ndarray | None = None        # baseline path
    f_interior: np.ndarray | None = None          # baseline path (n_state, *interior)
    sigma: np.ndarray | None = None
    steps: tuple[float, ...] | None = None        # baseline grid spacings

    @property
    def n_physics(self) -> int:
        if self.u_tensor is not None:
            return self.u_tensor.shape[0]
        if self.f_interior is not None:
            return int(np.prod(self.f_interior.shape[1:]))
        return 0

    @property
    def n_data(self) -> int:
        return len(self.targets)


def _grid_points(axes: list[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def prepare_records(records: list[TrainRecord], op_config: OperatorConfig,
                    tconfig: TrainConfig) -> list[_Prepared]:
    """Sample input fields and precompute loss tensors for every record."""
    prepared = []
    basis = op_config.basis()
    for i, rec in enumerate(records):
        field = sample_input(rec.system, op_config.grid_shape, op_config.domains)
        if op_config.baseline:
            prepared.append(_prepare_baseline(rec, field, op_config))
            continue
        u_tensor = None
        if tconfig.w_p > 0:
            coll = sample_collocation(basis, tconfig.n_collocation,
                                      seed=tconfig.seed * 100003 + i)
            u_tensor = residual_tensor(rec.system, basis, coll)
        prepared.append(_Prepared(
            field=field,
            targets=rec.targets,
            kind=rec.system.kind,
            data_mats=point_matrices(basis, rec.points),
            u_tensor=u_tensor,
        ))
    return prepared


def _prepare_baseline(rec: TrainRecord, field: InputField,
                      op_config: OperatorConfig) -> _Prepared:
    shape = op_config.grid_shape
    q = int(np.prod(shape))
    if len(rec.targets) != q:
        raise ConfigError(
            "baseline training needs targets on the feature grid "
            f"({q} points), got {len(rec.targets)}"
        )
    axes = op_config.grid_axes()
    steps = tuple(float(a[1] - a[0]) for a in axes)
    interior_axes = [a[1:-1] for a in axes]
    pts = _grid_points(interior_axes)
    f_fields = drift_points(rec.system, pts).T.reshape(
        (rec.system.n_state,) + tuple(len(a) for a in interior_axes))
    return _Prepared(
        field=field,
        targets=rec.targets,
        kind=rec.system.kind,
        grid_targets=rec.targets.reshape(shape),
        f_interior=f_fields,
        sigma=np.broadcast_to(rec.system.sigma, (rec.system.n_state,)).copy(),
        steps=steps,
    )


def _icbc_target(shape: tuple[int, ...], kind: ProblemKind) -> tuple[np.ndarray, np.ndarray]:
    ic, bc_lo, bc_hi = _CLAMP[kind]
    target = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    target[..., 0] = ic
    mask[..., 0] = True
    for k in range(len(shape) - 1):
        sl = [slice(None)] * len(shape)
        sl[k] = 0
        target[tuple(sl)] = bc_lo
        mask[tuple(sl)] = True
        sl[k] = shape[k] - 1
        target[tuple(sl)] = bc_hi
        mask[tuple(sl)] = True
    return target, mask


def _baseline_residual(y: np.ndarray, prep: _Prepared) -> np.ndarray:
    """Central-difference PDE residual on interior grid nodes."""
    ndim = y.ndim

    def shifted(axis: int, delta: int) -> np.ndarray:
        sl = [slice(1, -1)] * ndim
        sl[axis] = slice(1 + delta, y.shape[axis] - 1 + delta)
        return y[tuple(sl)]

    interior = tuple(slice(1, -1) for _ in range(ndim))
    w = (shifted(ndim - 1, 1) - shifted(ndim - 1, -1)) / (2.0 * prep.steps[-1])
    for k in range(ndim - 1):
        h = prep.steps[k]
        d = 0.5 * prep.sigma[k] ** 2
        w = w - prep.f_interior[k] * (shifted(k, 1) - shifted(k, -1)) / (2.0 * h)
        w = w - d * (shifted(k, 1) - 2.0 * y[interior] + shifted(k, -1)) / h**2
    return w


def _baseline_residual_adjoint(a: np.ndarray, y_shape: tuple[int, ...],
                               prep: _Prepared) -> np.ndarray:
    """Scatter dL/dW = a back onto the grid through the FD stencils."""
    ndim = len(y_shape)
    g = np.zeros(y_shape)

    def scatter(axis: int, delta: int, vals) -> None:
        sl = [slice(1, -1)] * ndim
        sl[axis] = slice(1 + delta, y_shape[axis] - 1 + delta)
        g[tuple(sl)] += vals

    interior = tuple(slice(1, -1) for _ in range(ndim))
    scatter(ndim - 1, 1, a / (2.0 * prep.steps[-1]))
    scatter(ndim - 1, -1, -a / (2.0 * prep.steps[-1]))
    for k in range(ndim - 1):
        h = prep.steps[k]
        d = 0.5 * prep.sigma[k] ** 2
        scatter(k, 1, -a * prep.f_interior[k] / (2.0 * h) - a * d / h**2)
        scatter(k, -1, a * prep.f_interior[k] / (2.0 * h) - a * d / h**2)
        g[interior] += 2.0 * a * d / h**2
    return g


def _accumulate(params: FunctionalParams, prepared: list[_Prepared],
                tconfig: TrainConfig, want_grads: bool):
    """Losses (and gradients) over a batch, normalized by global counts."""
    baseline = params.config.baseline
    n_p_total = sum(p.n_physics for p in prepared) if tconfig.w_p > 0 else 0
    n_d_total = sum(p.n_data for p in prepared) if tconfig.w_d > 0 else 0
    sq_p = sq_d = sq_i = 0.0
    n_i_total = 0
    grads_sum: dict[str, np.ndarray] | None = None

    for prep in prepared:
        if baseline:
            tape = _forward_core(params, prep.field)
            y = tape.grid_out
            d_y = np.zeros_like(y) if want_grads else None
            if tconfig.w_p > 0:
                w = _baseline_residual(y, prep)
                sq_p += float(np.sum(w * w))
                if want_grads:
                    d_y += _baseline_residual_adjoint(
                        tconfig.w_p * 2.0 * w / n_p_total, y.shape, prep)
            if tconfig.w_d > 0:
                r = y - prep.grid_targets
                sq_d += float(np.sum(r * r))
                if want_grads:
                    d_y += tconfig.w_d * 2.0 * r / n_d_total
            target, mask = _icbc_target(y.shape, prep.kind)
            ri = np.where(mask, y - target, 0.0)
            sq_i += float(np.sum(ri * ri))
            n_icbc = int(mask.sum()) * len(prepared)
            n_i_total = n_icbc
            if want_grads:
                d_y += tconfig.icbc_weight * 2.0 * ri / n_icbc
                grads = _backward_core(params, tape, d_y)
            else:
                grads = None
        else:
            ct, tape = forward_with_tape(params, prep.field, prep.kind)
            c = ct.values
            axes = _LETTERS[: c.ndim]
            d_c = np.zeros_like(c) if want_grads else None
            if tconfig.w_p > 0:
                w = np.einsum("q" + axes + "," + axes + "->q", prep.u_tensor, c)
                sq_p += float(w @ w)
                if want_grads:
                    d_c += (tconfig.w_p * 2.0 / n_p_total) * np.einsum(
                        "q,q" + axes + "->" + axes, w, prep.u_tensor)
            if tconfig.w_d > 0:
                pred = contract_batch(c, prep.data_mats)
                r = pred - prep.targets
                sq_d += float(r @ r)
                if want_grads:
                    spec = "q," + ",".join("q" + a for a in axes) + "->" + axes
                    d_c += (tconfig.w_d * 2.0 / n_d_total) * np.einsum(
                        spec, r, *prep.data_mats)
            grads = backward_from_tape(params, tape, d_c) if want_grads else None

        if want_grads:
            if grads_sum is None:
                grads_sum = grads
            else:
                for k, v in grads.items():
                    grads_sum[k] += v

    l_p = sq_p / n_p_total if n_p_total else 0.0
    l_d = sq_d / n_d_total if n_d_total else 0.0
    loss = tconfig.w_p * l_p + tconfig.w_d * l_d
    if baseline and n_i_total:
        loss += tconfig.icbc_weight * sq_i / n_i_total
    return loss, l_p, l_d, grads_sum


def total_loss(params: FunctionalParams, records: list[TrainRecord],
               tconfig: TrainConfig,
               prepared: list[_Prepared] | None = None) -> tuple[float, float, float]:
    """(L, L_p, L_d): means of W^2 over collocation points and of squared
    data error over evaluation points, combined with the config weights.
    Baseline models add the weighted ICBC penalty to L."""
    if prepared is None:
        prepared = prepare_records(records, params.config, tconfig)
    loss, l_p, l_d, _ = _accumulate(params, prepared, tconfig, want_grads=False)
    return loss, l_p, l_d


def loss_and_grads(params: FunctionalParams, prepared: list[_Prepared],
                   tconfig: TrainConfig):
    """(L, L_p, L_d, parameter gradients) over prepared records."""
    return _accumulate(params, prepared, tconfig, want_grads=True)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def adam_init(params: FunctionalParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t) for k, t in params.tensors.items()},
        step=0,
    )


def adam_step(params: FunctionalParams, grads: dict[str, np.ndarray],
              state: AdamState, tconfig: TrainConfig) -> tuple[FunctionalParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    b1, b2, eps = tconfig.adam_beta1, tconfig.adam_beta2, tconfig.adam_eps
    step = state.step + 1
    new_tensors, new_m, new_v = {}, {}, {}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(
                f"non-finite gradient in tensor {name} at Adam step {step}"
            )
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_tensors[name] = params.tensors[name] - tconfig.lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return (FunctionalParams(config=params.config, tensors=new_tensors),
            AdamState(m=new_m, v=new_v, step=step))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: FunctionalParams
    best_params: FunctionalParams
    adam_state: AdamState
    history: list[tuple[int, float, float, float, float]]
    train_seconds: float


def _clone_params(params: FunctionalParams) -> FunctionalParams:
    return FunctionalParams(config=params.config,
                            tensors={k: v.copy() for k, v in params.tensors.items()})


def train(params: FunctionalParams, records: list[TrainRecord], tconfig: TrainConfig,
          adam_state: AdamState | None = None, epoch_offset: int = 0) -> TrainResult:
    """Full-batch (or mini-batch) Adam training.

    Collocation sets are fixed per record from the config seed, so a run
    resumed from (params, adam state, epoch offset) replays bit-exactly.
    Best-by-validation tracks records tagged 'val' when present, else the
    training loss.
    """
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs and tconfig.w_d > 0:
        raise ConfigError("no training records given")
    prepared = prepare_records(train_recs, params.config, tconfig)
    prepared_val = (prepare_records(val_recs, params.config, tconfig)
                    if val_recs else None)

    state = adam_state if adam_state is not None else adam_init(params)
    history: list[tuple[int, float, float, float, float]] = []
    best_params = _clone_params(params)
    best_score = np.inf
    t_start = time.perf_counter()

    for i in range(tconfig.epochs):
        epoch = epoch_offset + i
        tic = time.perf_counter()
        if tconfig.batch_size and tconfig.batch_size < len(prepared):
            order = np.random.default_rng([tconfig.seed, epoch]).permutation(len(prepared))
            batches = [
                [prepared[j] for j in order[s: s + tconfig.batch_size]]
                for s in range(0, len(order), tconfig.batch_size)
            ]
        else:
            batches = [prepared]
        loss = l_p = l_d = 0.0
        for batch in batches:
            loss, l_p, l_d, grads = loss_and_grads(params, batch, tconfig)
            if not np.isfinite(loss):
                err = TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                err.history = history
                raise err
            params, state = adam_step(params, grads, state, tconfig)
        if len(batches) > 1:
            loss, l_p, l_d = total_loss(params, train_recs, tconfig, prepared=prepared)
        wall_ms = (time.perf_counter() - tic) * 1e3
        history.append((epoch, loss, l_p, l_d, wall_ms))

        if prepared_val is not None:
            score, _, _ = total_loss(params, val_recs, tconfig, prepared=prepared_val)
        else:
            score = loss
        if score < best_score:
            best_score = score
            best_params = _clone_params(params)

    return TrainResult(
        params=params,
        best_params=best_params,
        adam_state=state,
        history=history,
        train_seconds=time.perf_counter() - t_start,
    )


def write_history_csv(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,L,L_p,L_d,wall_ms\n")
        for epoch, loss, l_p, l_d, wall_ms in history:
            fh.write(f"{epoch},{loss!r},{l_p!r},{l_d!r},{wall_ms:.3f}\n")
