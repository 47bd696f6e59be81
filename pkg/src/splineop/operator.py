"""Coefficient neural functional: sampled dynamics in, control tensor out.

A lift, a stack of truncated spectral-convolution blocks with pointwise
bypasses, and a pointwise readout resampled onto the control grid.  The
forward pass ends in the exact initial/boundary clamp; the reverse-mode
pass is written out by hand so the physics-loss gradient on the control
tensor can be assembled analytically and chained through in one shot.

Everything is float64; spectral weights are stored as (..., 2) real
arrays (re, im) so optimizers and checkpoints only ever see real data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .basis import BasisSpec
from .errors import ConfigError, InvalidSystemError, KindMismatchError
from .serialization import read_payload, take_floats, write_payload
from .surface import ControlTensor, ProblemKind, apply_icbc, icbc_mask
from .systems import Interval, LinearDrift, ModeDrift, SineDrift, SystemSpec, drift_on_grid

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class OperatorConfig:
    """Architecture and discretization of the coefficient functional."""

    in_channels: int
    grid_shape: tuple[int, ...]
    control_shape: tuple[int, ...]
    orders: tuple[int, ...]
    domains: tuple[Interval, ...]
    width: int = 32
    n_blocks: int = 3
    modes: tuple[int, ...] = (8, 8)
    baseline: bool = False

    def __post_init__(self):
        q = len(self.grid_shape)
        if not (len(self.control_shape) == len(self.orders)
                == len(self.domains) == len(self.modes) == q):
            raise ConfigError("grid/control/orders/domains/modes must share one rank")
        if self.in_channels < 1 or self.width < 1 or self.n_blocks < 1:
            raise ConfigError("in_channels, width and n_blocks must be >= 1")
        for m, k in zip(self.grid_shape, self.modes):
            if m < 2:
                raise ConfigError("grid resolution must be >= 2 per dimension")
            if k < 1 or 2 * k - 1 > m:
                raise ConfigError(
                    f"modes={k} needs grid >= {2 * k - 1} points in that dimension"
                )

    @property
    def ndim(self) -> int:
        return len(self.grid_shape)

    def basis(self) -> BasisSpec:
        return BasisSpec.uniform(self.control_shape, self.orders, self.domains)

    def grid_axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, m) for (lo, hi), m in zip(self.domains, self.grid_shape)]


@dataclass
class InputField:
    """Dynamics and safe-set parameters sampled as channels on a grid."""

    channels: np.ndarray
    domains: tuple[Interval, ...]

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != len(self.domains) + 1:
            raise ConfigError("channels must have shape (C, *grid_shape)")


def sample_input(system: SystemSpec, grid_shape: tuple[int, ...],
                 domains: tuple[Interval, ...]) -> InputField:
    """Sample drift components and constant safe-set channels on a grid.

    The grid covers the full surface domain (state axes then time); drift
    channels come first, then one constant channel per safe-set
    parameter.
    """
    if any(m < 2 for m in grid_shape):
        raise ConfigError("grid resolution must be >= 2 per dimension")
    axes = [np.linspace(lo, hi, m) for (lo, hi), m in zip(domains, grid_shape)]
    state_axes, t_axis = axes[:-1], axes[-1]
    d = system.drift
    if isinstance(d, ModeDrift):
        alpha = system.safe_box[0][1]
        consts = (d.beta2, d.lam, alpha)
        channels = np.stack([np.full(grid_shape, c, dtype=np.float64) for c in consts])
    elif isinstance(d, SineDrift):
        f_t = d.value(t_axis)
        f_grid = np.broadcast_to(f_t, grid_shape).copy()
        lo, hi = system.safe_box[0]
        alpha = lo if math.isfinite(lo) else hi
        channels = np.stack([f_grid, np.full(grid_shape, alpha)])
    elif isinstance(d, LinearDrift):
        fields = [np.broadcast_to(g[..., None], grid_shape).copy()
                  for g in drift_on_grid(system, state_axes, 0.0)]
        alphas = [hi for _, hi in system.safe_box]
        fields += [np.full(grid_shape, a) for a in alphas]
        channels = np.stack(fields)
    else:
        raise InvalidSystemError(f"cannot sample drift kind {type(d).__name__}")
    if not np.all(np.isfinite(channels)):
        raise InvalidSystemError("drift produced non-finite samples on the grid")
    return InputField(channels=channels, domains=tuple(domains))


def tensor_layout(config: OperatorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs for every parameter tensor."""
    w, c = config.width, config.in_channels
    mode_dims = tuple(2 * k - 1 for k in config.modes)
    layout = [("lift_w", (w, c)), ("lift_b", (w,))]
    for i in range(config.n_blocks):
        layout.append((f"block{i}_spec", (w, w) + mode_dims + (2,)))
        layout.append((f"block{i}_w", (w, w)))
        layout.append((f"block{i}_b", (w,)))
    layout += [("out_w", (1, w)), ("out_b", (1,))]
    return layout


@dataclass
class FunctionalParams:
    config: OperatorConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in tensor_layout(self.config):
            if name not in self.tensors:
                raise ConfigError(f"missing parameter tensor {name}")
            if tuple(self.tensors[name].shape) != shape:
                raise ConfigError(
                    f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}"
                )


def init_params(seed: int, config: OperatorConfig) -> FunctionalParams:
    """Deterministic initialization: uniform pointwise weights scaled by
    1/sqrt(fan_in), complex-Gaussian spectral weights scaled by 1/width^2,
    zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_layout(config):
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        elif "_spec" in name:
            tensors[name] = rng.standard_normal(shape) / config.width**2
        else:
            bound = 1.0 / math.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return FunctionalParams(config=config, tensors=tensors)


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def _mode_select(config: OperatorConfig):
    idx = [np.concatenate([np.arange(k), np.arange(m - k + 1, m)])
           for m, k in zip(config.grid_shape, config.modes)]
    return (slice(None),) + np.ix_(*idx)


def _pointwise(weight: np.ndarray, x: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    out = np.tensordot(weight, x, axes=([1], [0]))
    if bias is not None:
        out = out + bias.reshape(bias.shape + (1,) * (x.ndim - 1))
    return out


def _interp_matrix(n_to: int, n_from: int) -> np.ndarray:
    """Linear interpolation from n_from uniform nodes to n_to uniform nodes."""
    mat = np.zeros((n_to, n_from))
    s = np.linspace(0.0, 1.0, n_to) * (n_from - 1)
    j0 = np.minimum(s.astype(int), n_from - 2)
    frac = s - j0
    mat[np.arange(n_to), j0] = 1.0 - frac
    mat[np.arange(n_to), j0 + 1] = frac
    return mat


def _resample_mats(config: OperatorConfig) -> list[np.ndarray]:
    return [_interp_matrix(l, m) for l, m in zip(config.control_shape, config.grid_shape)]


def _resample(y: np.ndarray, mats: list[np.ndarray]) -> np.ndarray:
    out = y
    for mat in mats:
        out = np.tensordot(out, mat, axes=([0], [1]))
    return out


def _resample_adjoint(u: np.ndarray, mats: list[np.ndarray]) -> np.ndarray:
    out = u
    for mat in mats:
        out = np.tensordot(out, mat, axes=([0], [0]))
    return out


class _Tape:
    __slots__ = ("channels", "blocks", "readout_in", "grid_out")

    def __init__(self, channels, blocks, readout_in, grid_out):
        self.channels = channels
        self.blocks = blocks
        self.readout_in = readout_in
        self.grid_out = grid_out


def _forward_core(params: FunctionalParams, field: InputField) -> _Tape:
    cfg = params.config
    ten = params.tensors
    if field.channels.shape != (cfg.in_channels,) + cfg.grid_shape:
        raise ConfigError(
            f"input channels shape {field.channels.shape} does not match "
            f"({cfg.in_channels},)+{cfg.grid_shape}"
        )
    grid_axes = tuple(range(1, cfg.ndim + 1))
    sel = _mode_select(cfg)
    x = _pointwise(ten["lift_w"], field.channels, ten["lift_b"])
    blocks = []
    for i in range(cfg.n_blocks):
        r = ten[f"block{i}_spec"]
        r_c = r[..., 0] + 1j * r[..., 1]
        xh = np.fft.fftn(x, axes=grid_axes)
        xh_kept = xh[sel]
        yh_kept = np.einsum("io...,i...->o...", r_c, xh_kept)
        yh = np.zeros_like(xh)
        yh[sel] = yh_kept
        spec_out = np.fft.ifftn(yh, axes=grid_axes).real
        z = spec_out + _pointwise(ten[f"block{i}_w"], x, ten[f"block{i}_b"])
        blocks.append((x, xh_kept, z))
        x = _gelu(z) if i < cfg.n_blocks - 1 else z
    grid_out = _pointwise(ten["out_w"], x, ten["out_b"])[0]
    return _Tape(field.channels, blocks, x, grid_out)


def _backward_core(params: FunctionalParams, tape: _Tape, d_grid: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    ten = params.tensors
    grid_axes = tuple(range(1, cfg.ndim + 1))
    flat_axes = tuple(range(cfg.ndim))
    sel = _mode_select(cfg)
    m_total = float(np.prod(cfg.grid_shape))
    grads: dict[str, np.ndarray] = {}

    grads["out_w"] = np.tensordot(tape.readout_in, d_grid, axes=(grid_axes, flat_axes))[None, :]
    grads["out_b"] = np.array([d_grid.sum()])
    dx = ten["out_w"][0].reshape((cfg.width,) + (1,) * cfg.ndim) * d_grid[None]

    for i in reversed(range(cfg.n_blocks)):
        x_in, xh_kept, z = tape.blocks[i]
        dz = dx if i == cfg.n_blocks - 1 else dx * _gelu_grad(z)
        grads[f"block{i}_w"] = np.tensordot(dz, x_in, axes=(grid_axes, grid_axes))
        grads[f"block{i}_b"] = dz.sum(axis=grid_axes)
        dx = np.tensordot(ten[f"block{i}_w"], dz, axes=([0], [0]))

        g_yh = np.fft.fftn(dz, axes=grid_axes) / m_total
        g_kept = g_yh[sel]
        r = ten[f"block{i}_spec"]
        r_c = r[..., 0] + 1j * r[..., 1]
        g_r = np.einsum("i...,o...->io...", np.conj(xh_kept), g_kept)
        grads[f"block{i}_spec"] = np.stack([g_r.real, g_r.imag], axis=-1)
        g_xh = np.zeros((cfg.width,) + cfg.grid_shape, dtype=np.complex128)
        g_xh[sel] = np.einsum("io...,o...->i...", np.conj(r_c), g_kept)
        dx = dx + m_total * np.fft.ifftn(g_xh, axes=grid_axes).real

    grads["lift_w"] = np.tensordot(dx, tape.channels, axes=(grid_axes, grid_axes))
    grads["lift_b"] = dx.sum(axis=grid_axes)
    return grads


def forward_with_tape(params: FunctionalParams, field: InputField,
                      kind: ProblemKind) -> tuple[ControlTensor, "_Tape"]:
    """forward() that also returns the activation tape for backward_from_tape."""
    if params.config.baseline:
        raise KindMismatchError("baseline models emit grid fields; use forward_grid")
    tape = _forward_core(params, field)
    raw = _resample(tape.grid_out, _resample_mats(params.config))
    ct = apply_icbc(ControlTensor(values=raw, basis=params.config.basis()), kind)
    return ct, tape


def forward(params: FunctionalParams, field: InputField, kind: ProblemKind) -> ControlTensor:
    """Control tensor for one input field, with the exact ICBC clamp applied."""
    return forward_with_tape(params, field, kind)[0]


def backward_from_tape(params: FunctionalParams, tape: "_Tape",
                       upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode using a stored tape; upstream is dL/d(control tensor)."""
    cfg = params.config
    masked = np.where(icbc_mask(cfg.control_shape), 0.0, upstream)
    d_grid = _resample_adjoint(masked, _resample_mats(cfg))
    return _backward_core(params, tape, d_grid)


def forward_grid(params: FunctionalParams, field: InputField) -> np.ndarray:
    """Baseline path: probability values directly on the feature grid."""
    return _forward_core(params, field).grid_out


def backward(params: FunctionalParams, field: InputField, kind: ProblemKind,
             upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a loss with gradient `upstream` w.r.t. the
    control tensor.  Clamped slices block gradient flow."""
    cfg = params.config
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cfg.control_shape:
        raise ConfigError(
            f"upstream shape {upstream.shape} does not match control {cfg.control_shape}"
        )
    masked = np.where(icbc_mask(cfg.control_shape), 0.0, upstream)
    tape = _forward_core(params, field)
    d_grid = _resample_adjoint(masked, _resample_mats(cfg))
    return _backward_core(params, tape, d_grid)


def backward_grid(params: FunctionalParams, field: InputField,
                  upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Baseline path: gradients for a loss on the grid output."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != params.config.grid_shape:
        raise ConfigError(
            f"upstream shape {upstream.shape} does not match grid {params.config.grid_shape}"
        )
    tape = _forward_core(params, field)
    return _backward_core(params, tape, upstream)


def grid_interpolate(values: np.ndarray, domains: tuple[Interval, ...],
                     points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a grid field at physical points."""
    points = np.asarray(points, dtype=np.float64)
    out = values
    # successive 1-d linear interpolation via gather along the leading axis
    weights = []
    indices = []
    for k, (lo, hi) in enumerate(domains):
        m = values.shape[k]
        s = (points[:, k] - lo) / (hi - lo) * (m - 1)
        s = np.clip(s, 0.0, m - 1)
        j0 = np.minimum(s.astype(int), m - 2)
        indices.append(j0)
        weights.append(s - j0)
    q = len(points)
    res = np.zeros(q)
    ndim = len(domains)
    for corner in range(1 << ndim):
        w = np.ones(q)
        idx = []
        for k in range(ndim):
            take_hi = (corner >> k) & 1
            idx.append(indices[k] + take_hi)
            w = w * (weights[k] if take_hi else 1.0 - weights[k])
        res += w * out[tuple(idx)]
    return res


# ---------------------------------------------------------------------------
# checkpoints: text manifest + concatenated float64 tensors

def save_checkpoint(path, params: FunctionalParams, kind: ProblemKind,
                    extra: dict[str, str] | None = None,
                    state: dict[str, np.ndarray] | None = None) -> None:
    cfg = params.config
    lines = [
        f"kind {kind.value}",
        f"baseline {int(cfg.baseline)}",
        f"in_channels {cfg.in_channels}",
        f"width {cfg.width}",
        f"blocks {cfg.n_blocks}",
        "modes " + " ".join(str(k) for k in cfg.modes),
        "grid " + " ".join(str(m) for m in cfg.grid_shape),
        "control " + " ".join(str(l) for l in cfg.control_shape),
        "orders " + " ".join(str(d) for d in cfg.orders),
    ]
    for lo, hi in cfg.domains:
        lines.append(f"domain {lo!r} {hi!r}")
    for key, val in (extra or {}).items():
        lines.append(f"meta {key} {val}")
    arrays = []
    for name, shape in tensor_layout(cfg):
        lines.append(f"tensor {name} " + " ".join(str(s) for s in shape))
        arrays.append(params.tensors[name])
    for name, arr in (state or {}).items():
        lines.append(f"state {name} " + " ".join(str(s) for s in arr.shape))
        arrays.append(arr)
    write_payload(path, "checkpoint", lines, arrays)


def load_checkpoint(path):
    """Returns (params, kind, meta dict, state dict)."""
    lines, payload = read_payload(path, "checkpoint")
    fields: dict[str, list[str]] = {}
    domains: list[Interval] = []
    tensor_specs: list[tuple[str, tuple[int, ...]]] = []
    state_specs: list[tuple[str, tuple[int, ...]]] = []
    meta: dict[str, str] = {}
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "domain":
            domains.append((float(tok[1]), float(tok[2])))
        elif tok[0] == "meta":
            meta[tok[1]] = " ".join(tok[2:])
        elif tok[0] == "tensor":
            tensor_specs.append((tok[1], tuple(int(s) for s in tok[2:])))
        elif tok[0] == "state":
            state_specs.append((tok[1], tuple(int(s) for s in tok[2:])))
        else:
            fields[tok[0]] = tok[1:]
    config = OperatorConfig(
        in_channels=int(fields["in_channels"][0]),
        grid_shape=tuple(int(s) for s in fields["grid"]),
        control_shape=tuple(int(s) for s in fields["control"]),
        orders=tuple(int(s) for s in fields["orders"]),
        domains=tuple(domains),
        width=int(fields["width"][0]),
        n_blocks=int(fields["blocks"][0]),
        modes=tuple(int(s) for s in fields["modes"]),
        baseline=bool(int(fields["baseline"][0])),
    )
    kind = ProblemKind(fields["kind"][0])
    offset = 0
    tensors = {}
    for name, shape in tensor_specs:
        tensors[name], offset = take_floats(payload, offset, shape)
    state = {}
    for name, shape in state_specs:
        state[name], offset = take_floats(payload, offset, shape)
    params = FunctionalParams(config=config, tensors=tensors)
    return params, kind, meta, state
