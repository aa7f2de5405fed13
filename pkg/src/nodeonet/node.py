"""Physics-encoded neural ODE right-hand sides and the full encoder/NODE/decoder map.

The latent state is carried batched as ``psi`` of shape ``(N, 1, d_U)`` so
that per-term parameters stacked as ``(P, d_U)`` broadcast to ``(N, P, d_U)``
and the sum over terms is a reduction over axis 1.

Right-hand sides (sigma is the activation, the source projection is added
once outside the sum over terms):

* source:     sum_i W_i * sigma(A_i * psi + A_i(t) + B_i) + P_f f
* diffusion:  sum_i W_i * sigma(A_i * [P_D D] * psi + A_i(t) + B_i) + P_f f
* multi:      same form as diffusion, with D and f both sampled inputs
* full:       sum_i (W_i * [P_r R(t)] + V_i) * sigma(A_i * [P_D D(t)] * psi + A_i(t) + B_i) + P_f f(t)
* ns:         sum_i W_i * sigma(A_i * psi + (C_i * psi) * (D_i * psi) + A_i(t) + B_i) + P_f f

``A_i(t)`` is the vector polynomial ``a_i^n t^n + ... + a_i^1 t (+ a_i^0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Eager
from .encoders import Decoder, SensorEncoder
from .errors import DivergedError, MissingInputError, NonFiniteError, ShapeError, TimeNotOnGridError


class VariantKind(str, Enum):
    SOURCE = "source"
    DIFFUSION = "diffusion"
    MULTI = "multi"
    FULL = "full"
    NS = "ns"


# encoded inputs each variant consumes; u0 feeds the initial state only
ROLES = {
    VariantKind.SOURCE: ("f",),
    VariantKind.DIFFUSION: ("D", "f"),
    VariantKind.MULTI: ("D", "f"),
    VariantKind.FULL: ("D", "R", "f", "u0"),
    VariantKind.NS: ("f", "u0"),
}

_TERM_VECTORS = {
    VariantKind.SOURCE: ("W", "A", "B"),
    VariantKind.DIFFUSION: ("W", "A", "B"),
    VariantKind.MULTI: ("W", "A", "B"),
    VariantKind.FULL: ("W", "V", "A", "B"),
    VariantKind.NS: ("W", "A", "B", "C", "D"),
}

_MATRICES = {
    VariantKind.SOURCE: ("P_f",),
    VariantKind.DIFFUSION: ("P_D", "P_f"),
    VariantKind.MULTI: ("P_D", "P_f"),
    VariantKind.FULL: ("P_D", "P_r", "P_f", "P_u"),
    VariantKind.NS: ("P_f", "P_u"),
}


@dataclass(frozen=True)
class NodeVariant:
    kind: VariantKind
    P: int
    d_U: int
    d_V: int
    n: int = 1
    activation: str = "relu"
    poly_constant: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", VariantKind(self.kind))
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.n < 0:
            raise ValueError("polynomial degree n must be >= 0")
        if self.d_U < 1 or self.d_V < 1:
            raise ValueError("d_U and d_V must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def roles(self) -> tuple[str, ...]:
        return ROLES[self.kind]

    @property
    def has_constant(self) -> bool:
        return self.poly_constant or self.n == 0

    @property
    def uses_initial_state(self) -> bool:
        return "u0" in self.roles

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {name: (self.P, self.d_U) for name in _TERM_VECTORS[self.kind]}
        first = 0 if self.has_constant else 1
        for j in range(first, self.n + 1):
            shapes[f"a{j}"] = (self.P, self.d_U)
        for name in _MATRICES[self.kind]:
            shapes[name] = (self.d_U, self.d_V)
        return shapes

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "P": self.P,
            "d_U": self.d_U,
            "d_V": self.d_V,
            "n": self.n,
            "activation": self.activation,
            "poly_constant": self.poly_constant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeVariant":
        return cls(**d)


@dataclass
class InputTrajectory:
    """Encoded time-dependent input: ``values[:, k]`` holds the sensor values at ``times[k]``.

    Between snapshot times the input is linear; outside it is held constant.
    """

    times: np.ndarray
    values: np.ndarray  # (N, n_times, d_V)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[1] != len(self.times):
            raise ShapeError(f"values {self.values.shape} do not match {len(self.times)} times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")

    def bracket(self, t: float) -> tuple[int, float]:
        """Index ``k`` and weight ``w`` with input(t) = (1-w) v_k + w v_{k+1}."""
        if len(self.times) == 1 or t <= self.times[0]:
            return 0, 0.0
        if t >= self.times[-1]:
            return len(self.times) - 1, 0.0
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return k, float(w)


def poly_time_term(params: dict, i: int, t: float, variant: NodeVariant | None = None) -> np.ndarray:
    """``A_i^n(t)`` for one term, by Horner's rule (numpy, for inspection)."""
    degrees = sorted(int(k[1:]) for k in params if k[0] == "a" and k[1:].isdigit())
    if variant is not None:
        degrees = [j for j in range(0 if variant.has_constant else 1, variant.n + 1)]
    n = max(degrees)
    acc = np.array(params[f"a{n}"][i], dtype=float)
    for j in range(n - 1, -1, -1):
        coef = params.get(f"a{j}")
        acc = acc * t + (coef[i] if coef is not None else 0.0)
    return acc


def _poly_all(ops, p: dict, variant: NodeVariant, t: float):
    """``A^n(t)`` for every term at once, shape ``(P, d_U)``, via Horner with axpy."""
    n = variant.n
    acc = p[f"a{n}"]
    for j in range(n - 1, 0, -1):
        acc = ops.axpy(t, acc, p[f"a{j}"])
    if n == 0:
        return acc
    if variant.has_constant:
        return ops.axpy(t, acc, p["a0"])
    return ops.scale(acc, t)


class _Projected:
    """``P @ input`` for one role, constant or linear in time."""

    def __init__(self, ops, matrix, value):
        self.ops = ops
        if isinstance(value, InputTrajectory):
            self.traj = value
            self.value = ops.matvec(matrix, ops.constant(value.values))  # (N, n_times, d_U)
        else:
            self.traj = None
            v = np.asarray(value, dtype=float)
            self.value = ops.matvec(matrix, ops.constant(v[:, None, :]))  # (N, 1, d_U)

    def at(self, t: float):
        if self.traj is None:
            return self.value
        k, w = self.traj.bracket(t)
        lo = self.ops.slice(self.value, (slice(None), slice(k, k + 1)))
        if w == 0.0:
            return lo
        hi = self.ops.slice(self.value, (slice(None), slice(k + 1, k + 2)))
        return self.ops.axpy(w, hi, self.ops.scale(lo, 1.0 - w))


def _batch_size(value) -> int:
    if isinstance(value, InputTrajectory):
        return value.values.shape[0]
    return np.asarray(value).shape[0]


def check_inputs(variant: NodeVariant, inputs: dict) -> int:
    """Validate roles and shapes; return the batch size."""
    sizes = set()
    for role in variant.roles:
        if role not in inputs:
            raise MissingInputError(f"{variant.kind.value} variant needs input {role!r}")
        value = inputs[role]
        d = value.values.shape[-1] if isinstance(value, InputTrajectory) else np.shape(value)[-1]
        ndim = 3 if isinstance(value, InputTrajectory) else np.ndim(value)
        if d != variant.d_V or ndim not in (2, 3):
            raise ShapeError(f"input {role!r} must have d_V={variant.d_V} sensors, got shape {np.shape(value)}")
        sizes.add(_batch_size(value))
    if len(sizes) > 1:
        raise ShapeError(f"inputs disagree on batch size: {sorted(sizes)}")
    return sizes.pop()


class Dynamics:
    """Right-hand side bound to one batch of encoded inputs.

    Input projections and time-invariant parameter products are formed once
    here, so each Euler step only does the state-dependent work.
    """

    def __init__(self, ops, variant: NodeVariant, p: dict, inputs: dict):
        self.ops = ops
        self.variant = variant
        self.p = p
        self.batch = check_inputs(variant, inputs)
        kind = variant.kind
        self.src = _Projected(ops, p["P_f"], inputs["f"])
        self.diff = _Projected(ops, p["P_D"], inputs["D"]) if "P_D" in p and kind != VariantKind.SOURCE else None
        self.react = _Projected(ops, p["P_r"], inputs["R"]) if kind == VariantKind.FULL else None
        # (C*psi)*(D*psi) == (C*D)*psi^2, one large product instead of three
        self.cd = ops.hadamard(p["C"], p["D"]) if kind == VariantKind.NS else None
        self.u0 = inputs.get("u0") if variant.uses_initial_state else None

    def initial_state(self):
        ops, v = self.ops, self.variant
        if self.u0 is None:
            return ops.constant(np.zeros((self.batch, 1, v.d_U)))
        u0 = np.asarray(self.u0, dtype=float)
        return ops.matvec(self.p["P_u"], ops.constant(u0[:, None, :]))

    def __call__(self, psi, t: float):
        ops, p, kind = self.ops, self.p, self.variant.kind
        shift = ops.add(_poly_all(ops, p, self.variant, t), p["B"])  # (P, d_U)
        if kind == VariantKind.NS:
            z = ops.add(ops.hadamard(p["A"], psi), ops.hadamard(self.cd, ops.square(psi)))
        elif self.diff is not None:
            z = ops.hadamard(p["A"], ops.hadamard(self.diff.at(t), psi))
        else:
            z = ops.hadamard(p["A"], psi)
        act = ops.activation(self.variant.activation, ops.add(z, shift))
        if kind == VariantKind.FULL:
            weight = ops.add(ops.hadamard(p["W"], self.react.at(t)), p["V"])
        else:
            weight = p["W"]
        terms = ops.sum(ops.hadamard(weight, act), axis=1, keepdims=True)
        return ops.add(terms, self.src.at(t))


def rhs(variant: NodeVariant, params: dict, psi, t: float, encoded_inputs: dict, ops=None):
    """Evaluate the right-hand side for one state (``(d_U,)``) or a batch (``(N, 1, d_U)``)."""
    ops = ops or Eager()
    single = np.ndim(psi) == 1 if not hasattr(psi, "tape") else False
    if single:
        psi = np.asarray(psi, dtype=float)[None, None, :]
        encoded_inputs = {
            k: (v if isinstance(v, InputTrajectory) else np.asarray(v, dtype=float)[None, :])
            for k, v in encoded_inputs.items()
        }
    out = Dynamics(ops, variant, params, encoded_inputs)(psi, t)
    return out[0, 0] if single else out


def euler_times(T: float, N_t: int) -> np.ndarray:
    """Grid ``t_k = T k / N_t``; computed this way so nested grids agree bitwise."""
    return np.array([T * k / N_t for k in range(N_t + 1)])


@dataclass
class LatentTrajectory:
    times: np.ndarray
    states: list  # N_t + 1 states, each (N, 1, d_U)

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.states, axis=1)  # (N, N_t + 1, d_U)


def integrate_euler(
    variant: NodeVariant, params: dict, encoded_inputs: dict, T: float, N_t: int, ops=None, psi0=None
) -> LatentTrajectory:
    """Explicit Euler: ``psi_{k+1} = psi_k + dt * rhs(psi_k, t_k)``."""
    if N_t < 1:
        raise ValueError("N_t must be >= 1")
    ops = ops or Eager()
    dyn = Dynamics(ops, variant, params, encoded_inputs)
    psi = dyn.initial_state() if psi0 is None else psi0
    times = euler_times(T, N_t)
    dt = T / N_t
    states = [psi]
    for k in range(N_t):
        try:
            psi = ops.axpy(dt, dyn(psi, times[k]), psi)
        except NonFiniteError as exc:
            raise DivergedError(f"latent state became non-finite at Euler step {k + 1}", step=k + 1) from exc
        states.append(psi)
    return LatentTrajectory(times, states)


def time_indices(query_times, T: float, N_t: int) -> list[int]:
    """Positions of ``query_times`` on the Euler grid of ``[0, T]`` with ``N_t`` steps."""
    grid = euler_times(T, N_t)
    tol = 1e-12 * max(1.0, abs(T))
    idx = []
    for t in np.atleast_1d(np.asarray(query_times, dtype=float)):
        k = int(np.argmin(np.abs(grid - t)))
        if abs(grid[k] - t) > tol:
            raise TimeNotOnGridError(f"time {t} is not on the Euler grid of [0, {T}] with {N_t} steps")
        idx.append(k)
    return idx


@dataclass
class NodeModel:
    """NODE variant, its parameters, and the encoder/decoder around it.

    ``params`` holds both the NODE parameters and the decoder parameters
    (names starting with ``basis.``). ``T`` and ``N_t`` give the training
    Euler grid.
    """

    variant: NodeVariant
    decoder: Decoder
    params: dict
    encoder: SensorEncoder
    T: float = 1.0
    N_t: int = 10
    meta: dict = field(default_factory=dict)

    @property
    def node_param_names(self) -> list[str]:
        return list(self.variant.param_shapes())

    @property
    def decoder_param_names(self) -> list[str]:
        return list(self.decoder.param_shapes())

    def param_count(self) -> int:
        return int(sum(np.size(v) for v in self.params.values()))

    def copy(self) -> "NodeModel":
        return NodeModel(
            self.variant,
            self.decoder,
            {k: np.array(v, copy=True) for k, v in self.params.items()},
            self.encoder,
            self.T,
            self.N_t,
            dict(self.meta),
        )


def decode_states(ops, decoder: Decoder, params: dict, states, x):
    """``sum_j alpha_j(x) psi_j`` for stacked states ``(N, n_t, d_U)`` -> ``(N, n_t, n_x)``."""
    alpha = decoder.basis(ops, params, x)
    return ops.matvec(alpha, states)


def forward(
    model: NodeModel,
    encoded_inputs: dict,
    query_times,
    x,
    T: float | None = None,
    N_t: int | None = None,
    ops=None,
    params: dict | None = None,
):
    """Predictions ``(N, len(query_times), n_x)`` on the grid ``query_times x x``.

    The latent trajectory is integrated once per batch on the Euler grid of
    ``[0, T]`` with ``N_t`` steps (the model's training grid by default); the
    decoder is evaluated once at ``x``. ``params`` overrides ``model.params``
    (the trainer passes tape variables here).
    """
    ops = ops or Eager()
    params = model.params if params is None else params
    T = model.T if T is None else T
    N_t = model.N_t if N_t is None else N_t
    idx = time_indices(query_times, T, N_t)
    traj = integrate_euler(model.variant, params, encoded_inputs, T, N_t, ops=ops)
    states = ops.concat([traj.states[k] for k in idx], axis=1)
    return decode_states(ops, model.decoder, params, states, x)


def predict(model: NodeModel, encoded_inputs: dict, T: float, N_t: int, x, include_initial: bool = False):
    """Eager predictions at every Euler time (``t_1..t_N_t``, or from ``t_0``)."""
    times = euler_times(T, N_t)
    if not include_initial:
        times = times[1:]
    return forward(model, encoded_inputs, times, x, T=T, N_t=N_t)


def extend_horizon(model: NodeModel, encoded_inputs: dict, T_new: float, N_t_new: int, x, include_initial=False):
    """Roll the trained NODE out to ``T_new`` with no retraining.

    When ``T_new / N_t_new`` equals the standard step, the shared part of the
    rollout is bitwise identical to :func:`predict` on the shorter horizon.
    """
    if T_new < model.T:
        raise ValueError(f"T_new={T_new} is shorter than the training horizon {model.T}")
    return predict(model, encoded_inputs, T_new, N_t_new, x, include_initial=include_initial)
