"""Finite-difference verification of loss gradients on small random models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .encoders import FemP1Decoder, FourierDecoder, LearnedBasis, SensorEncoder
from .grids import periodic_grid, tensor_points, uniform_grid
from .node import InputTrajectory, NodeModel, NodeVariant, VariantKind
from .training import Batch, TrainConfig, init_params, record_loss

FD_STEP = 1e-5
TOLERANCE = 1e-6
KINK_MARGIN = 1e-4

# (variant, decoder kind) pairs: the learned basis and one fixed basis per dimension
CASES = [(kind, dec) for kind in ("source", "diffusion", "multi", "full") for dec in ("learned", "fourier")] + [
    ("ns", "learned"),
    ("ns", "fem_p1"),
]


@dataclass
class GradcheckResult:
    variant: str
    decoder: str
    relative_error: float
    n_params: int
    relu_margin: float
    attempts: int

    @property
    def ok(self) -> bool:
        return self.relative_error <= TOLERANCE

    def to_dict(self) -> dict:
        return {**self.__dict__, "ok": self.ok}


def random_instance(kind: str, decoder_kind: str, rng: np.random.Generator, d_U=4, P=3, d_V=3, N_t=5, n_samples=2):
    """Tiny model, batch and L1-regularized config with entries uniform on [-1, 1]."""
    kind = VariantKind(kind)
    dim = 2 if kind == VariantKind.NS else 1
    variant = NodeVariant(kind, P=P, d_U=d_U, d_V=d_V, n=2, poly_constant=True)
    if decoder_kind == "learned":
        decoder = LearnedBasis(d_U, hidden=(5, 5), dim=dim)
    elif decoder_kind == "fourier":
        decoder = FourierDecoder(d_U)
    else:
        side = int(round(np.sqrt(d_U)))
        ax = periodic_grid(side)
        decoder = FemP1Decoder((ax, ax), periodic=True)
    params = {k: rng.uniform(-1.0, 1.0, v.shape) for k, v in init_params(variant, decoder, 0).items()}
    if dim == 1:
        encoder = SensorEncoder(uniform_grid(d_V))
        x = rng.uniform(0.0, 1.0, 4)
    else:
        encoder = SensorEncoder(rng.uniform(0.0, 1.0, (d_V, 2)), periodic=True)
        x = tensor_points(rng.uniform(0.0, 1.0, 2), rng.uniform(0.0, 1.0, 2))
    inputs = {}
    for role in variant.roles:
        if kind == VariantKind.FULL and role != "u0":
            # time-dependent input, linear between three snapshots
            inputs[role] = InputTrajectory([0.0, 0.5, 1.0], rng.uniform(-1.0, 1.0, (n_samples, 3, d_V)))
        else:
            inputs[role] = rng.uniform(-1.0, 1.0, (n_samples, d_V))
    times = np.array([k / N_t for k in range(1, N_t + 1)])
    labels = rng.uniform(-1.0, 1.0, (n_samples, N_t, len(x)))
    model = NodeModel(variant, decoder, params, encoder, T=1.0, N_t=N_t)
    config = TrainConfig(epochs=0, lam=1e-2, reg_kind="l1")
    return model, Batch(inputs, labels, times, x), config


def _loss_value(model: NodeModel, batch: Batch, config: TrainConfig, tape: Tape | None = None) -> float:
    tape = tape or Tape()
    total, _, _ = record_loss(tape, model, batch, config)
    return float(total.value)


def fd_gradient(model: NodeModel, batch: Batch, config: TrainConfig, h: float = FD_STEP) -> dict:
    """Central differences of the loss in every trainable entry."""
    grads = {}
    for name, value in model.params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _loss_value(model, batch, config)
            flat[i] = orig - h
            down = _loss_value(model, batch, config)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a: dict, b: dict) -> float:
    va = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
    vb = np.concatenate([np.ravel(b[k]) for k in sorted(a)])
    scale = max(np.linalg.norm(va), np.linalg.norm(vb))
    return float(np.linalg.norm(va - vb) / scale) if scale > 0 else 0.0


def check_case(kind: str, decoder_kind: str, seed: int, max_attempts: int = 50) -> GradcheckResult:
    """Draw instances until every relu input and parameter is at least
    ``KINK_MARGIN`` from a kink, then compare reverse mode with central FD."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(5,))))
    for attempt in range(1, max_attempts + 1):
        model, batch, config = random_instance(kind, decoder_kind, rng)
        tape = Tape(track_relu_margin=True)
        total, _, _ = record_loss(tape, model, batch, config)
        param_margin = min(np.abs(v).min() for v in model.params.values())
        if tape.relu_margin < KINK_MARGIN or param_margin < KINK_MARGIN:
            continue
        reverse = tape.backward(total)
        fd = fd_gradient(model, batch, config)
        err = relative_error(reverse, fd)
        return GradcheckResult(kind, decoder_kind, err, model.param_count(), float(tape.relu_margin), attempt)
    raise RuntimeError(f"no kink-free instance for {kind}/{decoder_kind} in {max_attempts} draws")


def run_gradcheck(seed: int = 0) -> list[GradcheckResult]:
    return [check_case(kind, dec, seed) for kind, dec in CASES]
