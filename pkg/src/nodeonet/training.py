"""Loss assembly, ADAM, initialization, the training loop and checkpoints."""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Eager, Tape
from .container import read_container, write_container
from .encoders import SensorEncoder, decoder_from_dict
from .errors import (
    ContainerFormatError,
    DivergedError,
    GridMismatchError,
    NonFiniteError,
    TimeNotOnGridError,
)
from .node import NodeModel, NodeVariant, forward, time_indices


@dataclass
class TrainConfig:
    epochs: int = 1000
    learning_rate: float = 1e-3
    batch_size: int | None = None  # None: full batch
    lam: float = 0.0
    reg_kind: str = "none"  # "none" | "l1"
    seed: int = 0
    freeze_decoder: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    history_every: int = 100
    # stands in for a quasi-Newton polish: extra ADAM epochs at a tenth of the rate
    finetune_epochs: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.reg_kind not in ("none", "l1"):
            raise ValueError(f"unknown reg_kind {self.reg_kind!r}")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.history_every < 1:
            raise ValueError("history_every must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.epochs + self.finetune_epochs

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate if epoch < self.epochs else self.learning_rate / 10.0


@dataclass
class Batch:
    """Encoded inputs and labels ``(N, n_t, n_x)`` at ``times`` x ``x``."""

    inputs: dict
    labels: np.ndarray
    times: np.ndarray
    x: np.ndarray

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch({k: v[idx] for k, v in self.inputs.items()}, self.labels[idx], self.times, self.x)


@dataclass
class LossBreakdown:
    data_term: float
    reg_term: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def tune_allocator() -> None:
    """Keep freed arrays in the glibc heap instead of returning them to the OS.

    Training allocates and frees the same large temporaries every epoch; by
    default glibc maps each with mmap and unmaps it on free, which costs
    page faults on every use. No-op on other platforms.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return
    M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
    mallopt(M_MMAP_THRESHOLD, 2**30)
    mallopt(M_TRIM_THRESHOLD, 2**31 - 1)
    mallopt(M_TOP_PAD, 64 * 2**20)


# -- initialization ------------------------------------------------------------


def init_params(variant: NodeVariant, decoder, seed: int) -> dict[str, np.ndarray]:
    """Uniform fan-in initialization.

    Matrices ``P_*`` use bound ``1/sqrt(d_V)``, per-term vectors and
    polynomial coefficients ``1/sqrt(d_U)``; the basis network initializes
    itself. Parameters are drawn in sorted name order from one stream.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(3,))))
    shapes = dict(variant.param_shapes())
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        fan_in = variant.d_V if name.startswith("P_") else variant.d_U
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    params.update(decoder.init_params(rng))
    return params


def build_model(variant, decoder, encoder, T: float, N_t: int, seed: int) -> NodeModel:
    return NodeModel(variant, decoder, init_params(variant, decoder, seed), encoder, T, N_t)


# -- loss --------------------------------------------------------------------------


def check_grid(model: NodeModel, batch: Batch) -> list[int]:
    try:
        idx = time_indices(batch.times, model.T, model.N_t)
    except TimeNotOnGridError as exc:
        raise GridMismatchError(f"label times are not on the model's Euler grid: {exc}") from exc
    n_x = batch.labels.shape[-1]
    if batch.labels.shape[1] != len(batch.times) or np.shape(batch.x)[0] != n_x:
        raise GridMismatchError(
            f"labels {batch.labels.shape} do not match {len(batch.times)} times x {np.shape(batch.x)[0]} points"
        )
    return idx


def trainable_names(model: NodeModel, config: TrainConfig) -> list[str]:
    names = model.node_param_names
    if not config.freeze_decoder:
        names = names + model.decoder_param_names
    return names


def record_loss(tape, model: NodeModel, batch: Batch, config: TrainConfig):
    """Record the loss on ``tape``; returns ``(total, data, reg)`` nodes."""
    check_grid(model, batch)
    train = set(trainable_names(model, config))
    p = {
        name: tape.param(name, value) if name in train else tape.constant(value)
        for name, value in model.params.items()
    }
    pred = forward(model, batch.inputs, batch.times, batch.x, ops=tape, params=p)
    data = tape.mean(tape.square(tape.sub(pred, batch.labels)))
    reg = None
    if config.reg_kind == "l1":
        parts = [tape.sum(tape.abs(p[name])) for name in sorted(train)]
        reg = parts[0]
        for part in parts[1:]:
            reg = tape.add(reg, part)
    total = data if reg is None or config.lam == 0.0 else tape.axpy(config.lam, reg, data)
    return total, data, reg


def loss(model: NodeModel, batch: Batch, config: TrainConfig) -> LossBreakdown:
    """Mean squared error over samples x times x points plus ``lam * R(theta)``."""
    tape = Tape()
    total, data, reg = record_loss(tape, model, batch, config)
    reg_value = float(reg.value) if reg is not None else 0.0
    return LossBreakdown(float(data.value), reg_value, float(total.value))


def loss_and_grad(model: NodeModel, batch: Batch, config: TrainConfig):
    tape = Tape()
    total, data, reg = record_loss(tape, model, batch, config)
    grads = tape.backward(total)
    reg_value = float(reg.value) if reg is not None else 0.0
    return LossBreakdown(float(data.value), reg_value, float(total.value)), grads


# -- ADAM --------------------------------------------------------------------------


def adam_init(params: dict, names) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(params[k]) for k in names},
        "v": {k: np.zeros_like(params[k]) for k in names},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update of the parameters named in ``grads``.

    Returns new ``(params, state)``; the inputs are not modified.
    """
    t = state["t"] + 1
    new_params = dict(params)
    m_new, v_new = dict(state["m"]), dict(state["v"])
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, expected {np.shape(params[name])}")
        m = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = beta2 * state["v"][name] + (1.0 - beta2) * (g * g)
        new_params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, {"t": t, "m": m_new, "v": v_new}


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: NodeModel
    optimizer: dict
    epoch: int
    losses: np.ndarray  # (epochs, 3): data, reg, total before each update
    final: LossBreakdown
    seconds: float = 0.0

    def history_rows(self, every: int = 100) -> list[tuple]:
        rows = [(e, *self.losses[e]) for e in range(0, len(self.losses), every)]
        rows.append((self.epoch, self.final.data_term, self.final.reg_term, self.final.total))
        return rows


@dataclass
class TrainState:
    """Everything needed to continue a run bitwise: params, moments, epoch, loss log."""

    params: dict
    optimizer: dict
    epoch: int = 0
    losses: list = field(default_factory=list)


def _epoch_batches(n: int, batch_size: int | None, seed: int, epoch: int):
    if batch_size is None or batch_size >= n:
        return [slice(None)]
    ss = np.random.SeedSequence(int(seed), spawn_key=(4, int(epoch)))
    perm = np.random.Generator(np.random.Philox(ss)).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(
    model: NodeModel,
    batch: Batch,
    config: TrainConfig,
    state: TrainState | None = None,
    stop_at: int | None = None,
    callback: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """ADAM on the full (or mini-) batch for ``config.total_epochs`` epochs.

    ``state`` resumes an earlier run; ``stop_at`` ends early at that epoch
    (used to write intermediate checkpoints).
    """
    if batch.n == 0:
        raise ValueError("training set is empty")
    tune_allocator()
    check_grid(model, batch)
    names = trainable_names(model, config)
    model = model.copy()
    if state is None:
        state = TrainState(model.params, adam_init(model.params, names))
    else:
        model.params = {k: np.array(v, copy=True) for k, v in state.params.items()}
    params, opt = model.params, state.optimizer
    losses = list(state.losses)
    end = config.total_epochs if stop_at is None else min(stop_at, config.total_epochs)
    start = time.perf_counter()
    for epoch in range(state.epoch, end):
        for idx in _epoch_batches(batch.n, config.batch_size, config.seed, epoch):
            model.params = params
            sub = batch if isinstance(idx, slice) else batch.subset(idx)
            try:
                br, grads = loss_and_grad(model, sub, config)
            except (NonFiniteError, DivergedError) as exc:
                raise DivergedError(f"non-finite loss at epoch {epoch}: {exc}", step=epoch) from exc
            if not np.isfinite(br.total):
                raise DivergedError(f"non-finite loss at epoch {epoch}", step=epoch)
            grads = {k: grads[k] for k in names}
            params, opt = adam_step(params, grads, opt, config.lr_at(epoch), config.beta1, config.beta2, config.eps)
        losses.append((br.data_term, br.reg_term, br.total))
        if callback is not None:
            callback(epoch, br)
    model.params = params
    try:
        final = loss(model, batch, config)
    except NonFiniteError as exc:
        raise DivergedError(f"non-finite loss after epoch {end}", step=end) from exc
    arr = np.array(losses, dtype=float).reshape(-1, 3)
    return TrainResult(model, opt, end, arr, final, time.perf_counter() - start)


def write_history_csv(path, result: TrainResult, every: int = 100) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "data_term", "reg_term", "total"])
        for e, d, r, t in result.history_rows(every):
            w.writerow([e, repr(float(d)), repr(float(r)), repr(float(t))])


def moving_average(values, window: int = 100) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return values.copy()
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def smoothed_non_increasing(losses, window: int = 100, tail: float = 0.8, allowed: float = 0.05, rel: float = 1e-3):
    """Check the moving average over the final ``tail`` fraction never rises,
    except for at most ``allowed`` of its steps by less than ``rel`` (relative).
    Returns ``(ok, fraction_of_rises, worst_relative_rise)``.
    """
    ma = moving_average(losses, window)
    seg = ma[int(len(ma) * (1.0 - tail)):]
    if len(seg) < 2:
        return True, 0.0, 0.0
    rises = np.diff(seg) / np.abs(seg[:-1])
    up = rises > 0
    frac = float(up.mean())
    worst = float(rises.max()) if up.any() else 0.0
    return bool(frac <= allowed and worst < rel), frac, worst


# -- checkpoints ----------------------------------------------------------------------


def model_meta(model: NodeModel) -> dict:
    return {
        "variant": model.variant.to_dict(),
        "decoder": model.decoder.to_dict(),
        "encoder": model.encoder.to_dict(),
        "T": model.T,
        "N_t": model.N_t,
        "model_meta": model.meta,
    }


def model_from_meta(meta: dict, arrays: dict) -> NodeModel:
    variant = NodeVariant.from_dict(meta["variant"])
    fem_axes = None
    if meta["decoder"]["kind"] == "fem_p1":
        fem_axes = tuple(arrays[k] for k in sorted(a for a in arrays if a.startswith("fem_axis")))
    decoder = decoder_from_dict(meta["decoder"], fem_axes=fem_axes)
    encoder = SensorEncoder(arrays["sensors"], periodic=meta["encoder"]["periodic"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    expected = set(variant.param_shapes()) | set(decoder.param_shapes())
    if set(params) != expected:
        raise ContainerFormatError(f"checkpoint parameters {sorted(params)} do not match {sorted(expected)}")
    return NodeModel(variant, decoder, params, encoder, float(meta["T"]), int(meta["N_t"]), meta.get("model_meta", {}))


def save_checkpoint(path, model: NodeModel, config: TrainConfig | None = None, result: TrainResult | None = None,
                    extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["sensors"] = model.encoder.sensors
    for i, ax in enumerate(getattr(model.decoder, "axes", ()) if model.decoder.kind == "fem_p1" else ()):
        arrays[f"fem_axis{i}"] = ax
    meta = {"kind": "checkpoint", **model_meta(model), "epoch": 0}
    if config is not None:
        meta["train_config"] = asdict(config)
    if result is not None:
        meta["epoch"] = result.epoch
        meta["adam_t"] = result.optimizer["t"]
        meta["final_loss"] = result.final.to_dict()
        for k in result.optimizer["m"]:
            arrays[f"adam_m/{k}"] = result.optimizer["m"][k]
            arrays[f"adam_v/{k}"] = result.optimizer["v"][k]
        arrays["losses"] = result.losses
    if extra:
        meta.update(extra)
    write_container(path, arrays, meta)


def load_checkpoint(path):
    """Return ``(model, train_state or None, meta)``."""
    arrays, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ContainerFormatError(f"{path} is not a checkpoint container")
    try:
        model = model_from_meta(meta, arrays)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerFormatError(f"checkpoint is incomplete: {exc}") from exc
    state = None
    if "adam_t" in meta:
        m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        v = {k[len("adam_v/"):]: a for k, a in arrays.items() if k.startswith("adam_v/")}
        losses = [tuple(row) for row in arrays.get("losses", np.zeros((0, 3)))]
        state = TrainState(model.params, {"t": int(meta["adam_t"]), "m": m, "v": v}, int(meta["epoch"]), losses)
    return model, state, meta


def predict_eager(model: NodeModel, batch: Batch) -> np.ndarray:
    return forward(model, batch.inputs, batch.times, batch.x, ops=Eager())
