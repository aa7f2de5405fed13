"""Error metrics and within/beyond-horizon evaluation of trained models."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Eager
from .dataset import Dataset, label_times, solve_labels
from .errors import DegenerateLabelsError, ShapeError
from .node import NodeModel, decode_states, integrate_euler, time_indices


@dataclass
class EvalReport:
    absolute_error: float
    relative_error: float
    n_samples: int
    n_x: int
    n_t: int
    per_time: list[dict] = field(default_factory=list)
    horizon: dict = field(default_factory=dict)
    field_slices: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "absolute_error": self.absolute_error,
            "relative_error": self.relative_error,
            "n_samples": self.n_samples,
            "n_x": self.n_x,
            "n_t": self.n_t,
            "per_time": self.per_time,
            "horizon": self.horizon,
            "field_slices": self.field_slices,
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(a)))) if a.size else 0.0


def compute_errors(predictions, labels, times=None, T_train: float | None = None) -> EvalReport:
    """RMS absolute error over samples x times x points and its ratio to the label RMS.

    Arrays are ``(N, n_t, n_x)``. With ``times``, per-time-slice errors are
    included; with ``T_train`` as well, each slice is tagged as inside or
    beyond the training horizon.
    """
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if predictions.shape != labels.shape:
        raise ShapeError(f"predictions {predictions.shape} and labels {labels.shape} differ")
    if labels.ndim != 3:
        labels = labels.reshape(labels.shape[0] if labels.ndim else 1, 1, -1)
        predictions = predictions.reshape(labels.shape)
    diff = predictions - labels
    label_rms = _rms(labels)
    if label_rms == 0.0:
        raise DegenerateLabelsError("labels are identically zero; relative error undefined")
    absolute = _rms(diff)
    per_time = []
    if times is not None:
        for k, t in enumerate(np.asarray(times, dtype=float)):
            a = _rms(diff[:, k])
            ref = _rms(labels[:, k])
            row = {"t": float(t), "absolute_error": a, "relative_error": a / ref if ref > 0 else None}
            if T_train is not None:
                row["training_horizon"] = int(t <= T_train * (1 + 1e-12))
            per_time.append(row)
    n, n_t, n_x = labels.shape
    return EvalReport(absolute, absolute / label_rms, n, n_x, n_t, per_time)


def _field_slice(x, truth, pred, t: float, sample: int = 0) -> dict:
    x = np.asarray(x, dtype=float)
    return {
        "t": float(t),
        "sample": sample,
        "x": x.tolist(),
        "truth": np.asarray(truth, dtype=float).tolist(),
        "prediction": np.asarray(pred, dtype=float).tolist(),
    }


def _rollout(model: NodeModel, inputs: dict, T: float, N_t: int):
    return integrate_euler(model.variant, model.params, inputs, T, N_t, ops=Eager())


def _decode(model: NodeModel, states: list, x) -> np.ndarray:
    ops = Eager()
    return decode_states(ops, model.decoder, model.params, ops.concat(states, axis=1), x)


def evaluate(model: NodeModel, ds: Dataset, split: str = "test", return_predictions: bool = False):
    """Errors of the model on a dataset split at the split's own resolution.

    The Euler grid is refined to the label times (``T k / n_t``) when they
    are finer than the training grid. With ``return_predictions`` the
    ``(N, n_t, n_x)`` predictions are returned as well.
    """
    s = ds.split(split)
    T, N_t = ds.T, len(s.times)
    start = time.perf_counter()
    inputs = ds.encode(s, model.encoder)
    idx = time_indices(s.times, T, N_t)
    traj = _rollout(model, inputs, T, N_t)
    pred = _decode(model, [traj.states[k] for k in idx], s.x)
    elapsed = time.perf_counter() - start
    report = compute_errors(pred, s.labels, s.times)
    if s.n:
        report.field_slices = [_field_slice(s.x, s.labels[0, -1], pred[0, -1], s.times[-1])]
    report.timings = {"predict_seconds": elapsed}
    return (report, pred) if return_predictions else report


def evaluate_extrapolation(model: NodeModel, ds: Dataset, T_eval: float, split: str = "test", threads: int = 1):
    """Errors on ``[0, T_eval]`` against fresh reference labels.

    The Euler step and the label spacing of the split are kept, so the
    slice ``t <= T`` reproduces :func:`evaluate` bitwise. Returns the report
    with ``horizon = {"within": ..., "extrapolated": ...}``.
    """
    s = ds.split(split)
    T = ds.T
    n_within = len(s.times)
    ratio = T_eval / T * n_within
    N_eval = int(round(ratio))
    if T_eval < T or abs(ratio - N_eval) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"T_eval={T_eval} must be >= {T} and a whole number of label steps T/{n_within}")
    start = time.perf_counter()
    dt = None
    if ds.settings.is_ns:
        dt = ds.meta.get("ns_dt", {}).get(split)
    times = label_times(T_eval, N_eval)
    labels = solve_labels(ds.settings, s.inputs, T_eval, N_eval, s.x, threads=threads, dt=dt)
    solve_seconds = time.perf_counter() - start

    start = time.perf_counter()
    inputs = ds.encode(s, model.encoder)
    traj = _rollout(model, inputs, T_eval, N_eval)
    within_pred = _decode(model, traj.states[1:n_within + 1], s.x)
    parts = [within_pred]
    if N_eval > n_within:
        parts.append(_decode(model, traj.states[n_within + 1:], s.x))
    pred = np.concatenate(parts, axis=1)
    predict_seconds = time.perf_counter() - start

    within = compute_errors(within_pred, labels[:, :n_within])
    report = compute_errors(pred, labels, times, T_train=T)
    report.horizon = {
        "T_train": T,
        "T_eval": T_eval,
        "within": {"absolute_error": within.absolute_error, "relative_error": within.relative_error},
    }
    if N_eval > n_within:
        beyond = compute_errors(pred[:, n_within:], labels[:, n_within:])
        report.horizon["extrapolated"] = {
            "absolute_error": beyond.absolute_error,
            "relative_error": beyond.relative_error,
        }
    if s.n:
        report.field_slices = [
            _field_slice(s.x, labels[0, n_within - 1], pred[0, n_within - 1], times[n_within - 1]),
            _field_slice(s.x, labels[0, -1], pred[0, -1], times[-1]),
        ]
    report.timings = {"reference_seconds": solve_seconds, "predict_seconds": predict_seconds}
    return report, within_pred, labels

