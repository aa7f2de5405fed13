"""Sensor encoders, basis decoders, and encoder/decoder consistency studies.

An encoder maps a function to its values at ``d_V`` fixed sensors. A decoder
maps latent coefficients ``psi`` to the function ``x -> sum_j alpha_j(x) psi_j``
for a family of basis functions ``alpha``: a trainable network, a Fourier
system, or P1/Q1 hat functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Eager
from .errors import BadGridError, InsufficientLevelsError, OutOfDomainError
from .grids import (
    apply_rows,
    interpolation_matrix,
    interpolation_matrix_2d,
    periodic_grid,
    tensor_points,
    uniform_grid,
)


@dataclass
class Field:
    """Grid values of a scalar function; leading axes of ``values`` are batch.

    1D fields have ``axes = (nodes,)`` and values ``(..., n)``; 2D fields
    have two axes and row-major flattened values ``(..., n1 * n2)``.
    """

    values: np.ndarray
    axes: tuple[np.ndarray, ...]
    periodic: bool = False

    @property
    def dim(self) -> int:
        return len(self.axes)


class SensorEncoder:
    """Point evaluation at a fixed list of sensors."""

    def __init__(self, sensors, periodic: bool = False):
        sensors = np.asarray(sensors, dtype=float)
        if sensors.ndim == 1:
            pts = sensors[:, None]
        elif sensors.ndim == 2 and sensors.shape[1] in (1, 2):
            pts = sensors
        else:
            raise BadGridError(f"sensors must be (d_V,) or (d_V, 2), got {sensors.shape}")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise BadGridError("sensors must be distinct")
        if np.any(pts < 0.0) or np.any(pts > 1.0):
            raise OutOfDomainError("sensors must lie in the closed unit domain")
        self.sensors = sensors
        self.periodic = periodic

    @classmethod
    def uniform(cls, d_V: int) -> "SensorEncoder":
        return cls(uniform_grid(d_V))

    @classmethod
    def periodic_square(cls, m: int) -> "SensorEncoder":
        """``m * m`` sensors on the periodic grid ``(j/m, k/m)``."""
        ax = periodic_grid(m)
        return cls(tensor_points(ax, ax), periodic=True)

    @property
    def d_V(self) -> int:
        return len(self.sensors)

    @property
    def dim(self) -> int:
        return 1 if self.sensors.ndim == 1 else self.sensors.shape[1]

    def sampling_matrix(self, axes, periodic: bool | None = None):
        periodic = self.periodic if periodic is None else periodic
        if len(axes) == 1:
            return interpolation_matrix(axes[0], self.sensors, periodic=periodic)
        return interpolation_matrix_2d(axes[0], axes[1], self.sensors, periodic=periodic)

    def encode(self, v: Field | Callable) -> np.ndarray:
        """Values at the sensors, shape ``(..., d_V)``.

        ``v`` is either a callable evaluated pointwise (``v(x)`` in 1D,
        ``v(x1, x2)`` in 2D) or a :class:`Field`, which is interpolated
        (piecewise) linearly between its grid nodes.
        """
        if callable(v) and not isinstance(v, Field):
            if self.dim == 1:
                return np.asarray(v(self.sensors), dtype=float)
            return np.asarray(v(self.sensors[:, 0], self.sensors[:, 1]), dtype=float)
        if v.dim != self.dim:
            raise BadGridError(f"{v.dim}D field given to a {self.dim}D encoder")
        return apply_rows(self.sampling_matrix(v.axes, v.periodic), v.values)

    def to_dict(self) -> dict:
        return {"periodic": self.periodic, "shape": list(self.sensors.shape)}


def fourier_frequencies(d_U: int) -> list[tuple[int, str]]:
    """Constant first, then cos/sin pairs of increasing frequency, truncated to d_U."""
    freqs: list[tuple[int, str]] = [(0, "const")]
    k = 1
    while len(freqs) < d_U:
        freqs.append((k, "cos"))
        if len(freqs) < d_U:
            freqs.append((k, "sin"))
        k += 1
    return freqs[:d_U]


def _as_points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if dim == 1:
        return x.reshape(-1, 1)
    return x.reshape(-1, dim)


class Decoder:
    """Base class: ``basis`` returns the ``(n_points, d_U)`` matrix of alpha_j(x_i)."""

    kind = "base"
    d_U: int
    dim: int = 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def basis_values(self, x) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def basis(self, ops, params: dict, x):
        return ops.constant(self.basis_values(x))

    def decode(self, params: dict, psi, x) -> np.ndarray:
        """Evaluate ``sum_j alpha_j(x) psi_j`` at the point(s) ``x``."""
        psi = np.asarray(psi, dtype=float)
        ops = Eager()
        alpha = self.basis(ops, params, x)
        out = ops.matvec(alpha, psi)
        return out[..., 0] if np.ndim(x) == 0 or (self.dim > 1 and np.ndim(x) == 1) else out

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


class FourierDecoder(Decoder):
    kind = "fourier"

    def __init__(self, d_U: int):
        if d_U < 1:
            raise ValueError("d_U must be >= 1")
        self.d_U = d_U
        self.frequencies = fourier_frequencies(d_U)

    def basis_values(self, x) -> np.ndarray:
        x = _as_points(x, 1)[:, 0]
        cols = []
        for k, kind in self.frequencies:
            if kind == "const":
                cols.append(np.ones_like(x))
            elif kind == "cos":
                cols.append(np.cos(2.0 * np.pi * k * x))
            else:
                cols.append(np.sin(2.0 * np.pi * k * x))
        return np.stack(cols, axis=1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_U": self.d_U}


class FemP1Decoder(Decoder):
    """Hat functions on a uniform 1D grid, or tensor-product (Q1) hats in 2D."""

    kind = "fem_p1"

    def __init__(self, axes, periodic: bool = False):
        if isinstance(axes, np.ndarray) and axes.ndim == 1:
            axes = (axes,)
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        self.periodic = periodic
        self.dim = len(self.axes)
        self.d_U = int(np.prod([len(a) for a in self.axes]))

    @property
    def nodes(self) -> np.ndarray:
        if self.dim == 1:
            return self.axes[0]
        return tensor_points(*self.axes)

    def basis_matrix(self, x):
        """Sparse (n_x, d_U) evaluation matrix; at most 2**dim nonzeros per row."""
        pts = _as_points(x, self.dim)
        if self.dim == 1:
            return interpolation_matrix(self.axes[0], pts[:, 0], periodic=self.periodic)
        return interpolation_matrix_2d(*self.axes, pts, periodic=self.periodic)

    def basis_values(self, x) -> np.ndarray:
        return self.basis_matrix(x).toarray()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_U": self.d_U, "periodic": self.periodic}


class LearnedBasis(Decoder):
    """Fully connected network ``x -> (alpha_1(x), ..., alpha_dU(x))``.

    Hidden layers use ``activation``; the output layer is affine.
    """

    kind = "learned"

    def __init__(self, d_U: int, hidden=(100, 100), activation: str = "relu", dim: int = 1):
        self.d_U = d_U
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.dim = dim

    @property
    def widths(self) -> list[int]:
        return [self.dim, *self.hidden, self.d_U]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        w = self.widths
        for i in range(len(w) - 1):
            shapes[f"basis.w{i}"] = (w[i + 1], w[i])
            shapes[f"basis.b{i}"] = (w[i + 1],)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.param_shapes().items():
            # weights and biases share the fan-in bound, as in torch.nn.Linear
            fan_in = shape[1] if len(shape) == 2 else self.widths[int(name[-1])]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return params

    def basis(self, ops, params: dict, x):
        h = ops.constant(_as_points(x, self.dim))
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = ops.add(ops.matvec(params[f"basis.w{i}"], h), params[f"basis.b{i}"])
            if i < n_layers - 1:
                h = ops.activation(self.activation, h)
        return h

    def basis_values(self, x, params: dict | None = None) -> np.ndarray:
        if params is None:
            raise ValueError("a learned basis needs its parameters")
        return self.basis(Eager(), params, x)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d_U": self.d_U,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "dim": self.dim,
        }


def decoder_from_dict(spec: dict, fem_axes=None) -> Decoder:
    kind = spec["kind"]
    if kind == "fourier":
        return FourierDecoder(spec["d_U"])
    if kind == "learned":
        return LearnedBasis(
            spec["d_U"], spec.get("hidden", (100, 100)), spec.get("activation", "relu"), spec.get("dim", 1)
        )
    if kind == "fem_p1":
        if fem_axes is None:
            raise ValueError("fem_p1 decoder needs node axes")
        return FemP1Decoder(fem_axes, periodic=spec.get("periodic", False))
    raise ValueError(f"unknown decoder kind {kind!r}")


# -- generalized inverses and consistency errors ---------------------------


@dataclass
class PseudoInverseReport:
    identity_error: float
    reproduction_error: float
    tol: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def pseudo_inverse_check(
    enc: SensorEncoder, dec: FemP1Decoder, tol: float = 1e-12, n_eval: int = 2001
) -> PseudoInverseReport:
    """Check ``E(D(e_j)) = e_j`` (nodal duality) and ``D E D = D``.

    ``M[i, j] = alpha_j(x_i)`` must be the identity; the reproduction check
    decodes ``M e_j`` again and compares with ``alpha_j`` on a dense grid.
    """
    if enc.d_V != dec.d_U:
        return PseudoInverseReport(np.inf, np.inf, tol, [f"d_V={enc.d_V} != d_U={dec.d_U}"])
    m = dec.basis_values(enc.sensors)
    identity_error = float(np.abs(m - np.eye(dec.d_U)).max())
    if dec.dim == 1:
        x_eval = np.linspace(0.0, 1.0, n_eval)
    else:
        side = int(np.sqrt(n_eval))
        ax = np.linspace(0.0, 1.0, side, endpoint=not dec.periodic)
        x_eval = tensor_points(ax, ax)
    b = dec.basis_values(x_eval)
    reproduction_error = float(np.abs(b @ m - b).max())
    violations = []
    if identity_error > tol:
        off = np.argwhere(np.abs(m - np.eye(dec.d_U)) > tol)
        i, j = off[0]
        violations.append(f"alpha_{j}(x_{i}) = {m[i, j]!r}, expected {float(i == j)}")
    if reproduction_error > tol:
        violations.append(f"D(E(D(e_j))) differs from D(e_j) by {reproduction_error:.3e}")
    return PseudoInverseReport(identity_error, reproduction_error, tol, violations)


def fem_pair(n_cells: int, dim: int = 1, periodic: bool = False):
    """Nodal encoder and hat-function decoder on the same uniform mesh h = 1/n_cells."""
    if dim == 1:
        nodes = periodic_grid(n_cells) if periodic else uniform_grid(n_cells + 1)
        return SensorEncoder(nodes, periodic=periodic), FemP1Decoder(nodes, periodic=periodic)
    ax = periodic_grid(n_cells) if periodic else uniform_grid(n_cells + 1)
    enc = SensorEncoder(tensor_points(ax, ax), periodic=periodic)
    return enc, FemP1Decoder((ax, ax), periodic=periodic)


def roundtrip_error(v: Callable, n_cells: int, dim: int = 1, refine: int = 16) -> float:
    """Max-norm of ``D(E(v)) - v`` for the nodal/hat pair with h = 1/n_cells.

    The max is taken over ``refine`` evaluation points per cell per axis
    (``refine`` even, so cell midpoints are included).
    """
    enc, dec = fem_pair(n_cells, dim)
    coeffs = enc.encode(v)
    ax = np.linspace(0.0, 1.0, n_cells * refine + 1)
    if dim == 1:
        approx = dec.basis_matrix(ax) @ coeffs
        return float(np.abs(approx - v(ax)).max())
    pts = tensor_points(ax, ax)
    approx = dec.basis_matrix(pts) @ coeffs
    return float(np.abs(approx - v(pts[:, 0], pts[:, 1])).max())


def function_class(name: str, alpha: float = 0.5) -> list[Callable]:
    """Representative 1D members of a regularity class on [0, 1]."""
    if name in ("holder", "holder_alpha"):
        return [lambda x: np.abs(x - 0.5) ** alpha]
    if name == "c1":
        # C^1 but not C^2 at x = 1/2, plus smooth sinusoids
        return [
            lambda x: np.abs(x - 0.5) ** 1.5,
            lambda x: np.sin(2.0 * np.pi * x),
        ]
    if name == "c2":
        return [lambda x: np.sin(2.0 * np.pi * x), lambda x: np.cos(2.0 * np.pi * x)]
    raise ValueError(f"unknown function class {name!r}")


@dataclass
class ConsistencyReport:
    function_class: str
    alpha: float | None
    h: list[float]
    d1: list[float]
    d2: list[float]
    order_d1: float
    order_d2: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fitted_order(h, err) -> float:
    """Least-squares slope of log(err) against log(h)."""
    slope, _ = np.polyfit(np.log(np.asarray(h)), np.log(np.asarray(err)), 1)
    return float(slope)


def geometric_levels(n_levels: int, coarsest_cells: int = 4) -> list[float]:
    return [1.0 / (coarsest_cells * 2**i) for i in range(n_levels)]


def consistency_study(name: str, levels, alpha: float = 0.5) -> ConsistencyReport:
    """Empirical decay rates of the two consistency errors.

    ``d1`` is the round trip of the input-side pair on 1D class members;
    ``d2`` the round trip of the output-side Q1 pair on the 2D products
    ``v(x1) v(x2)`` of class members. Both take the sup over the class.
    """
    levels = [float(h) for h in levels]
    if len(levels) < 3:
        raise InsufficientLevelsError(f"need at least 3 mesh levels, got {len(levels)}")
    if any(b >= a for a, b in zip(levels, levels[1:])):
        raise ValueError("mesh sizes must be strictly decreasing")
    ratios = np.array(levels[:-1]) / np.array(levels[1:])
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ValueError("mesh sizes must form a geometric sequence")
    cells = [round(1.0 / h) for h in levels]
    if any(abs(c * h - 1.0) > 1e-9 for c, h in zip(cells, levels)):
        raise ValueError("each mesh size must be 1/N for an integer N")
    members = function_class(name, alpha)
    d1 = [max(roundtrip_error(v, n) for v in members) for n in cells]
    d2 = [
        max(roundtrip_error(lambda x1, x2, v=v: v(x1) * v(x2), n, dim=2, refine=8) for v in members)
        for n in cells
    ]
    return ConsistencyReport(
        function_class=name,
        alpha=alpha if name in ("holder", "holder_alpha") else None,
        h=levels,
        d1=d1,
        d2=d2,
        order_d1=fitted_order(levels, d1),
        order_d2=fitted_order(levels, d2),
    )
