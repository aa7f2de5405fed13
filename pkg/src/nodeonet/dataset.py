"""Problem families, dataset generation and dataset (de)serialization."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .encoders import Field, SensorEncoder
from .errors import ContainerFormatError, DivergedError
from .grids import apply_rows, interpolation_matrix_2d, periodic_grid, tensor_points, uniform_grid
from .pde import ns_stable_dt, solve_diffusion_reaction_batch, solve_navier_stokes_batch
from .random_fields import (
    FORCE_SPEC,
    U0_SPEC,
    RbfKernelSpec,
    SpectralGrfSpec,
    derive_diffusion_input,
    gp_cholesky,
    sample_gp_1d,
    sample_grf_2d,
    sample_rng,
)

FAMILIES = ("dr-source", "dr-diffusion", "dr-multi", "ns-initial", "ns-source", "ns-multi")

# roles the matching NODE variant consumes; every role is stored for every sample
FAMILY_ROLES = {
    "dr-source": ("f",),
    "dr-diffusion": ("D", "f"),
    "dr-multi": ("D", "f"),
    "ns-initial": ("f", "u0"),
    "ns-source": ("f", "u0"),
    "ns-multi": ("f", "u0"),
}

FAMILY_VARIANT = {
    "dr-source": "source",
    "dr-diffusion": "diffusion",
    "dr-multi": "multi",
    "ns-initial": "ns",
    "ns-source": "ns",
    "ns-multi": "ns",
}

# samples solved together; fixed so results never depend on the thread count
CHUNK = 25


def _dr_defaults(family: str) -> dict:
    return {
        "dr-source": {"D": 0.01, "R": -0.01, "length_scale": 0.5},
        "dr-diffusion": {"R": -0.01, "length_scale": 0.5},
        "dr-multi": {"R": -0.01, "length_scale": 0.2},
    }[family]


@dataclass
class GenSettings:
    """Everything that determines a dataset besides the sample counts and seed."""

    family: str
    nx: int | None = None
    nt: int | None = None
    nx_test: int | None = None
    nt_test: int | None = None
    T: float | None = None
    length_scale: float | None = None
    D: float | None = None
    R: float | None = None
    n_fine_x: int = 1001
    dt: float | None = None
    grid_n: int = 64
    nu: float = 1e-3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown problem family {self.family!r}; expected one of {FAMILIES}")
        defaults = (self.grid_n // 2, 10, self.grid_n // 2, 10) if self.is_ns else (10, 5, 100, 100)
        for name, value in zip(("nx", "nt", "nx_test", "nt_test"), defaults):
            if getattr(self, name) is None:
                setattr(self, name, value)
        if self.is_ns:
            self.T = 10.0 if self.T is None else float(self.T)
            self.dt = 5e-3 if self.dt is None else float(self.dt)
            if self.grid_n % self.nx or self.grid_n % self.nx_test:
                raise ValueError("NS label grids must divide the generation grid")
        else:
            d = _dr_defaults(self.family)
            self.T = 1.0 if self.T is None else float(self.T)
            self.dt = 1e-4 if self.dt is None else float(self.dt)
            self.length_scale = d["length_scale"] if self.length_scale is None else float(self.length_scale)
            self.R = d["R"] if self.R is None else float(self.R)
            if self.family == "dr-source":
                self.D = d["D"] if self.D is None else float(self.D)
        for name in ("nx", "nt", "nx_test", "nt_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def is_ns(self) -> bool:
        return self.family.startswith("ns")

    @property
    def roles(self) -> tuple[str, ...]:
        return FAMILY_ROLES[self.family]

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class Split:
    inputs: dict[str, np.ndarray]  # role -> (N, n_input_points)
    labels: np.ndarray  # (N, n_t, n_x)
    times: np.ndarray
    x: np.ndarray  # (n_x,) or (n_x, 2)

    @property
    def n(self) -> int:
        return self.labels.shape[0]


@dataclass
class Dataset:
    settings: GenSettings
    input_axes: tuple
    train: Split
    test: Split
    meta: dict = field(default_factory=dict)

    @property
    def family(self) -> str:
        return self.settings.family

    @property
    def periodic(self) -> bool:
        return self.settings.is_ns

    @property
    def T(self) -> float:
        return self.settings.T

    def split(self, name: str) -> Split:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def encode(self, split: str | Split, encoder: SensorEncoder) -> dict[str, np.ndarray]:
        s = self.split(split) if isinstance(split, str) else split
        mat = encoder.sampling_matrix(self.input_axes, self.periodic)
        return {role: apply_rows(mat, v) for role, v in s.inputs.items()}


# -- input sampling ------------------------------------------------------------


def fine_axes(settings: GenSettings) -> tuple:
    if settings.is_ns:
        ax = periodic_grid(settings.grid_n)
        return (ax, ax)
    return (uniform_grid(settings.n_fine_x),)


def ns_fixed_field(n: int) -> np.ndarray:
    """``0.1 sin(2 pi (x1 + x2)) + 0.1 cos(2 pi (x1 + x2))`` on the periodic grid."""
    ax = periodic_grid(n)
    x1, x2 = np.meshgrid(ax, ax, indexing="ij")
    s = 2.0 * np.pi * (x1 + x2)
    return 0.1 * np.sin(s) + 0.1 * np.cos(s)


def sample_inputs(settings: GenSettings, n: int, seed: int, split: str) -> dict[str, np.ndarray]:
    """Input functions on the generation grid, role -> ``(n, n_points)``."""
    fam = settings.family
    if settings.is_ns:
        g = settings.grid_n
        u0_spec = SpectralGrfSpec(**U0_SPEC, grid_n=g)
        f_spec = SpectralGrfSpec(**FORCE_SPEC, grid_n=g)
        fixed = ns_fixed_field(g).ravel()
        out = {"f": np.empty((n, g * g)), "u0": np.empty((n, g * g))}
        for i in range(n):
            rng = sample_rng(seed, split, i)
            out["u0"][i] = sample_grf_2d(u0_spec, rng).ravel() if fam in ("ns-initial", "ns-multi") else fixed
            out["f"][i] = sample_grf_2d(f_spec, rng).ravel() if fam in ("ns-source", "ns-multi") else fixed
        return out
    x = uniform_grid(settings.n_fine_x)
    chol = gp_cholesky(RbfKernelSpec(settings.length_scale), x)
    out = {role: np.empty((n, x.size)) for role in settings.roles}
    for i in range(n):
        rng = sample_rng(seed, split, i)
        if fam == "dr-source":
            out["f"][i] = sample_gp_1d(None, x, rng, chol=chol)
        elif fam == "dr-diffusion":
            out["D"][i] = derive_diffusion_input(sample_gp_1d(None, x, rng, chol=chol))
            out["f"][i] = np.sin(2.0 * np.pi * x)
        else:
            out["D"][i] = derive_diffusion_input(sample_gp_1d(None, x, rng, chol=chol))
            out["f"][i] = sample_gp_1d(None, x, rng, chol=chol)
    return out


# -- labels ----------------------------------------------------------------------


def label_points(settings: GenSettings, nx: int) -> np.ndarray:
    if settings.is_ns:
        ax = periodic_grid(nx)
        return tensor_points(ax, ax)
    return uniform_grid(nx)


def label_times(T: float, nt: int) -> np.ndarray:
    """``T k / nt`` for ``k = 1..nt``; t = 0 is the (known) initial state."""
    return np.array([T * k / nt for k in range(1, nt + 1)])


def ns_dt(settings: GenSettings, u0, f, T: float) -> float:
    bound = ns_stable_dt(u0, f, settings.nu, settings.grid_n, horizon=T)
    return min(settings.dt, bound)


def _solve_chunk(settings: GenSettings, inputs: dict, T: float, nt: int, x, dt: float) -> np.ndarray:
    n = next(iter(inputs.values())).shape[0]
    if settings.is_ns:
        g = settings.grid_n
        snap = solve_navier_stokes_batch(
            inputs["u0"].reshape(n, g, g), inputs["f"].reshape(n, g, g), settings.nu, T, nt, dt
        )
        ax = periodic_grid(g)
        restrict = interpolation_matrix_2d(ax, ax, x, periodic=True)
        return apply_rows(restrict, snap.values[:, 1:])
    D = inputs["D"] if "D" in inputs else settings.D
    snap = solve_diffusion_reaction_batch(
        D, settings.R, inputs["f"], n, T=T, n_out=nt, out_x=x, n_fine_x=settings.n_fine_x, dt=dt
    )
    return snap.values[:, 1:]


def solve_labels(
    settings: GenSettings, inputs: dict, T: float, nt: int, x, threads: int = 1, dt: float | None = None
) -> np.ndarray:
    """Reference solutions ``(N, nt, n_x)`` at ``label_times(T, nt)`` and points ``x``.

    Samples are solved in fixed chunks of :data:`CHUNK`; ``threads`` only
    changes how many chunks run at once.
    """
    n = next(iter(inputs.values())).shape[0]
    if n == 0:
        return np.zeros((0, nt, len(x)))
    if dt is None:
        dt = ns_dt(settings, inputs["u0"], inputs["f"], T) if settings.is_ns else settings.dt
    starts = list(range(0, n, CHUNK))

    def run(start):
        chunk = {k: v[start:start + CHUNK] for k, v in inputs.items()}
        try:
            return _solve_chunk(settings, chunk, T, nt, x, dt)
        except DivergedError as exc:
            raise DivergedError(f"sample chunk starting at {start}: {exc}", step=exc.step) from exc

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def build_dataset(settings: GenSettings, n_train: int, n_test: int, seed: int, threads: int = 1) -> Dataset:
    if n_train < 0 or n_test < 0:
        raise ValueError("sample counts must be non-negative")
    if n_train + n_test == 0:
        raise ValueError("dataset needs at least one sample")
    axes = fine_axes(settings)
    T = settings.T
    splits = {}
    dts = {}
    for name, n, nx, nt in (
        ("train", n_train, settings.nx, settings.nt),
        ("test", n_test, settings.nx_test, settings.nt_test),
    ):
        inputs = sample_inputs(settings, n, seed, name)
        x = label_points(settings, nx)
        dt = None
        if settings.is_ns and n:
            dt = ns_dt(settings, inputs["u0"], inputs["f"], T)
            dts[name] = dt
        labels = solve_labels(settings, inputs, T, nt, x, threads=threads, dt=dt)
        splits[name] = Split(inputs, labels, label_times(T, nt), x)
    meta = {"seed": int(seed), "n_train": n_train, "n_test": n_test}
    if dts:
        meta["ns_dt"] = dts
    return Dataset(settings, axes, splits["train"], splits["test"], meta)


# -- serialization -------------------------------------------------------------------


def dataset_arrays(ds: Dataset) -> dict[str, np.ndarray]:
    arrays = {f"axis{i}": a for i, a in enumerate(ds.input_axes)}
    for name in ("train", "test"):
        s = ds.split(name)
        arrays[f"{name}/labels"] = s.labels
        arrays[f"{name}/times"] = s.times
        arrays[f"{name}/x"] = s.x
        for role, v in s.inputs.items():
            arrays[f"{name}/inputs/{role}"] = v
    return arrays


def save_dataset(ds: Dataset, path) -> None:
    meta = {"kind": "dataset", "settings": ds.settings.to_dict(), "provenance": ds.meta}
    write_container(path, dataset_arrays(ds), meta)


def load_dataset(path) -> Dataset:
    arrays, meta = read_container(path)
    if meta.get("kind") != "dataset":
        raise ContainerFormatError(f"{path} is not a dataset container")
    try:
        settings = GenSettings(**meta["settings"])
        axes = tuple(arrays[f"axis{i}"] for i in range(2 if settings.is_ns else 1))
        splits = {}
        for name in ("train", "test"):
            prefix = f"{name}/inputs/"
            inputs = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            splits[name] = Split(inputs, arrays[f"{name}/labels"], arrays[f"{name}/times"], arrays[f"{name}/x"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerFormatError(f"dataset container is incomplete: {exc}") from exc
    return Dataset(settings, axes, splits["train"], splits["test"], meta.get("provenance", {}))


def input_field(ds: Dataset, split: str, role: str) -> Field:
    return Field(ds.split(split).inputs[role], ds.input_axes, ds.periodic)

