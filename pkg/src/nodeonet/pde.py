"""Reference solvers that produce training and test labels.

* 1D diffusion-reaction ``u_t - (D u_x)_x + R u^2 = f`` on [0, 1] with
  homogeneous Dirichlet boundaries: conservative flux-form central
  differences, Crank-Nicolson diffusion, second-order Adams-Bashforth
  reaction (Euler on the first step), trapezoidal source.
* 2D vorticity Navier-Stokes on the unit torus: pseudo-spectral, 2/3-rule
  dealiasing, Crank-Nicolson viscosity, Adams-Bashforth advection + forcing.

Both integrate a whole batch of samples at once; every sample evolves
independently, so results do not depend on the batch composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BadGridError, DivergedError
from .grids import apply_rows, interpolation_matrix, uniform_grid

BLOWUP = 1e6


@dataclass
class SolutionSnapshot:
    times: np.ndarray
    values: np.ndarray  # (N, n_times, n_points) or (n_times, n_points) for one problem
    info: dict = field(default_factory=dict)


def snapshot_step_count(T: float, dt: float, n_out: int) -> int:
    """Smallest multiple of ``n_out`` giving a step no larger than ``dt``."""
    per = math.ceil(T / (dt * n_out) - 1e-9)
    return n_out * max(per, 1)


# -- 1D diffusion-reaction ---------------------------------------------------


@dataclass
class DiffusionReactionProblem:
    """Inputs on the fine grid; ``D`` and ``f`` may also be scalars, ``f`` a callable ``f(t, x)``."""

    D: float | np.ndarray
    R: float
    f: float | np.ndarray | Callable
    u0: np.ndarray | None = None
    T: float = 1.0


def _half_node_diffusion(D, n_samples: int, n: int) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim == 0:
        D = np.full((n_samples, n), float(D))
    if np.any(D < 0):
        raise ValueError("diffusion coefficient must be non-negative")
    return 0.5 * (D[:, 1:] + D[:, :-1])  # (N, n - 1), between nodes j and j + 1


def _block_laplacian(dh: np.ndarray, h: float) -> sp.csc_matrix:
    """Block-diagonal interior operator ``(D u_x)_x`` for every sample."""
    n_samples, n_half = dh.shape
    m = n_half - 1  # interior nodes per sample
    left = dh[:, :-1] / h**2  # coupling to node i - 1
    right = dh[:, 1:] / h**2  # coupling to node i + 1
    main = -(left + right)
    lower = left[:, 1:].copy()
    upper = right[:, :-1].copy()
    # no coupling across sample blocks
    pad = np.zeros((n_samples, 1))
    lower = np.concatenate([lower, pad], axis=1).ravel()[:-1]
    upper = np.concatenate([upper, pad], axis=1).ravel()[:-1]
    size = n_samples * m
    return sp.diags([lower, main.ravel(), upper], [-1, 0, 1], shape=(size, size), format="csc")


def solve_diffusion_reaction_batch(
    D,
    R: float,
    f,
    n_samples: int,
    T: float = 1.0,
    n_out: int = 10,
    out_x=None,
    n_fine_x: int = 1001,
    dt: float = 1e-4,
    u0=None,
) -> SolutionSnapshot:
    """Solve for ``n_samples`` problems sharing ``R``.

    ``D``, ``f``, ``u0`` are scalars or ``(N, n_fine_x)`` arrays on
    ``uniform_grid(n_fine_x)``; ``f`` may be a callable ``f(t) -> (N, n_fine_x)``.
    Returns values at ``t_k = T k / n_out`` for ``k = 0..n_out`` interpolated
    linearly onto ``out_x`` (the fine grid by default).
    """
    if n_fine_x < 3:
        raise BadGridError("need at least 3 fine grid points")
    x = uniform_grid(n_fine_x)
    h = 1.0 / (n_fine_x - 1)
    n_steps = snapshot_step_count(T, dt, n_out)
    dt = T / n_steps
    every = n_steps // n_out
    interior = slice(1, n_fine_x - 1)

    lap = _block_laplacian(_half_node_diffusion(D, n_samples, n_fine_x), h)
    eye = sp.identity(lap.shape[0], format="csc")
    implicit = spla.splu((eye - 0.5 * dt * lap).tocsc(), permc_spec="NATURAL")
    explicit = (eye + 0.5 * dt * lap).tocsr()

    def source(t):
        val = f(t) if callable(f) else f
        val = np.broadcast_to(np.asarray(val, dtype=float), (n_samples, n_fine_x))
        return np.ascontiguousarray(val[:, interior]).ravel()

    u = np.zeros((n_samples, n_fine_x)) if u0 is None else np.array(u0, dtype=float, copy=True)
    u = np.broadcast_to(u, (n_samples, n_fine_x)).copy()
    v = u[:, interior].ravel().copy()
    time_dependent = callable(f)
    f_now = source(0.0)
    react_prev = None
    out = [u.copy()]
    for step in range(n_steps):
        t_next = T * (step + 1) / n_steps
        f_next = source(t_next) if time_dependent else f_now
        react = -R * v * v
        if react_prev is None:
            forcing = react
        else:
            forcing = 1.5 * react - 0.5 * react_prev
        rhs = explicit @ v + dt * (0.5 * (f_now + f_next) + forcing)
        v = implicit.solve(rhs)
        react_prev, f_now = react, f_next
        if (step + 1) % every == 0 or (step + 1) % 256 == 0:
            peak = np.abs(v).max()
            if not np.isfinite(peak) or peak > BLOWUP:
                raise DivergedError(f"|u| exceeded {BLOWUP:g} at time step {step + 1}", step=step + 1)
        if (step + 1) % every == 0:
            snap = np.zeros((n_samples, n_fine_x))
            snap[:, interior] = v.reshape(n_samples, -1)
            out.append(snap)
    values = np.stack(out, axis=1)  # (N, n_out + 1, n_fine_x)
    if out_x is not None:
        values = apply_rows(interpolation_matrix(x, np.asarray(out_x, dtype=float)), values)
    times = np.array([T * k / n_out for k in range(n_out + 1)])
    info = {"scheme": "fd-cn-ab2", "n_fine_x": n_fine_x, "dt": dt, "n_steps": n_steps}
    return SolutionSnapshot(times, values, info)


def solve_diffusion_reaction(
    p: DiffusionReactionProblem, n_fine_x: int = 1001, dt: float = 1e-4, n_out: int = 10, out_x=None
) -> SolutionSnapshot:
    """Single-problem wrapper of :func:`solve_diffusion_reaction_batch`."""
    if n_fine_x < 101:
        raise BadGridError(f"fine grid needs at least 101 points, got {n_fine_x}")
    x = uniform_grid(n_fine_x)

    def lift(v):
        if v is None or np.ndim(v) == 0:
            return v
        return np.asarray(v, dtype=float)[None, :]

    f = p.f
    if callable(f):
        f = (lambda t, g=p.f: np.asarray(g(t, x), dtype=float)[None, :])
    else:
        f = lift(f)
    snap = solve_diffusion_reaction_batch(
        lift(p.D), p.R, f, 1, T=p.T, n_out=n_out, out_x=out_x, n_fine_x=n_fine_x, dt=dt, u0=lift(p.u0)
    )
    return SolutionSnapshot(snap.times, snap.values[0], snap.info)


# -- 2D Navier-Stokes ----------------------------------------------------------


@dataclass
class NavierStokesProblem:
    nu: float
    f: np.ndarray  # (n, n) forcing on the periodic grid, or scalar 0
    u0: np.ndarray  # (n, n) initial vorticity
    T: float = 1.0


class SpectralGrid:
    """Wavenumbers and operators for an ``n x n`` periodic grid (real FFT layout)."""

    def __init__(self, n: int):
        if n < 4 or n & (n - 1):
            raise BadGridError(f"grid side must be a power of two >= 4, got {n}")
        self.n = n
        k1 = np.fft.fftfreq(n, d=1.0 / n)
        k2 = np.fft.rfftfreq(n, d=1.0 / n)
        self.k1, self.k2 = np.meshgrid(k1, k2, indexing="ij")
        self.lap = -4.0 * np.pi**2 * (self.k1**2 + self.k2**2)  # symbol of the Laplacian
        inv = np.zeros_like(self.lap)
        nz = self.lap != 0
        inv[nz] = -1.0 / self.lap[nz]
        self.inv_neg_lap = inv  # symbol of (-Lap)^(-1), zero on the mean mode
        cut = n / 3.0
        self.dealias = (np.abs(self.k1) < cut) & (np.abs(self.k2) < cut)

    def fft(self, a):
        return np.fft.rfft2(a, axes=(-2, -1))

    def ifft(self, a):
        return np.fft.irfft2(a, s=(self.n, self.n), axes=(-2, -1))

    def velocity_hat(self, w_hat):
        """Fourier velocity ``(d2 psi, -d1 psi)`` of streamfunction ``psi = (-Lap)^(-1) w``."""
        psi = w_hat * self.inv_neg_lap
        return 2j * np.pi * self.k2 * psi, -2j * np.pi * self.k1 * psi

    def advection_hat(self, w_hat):
        """Dealiased Fourier transform of ``V . grad w``."""
        w_hat = w_hat * self.dealias
        v1, v2 = self.velocity_hat(w_hat)
        dw1 = self.ifft(2j * np.pi * self.k1 * w_hat)
        dw2 = self.ifft(2j * np.pi * self.k2 * w_hat)
        prod = self.ifft(v1) * dw1 + self.ifft(v2) * dw2
        return self.fft(prod) * self.dealias


def velocity_divergence(w, grid: SpectralGrid | None = None) -> float:
    """Max-norm of ``div V`` for the velocity recovered from vorticity ``w``."""
    w = np.asarray(w, dtype=float)
    grid = grid or SpectralGrid(w.shape[-1])
    v1, v2 = grid.velocity_hat(grid.fft(w))
    div = grid.ifft(2j * np.pi * grid.k1 * v1 + 2j * np.pi * grid.k2 * v2)
    return float(np.abs(div).max())


def velocity(w, grid: SpectralGrid | None = None) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=float)
    grid = grid or SpectralGrid(w.shape[-1])
    v1, v2 = grid.velocity_hat(grid.fft(w))
    return grid.ifft(v1), grid.ifft(v2)


def ns_stable_dt(u0, f, nu: float, n: int, cfl: float = 0.5, horizon: float = 1.0) -> float:
    """Advective step bound ``cfl * h / max|V|``.

    The speed bound adds to the initial speed the growth the forcing can
    produce over ``horizon``; viscosity is treated implicitly and does not
    restrict the step.
    """
    grid = SpectralGrid(n)
    u0 = np.atleast_3d(np.asarray(u0, dtype=float).reshape(-1, n, n))
    v1, v2 = velocity(u0, grid)
    speed = np.sqrt(v1**2 + v2**2).max()
    f = np.asarray(f, dtype=float)
    if f.ndim >= 2 and np.any(f):
        g1, g2 = velocity(f.reshape(-1, n, n), grid)
        speed += horizon * np.sqrt(g1**2 + g2**2).max()
    if speed == 0:
        return np.inf
    return cfl / (n * speed)


def solve_navier_stokes_batch(
    u0,
    f,
    nu: float,
    T: float,
    n_out: int,
    dt: float,
    track_enstrophy: bool = False,
) -> SolutionSnapshot:
    """Integrate ``(N, n, n)`` initial vorticities; ``f`` is ``(N, n, n)``, ``(n, n)`` or 0.

    Snapshots at ``t_k = T k / n_out`` for ``k = 0..n_out``, values flattened
    row-major to ``(N, n_out + 1, n * n)``.
    """
    u0 = np.asarray(u0, dtype=float)
    if u0.ndim == 2:
        u0 = u0[None]
    n_samples, n, n2 = u0.shape
    if n != n2:
        raise BadGridError("vorticity grid must be square")
    grid = SpectralGrid(n)
    n_steps = snapshot_step_count(T, dt, n_out)
    dt = T / n_steps
    every = n_steps // n_out

    w_hat = grid.fft(u0)
    mean_mode = w_hat[..., 0, 0].copy()
    f = np.asarray(f, dtype=float)
    f_hat = grid.fft(np.broadcast_to(f, u0.shape)) if f.ndim >= 2 else np.zeros_like(w_hat)
    half = 0.5 * dt * nu * grid.lap
    lhs = 1.0 - half
    rhs_factor = 1.0 + half

    out = [u0.reshape(n_samples, -1).copy()]
    enstrophy = [np.sum(u0**2, axis=(-2, -1))] if track_enstrophy else None
    g_prev = None
    for step in range(n_steps):
        g = f_hat - grid.advection_hat(w_hat)
        explicit = g if g_prev is None else 1.5 * g - 0.5 * g_prev
        w_hat = (rhs_factor * w_hat + dt * explicit) / lhs
        w_hat[..., 0, 0] = mean_mode
        g_prev = g
        snap = (step + 1) % every == 0
        if snap or track_enstrophy:
            w = grid.ifft(w_hat)
            peak = np.abs(w).max()
            if not np.isfinite(peak) or peak > BLOWUP:
                raise DivergedError(f"|w| exceeded {BLOWUP:g} at time step {step + 1}", step=step + 1)
            if track_enstrophy:
                enstrophy.append(np.sum(w**2, axis=(-2, -1)))
            if snap:
                out.append(w.reshape(n_samples, -1))
    times = np.array([T * k / n_out for k in range(n_out + 1)])
    info = {"scheme": "spectral-cn-ab2", "grid_n": n, "dt": dt, "n_steps": n_steps, "nu": nu}
    if track_enstrophy:
        info["enstrophy"] = np.stack(enstrophy, axis=1)
    return SolutionSnapshot(times, np.stack(out, axis=1), info)


def solve_navier_stokes(
    p: NavierStokesProblem, grid_n: int, dt: float, n_out: int = 10, track_enstrophy: bool = False
) -> SolutionSnapshot:
    """Single-problem wrapper; ``u0`` and ``f`` must already live on the ``grid_n`` grid."""
    if grid_n < 32:
        raise BadGridError(f"grid side must be >= 32, got {grid_n}")
    u0 = np.asarray(p.u0, dtype=float)
    if u0.shape != (grid_n, grid_n):
        raise BadGridError(f"u0 has shape {u0.shape}, expected ({grid_n}, {grid_n})")
    bound = ns_stable_dt(u0, p.f, p.nu, grid_n, horizon=p.T)
    if dt > bound:
        raise ValueError(f"dt={dt} exceeds the stability bound {bound:.3e}")
    snap = solve_navier_stokes_batch(u0, p.f, p.nu, p.T, n_out, dt, track_enstrophy)
    info = dict(snap.info)
    if track_enstrophy:
        info["enstrophy"] = info["enstrophy"][0]
    return SolutionSnapshot(snap.times, snap.values[0], info)
