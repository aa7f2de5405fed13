"""Random input functions: 1D squared-exponential Gaussian processes and 2D
periodic Gaussian random fields with covariance ``scale^2 (-Lap + tau_sq)^(-power)``.

Every sample draws from its own Philox stream keyed by ``(seed, split,
index)``, so sample ``i`` does not depend on how many samples precede it or
on how the work is split across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import BadGridError, NotPositiveDefiniteError

JITTER_LADDER = (1e-12, 1e-11, 1e-10, 1e-9, 1e-8)
SPLITS = {"train": 0, "test": 1, "extra": 2}


def sample_rng(seed: int, split: str | int = 0, index: int = 0) -> np.random.Generator:
    """Independent counter-based generator for one sample."""
    split_id = SPLITS[split] if isinstance(split, str) else int(split)
    ss = np.random.SeedSequence(int(seed), spawn_key=(split_id, int(index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class RbfKernelSpec:
    length_scale: float
    variance: float = 1.0

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.variance <= 0:
            raise ValueError("variance must be positive")


def rbf_kernel(spec: RbfKernelSpec, x1, x2) -> np.ndarray:
    d = np.subtract.outer(np.asarray(x1, float), np.asarray(x2, float))
    return spec.variance * np.exp(-(d * d) / (2.0 * spec.length_scale**2))


def gp_cholesky(spec: RbfKernelSpec, grid) -> np.ndarray:
    """Lower Cholesky factor of the kernel matrix, with the smallest jitter that works."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise BadGridError("GP grid must be 1D and strictly increasing")
    if grid.size > 2048:
        raise BadGridError(f"dense Cholesky limited to 2048 points, got {grid.size}")
    k = rbf_kernel(spec, grid, grid)
    k = 0.5 * (k + k.T)
    eye = np.eye(grid.size)
    for jitter in JITTER_LADDER:
        try:
            return scipy.linalg.cholesky(k + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefiniteError(
        f"kernel matrix not positive definite with jitter up to {JITTER_LADDER[-1]}"
    )


def sample_gp_1d(spec: RbfKernelSpec, grid, rng: np.random.Generator, chol=None) -> np.ndarray:
    """One zero-mean GP sample on ``grid``; pass a cached ``chol`` to skip the factorization."""
    chol = gp_cholesky(spec, grid) if chol is None else chol
    return chol @ rng.standard_normal(chol.shape[0])


@dataclass(frozen=True)
class SpectralGrfSpec:
    scale: float
    tau_sq: float
    power: float
    grid_n: int
    zero_mean: bool = True

    def __post_init__(self):
        if self.grid_n < 4 or self.grid_n % 2:
            raise BadGridError(f"grid_n must be even and >= 4, got {self.grid_n}")
        if self.power <= 1:
            raise ValueError("power must exceed 1 for a summable 2D spectrum")
        if self.scale <= 0 or self.tau_sq <= 0:
            raise ValueError("scale and tau_sq must be positive")


# covariances of the vorticity benchmark inputs
U0_SPEC = dict(scale=7.0**1.5, tau_sq=49.0, power=2.5)
FORCE_SPEC = dict(scale=3.0**1.5, tau_sq=49.0, power=5.0)


def wavenumbers(n: int) -> np.ndarray:
    return np.fft.fftfreq(n, d=1.0 / n)


def spectral_amplitude(spec: SpectralGrfSpec) -> np.ndarray:
    """Per-mode standard deviation ``scale (4 pi^2 |k|^2 + tau_sq)^(-power/2)``."""
    k = wavenumbers(spec.grid_n)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    amp = spec.scale * (4.0 * np.pi**2 * (k1**2 + k2**2) + spec.tau_sq) ** (-spec.power / 2.0)
    if spec.zero_mean:
        amp[0, 0] = 0.0
    return amp


def sample_grf_2d(spec: SpectralGrfSpec, rng: np.random.Generator) -> np.ndarray:
    """One real periodic field on the ``grid_n x grid_n`` grid ``(j/n, k/n)``.

    Complex normal mode coefficients are symmetrized,
    ``c_k = amp_k (xi_k + conj(xi_{-k})) / sqrt(2)``, which makes the field
    real while keeping ``E|c_k|^2 = amp_k^2`` on generic modes. The field
    is ``sum_k c_k exp(2 pi i k.x)``.
    """
    n = spec.grid_n
    amp = spectral_amplitude(spec)
    xi = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    flipped = np.conj(np.roll(xi[::-1, ::-1], 1, axis=(0, 1)))  # xi at -k
    coeffs = amp * (xi + flipped) / np.sqrt(2.0)
    field = np.fft.ifft2(coeffs) * (n * n)
    residue = np.abs(field.imag).max()
    if residue > 1e-10 * max(1.0, np.abs(field.real).max()):
        raise ArithmeticError(f"imaginary residue {residue:.3e} after inverse FFT")
    return np.ascontiguousarray(field.real)


def derive_diffusion_input(g) -> np.ndarray:
    """``0.01 (|g| + 1)``: a strictly positive diffusion coefficient from a GP sample."""
    return 0.01 * (np.abs(np.asarray(g, dtype=float)) + 1.0)
