"""Uniform grids and the linear/bilinear interpolation operators used to move
values between them (sensor encoding, label restriction)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import BadGridError, OutOfDomainError

# sensors closer than this (relative to the cell width) to a node snap onto it,
# so nested grids restrict exactly despite linspace rounding
_SNAP = 1e-9


def uniform_grid(n: int) -> np.ndarray:
    """``n`` equispaced points on [0, 1], endpoints included."""
    if n < 1:
        raise BadGridError(f"need at least one point, got {n}")
    if n == 1:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, n)


def periodic_grid(n: int) -> np.ndarray:
    """``n`` equispaced points j/n on the unit torus (0 included, 1 excluded)."""
    if n < 1:
        raise BadGridError(f"need at least one point, got {n}")
    return np.arange(n) / n


def tensor_points(axis1: np.ndarray, axis2: np.ndarray) -> np.ndarray:
    """Row-major ``(len(axis1) * len(axis2), 2)`` list of grid points."""
    x1, x2 = np.meshgrid(axis1, axis2, indexing="ij")
    return np.stack([x1.ravel(), x2.ravel()], axis=1)


def _weights_1d(nodes: np.ndarray, x: np.ndarray, periodic: bool):
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    n = nodes.size
    if periodic:
        h = 1.0 / n
        if np.any(x < -_SNAP) or np.any(x > 1.0 + _SNAP):
            raise OutOfDomainError("points outside the unit torus")
        s = np.mod(x, 1.0) / h
        lo = np.floor(s).astype(int)
        w = s - lo
        snap_hi = w > 1.0 - _SNAP
        lo[snap_hi] += 1
        w[snap_hi] = 0.0
        w[w < _SNAP] = 0.0
        lo %= n
        hi = (lo + 1) % n
        return lo, hi, w
    if n == 1:
        # one node spans the constants on the unit interval
        if np.any(x < -_SNAP) or np.any(x > 1.0 + _SNAP):
            raise OutOfDomainError("points outside [0, 1]")
        z = np.zeros(x.shape, dtype=int)
        return z, z, np.zeros(x.shape)
    tol = _SNAP * (nodes[-1] - nodes[0])
    if np.any(x < nodes[0] - tol) or np.any(x > nodes[-1] + tol):
        raise OutOfDomainError(
            f"points outside [{nodes[0]}, {nodes[-1]}]: min {x.min()}, max {x.max()}"
        )
    lo = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, n - 2)
    width = nodes[lo + 1] - nodes[lo]
    w = (x - nodes[lo]) / width
    w = np.clip(w, 0.0, 1.0)
    snap_hi = w > 1.0 - _SNAP
    move = snap_hi & (lo < n - 2)
    lo = np.where(move, lo + 1, lo)
    w = np.where(move, 0.0, np.where(snap_hi, 1.0, w))
    w = np.where(w < _SNAP, 0.0, w)
    return lo, lo + 1, w


def interpolation_matrix(nodes: np.ndarray, x: np.ndarray, periodic: bool = False) -> sp.csr_matrix:
    """Sparse ``(len(x), len(nodes))`` matrix of piecewise-linear interpolation.

    Rows for points that coincide with a node hold a single exact 1.
    """
    lo, hi, w = _weights_1d(nodes, x, periodic)
    m = len(np.atleast_1d(x))
    rows = np.concatenate([np.arange(m), np.arange(m)])
    cols = np.concatenate([lo, hi])
    vals = np.concatenate([1.0 - w, w])
    keep = vals != 0.0
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(m, len(nodes)))
    return mat.tocsr()


def interpolation_matrix_2d(
    axis1: np.ndarray, axis2: np.ndarray, points: np.ndarray, periodic: bool = True
) -> sp.csr_matrix:
    """Bilinear interpolation from a tensor grid (row-major flattened values)
    onto ``points`` of shape ``(m, 2)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo1, hi1, w1 = _weights_1d(axis1, points[:, 0], periodic)
    lo2, hi2, w2 = _weights_1d(axis2, points[:, 1], periodic)
    n2 = len(axis2)
    m = points.shape[0]
    rows, cols, vals = [], [], []
    for i1, a in ((lo1, 1.0 - w1), (hi1, w1)):
        for i2, b in ((lo2, 1.0 - w2), (hi2, w2)):
            rows.append(np.arange(m))
            cols.append(i1 * n2 + i2)
            vals.append(a * b)
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    keep = vals != 0.0
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(m, len(axis1) * n2))
    return mat.tocsr()


def apply_rows(mat: sp.spmatrix, values: np.ndarray) -> np.ndarray:
    """Apply ``mat`` along the last axis of ``values`` (batched)."""
    values = np.asarray(values, dtype=float)
    lead = values.shape[:-1]
    flat = values.reshape(-1, values.shape[-1])
    out = (mat @ flat.T).T
    return np.ascontiguousarray(out).reshape(*lead, mat.shape[0])
