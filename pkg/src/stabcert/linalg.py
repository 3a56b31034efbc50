"""Spectral (Euclidean operator) norm."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["matrix_norm", "vector_norm"]


def vector_norm(x) -> float:
    return math.sqrt(float(np.dot(x, x)))


def _norm2x2(a: float, b: float, c: float, d: float) -> float:
    # sigma_max = (|(a+d, c-b)| + |(a-d, b+c)|) / 2, no cancellation
    return 0.5 * (math.hypot(a + d, c - b) + math.hypot(a - d, b + c))


def _jacobi_sigma_max(m: np.ndarray, rtol: float = 1e-12, max_sweeps: int = 60) -> float:
    """Largest singular value by one-sided cyclic Jacobi rotations on columns."""
    u = np.array(m, dtype=float, copy=True)
    n = u.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = float(u[:, p] @ u[:, p])
                beta = float(u[:, q] @ u[:, q])
                gamma = float(u[:, p] @ u[:, q])
                if gamma == 0.0 or abs(gamma) <= rtol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / math.sqrt(1.0 + t * t)
                sn = cs * t
                up = u[:, p].copy()
                u[:, p] = cs * up - sn * u[:, q]
                u[:, q] = sn * up + cs * u[:, q]
        if not rotated:
            break
    return float(np.sqrt((u * u).sum(axis=0)).max())


def matrix_norm(m) -> float:
    """Spectral norm of a square matrix.

    Closed form for n <= 2, one-sided Jacobi SVD otherwise (relative accuracy
    about 1e-12).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    n = m.shape[0]
    if n == 0:
        return 0.0
    if n == 1:
        return abs(float(m[0, 0]))
    if n == 2:
        return _norm2x2(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]))
    return _jacobi_sigma_max(m)
