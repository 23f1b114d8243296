"""Constrained quadratic weight solve: minimize w'(M + alpha*I)w subject to
sum(w) = 1. The closed form is w = (M + alpha*I)^-1 1 / (1'(M + alpha*I)^-1 1);
weights may be negative, only the sum is constrained."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lstsq

from .errors import DegenerateMatrixError

# Relative floor under which 1'(M+aI)^-1 1 counts as zero.
_SUM_FLOOR = 1e-300


@dataclass(frozen=True)
class WeightVector:
    """Fusion weights for one voxel; multiplier is the constraint's
    Lagrange multiplier lambda = 1 / (1'(M+aI)^-1 1)."""

    weights: np.ndarray
    voxel: tuple | None = None
    time: int | None = None
    multiplier: float = 0.0
    used_fallback: bool = False

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))


def _entries(matrix) -> np.ndarray:
    entries = getattr(matrix, "entries", matrix)
    return np.asarray(entries, dtype=np.float64)


def solve_weights(matrix, alpha: float = 0.1) -> WeightVector:
    """Solve the sum-to-one quadratic for one voxel's dependency matrix.

    matrix is a square symmetric array or a DependencyMatrix. With
    alpha > 0 the regularized system is positive definite whenever M is
    PSD, and a failed factorization falls back to least squares. With
    alpha = 0 a singular system is an error: callers must regularize.
    """
    m = _entries(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DegenerateMatrixError(f"dependency matrix must be square, got {m.shape}")
    if alpha < 0:
        raise DegenerateMatrixError(f"alpha must be >= 0, got {alpha}")
    size = m.shape[0]
    reg = m + alpha * np.eye(size)
    ones = np.ones(size)
    used_fallback = False
    try:
        z = cho_solve(cho_factor(reg, lower=True), ones)
    except np.linalg.LinAlgError as exc:
        if alpha == 0.0:
            raise DegenerateMatrixError(
                "dependency matrix is singular with alpha=0; "
                "set alpha > 0 to regularize") from exc
        z, *_ = lstsq(reg, ones)
        used_fallback = True
    total = float(z.sum())
    if abs(total) < _SUM_FLOOR or not np.isfinite(total):
        raise DegenerateMatrixError(
            f"weight normalizer 1'(M+aI)^-1 1 = {total!r} is degenerate")
    return WeightVector(z / total,
                        voxel=getattr(matrix, "voxel", None),
                        time=getattr(matrix, "time", None),
                        multiplier=1.0 / total,
                        used_fallback=used_fallback)


def solve_weights_batch(matrices: np.ndarray, alpha: float = 0.1
                        ) -> tuple[np.ndarray, int]:
    """Solve a (N, m, m) stack voxel by voxel.

    Returns (weights (N, m), fallback_count). Kept as a plain loop over
    solve_weights so batch results are bitwise equal to single solves.
    """
    matrices = np.asarray(matrices, dtype=np.float64)
    out = np.empty(matrices.shape[:2])
    fallbacks = 0
    for i in range(matrices.shape[0]):
        wv = solve_weights(matrices[i], alpha)
        out[i] = wv.weights
        fallbacks += wv.used_fallback
    return out, fallbacks


def kkt_residual(matrix, wv: WeightVector, alpha: float) -> float:
    """inf-norm of (M + alpha*I) w - lambda * 1 at the solution."""
    m = _entries(matrix)
    reg = m + alpha * np.eye(m.shape[0])
    return float(np.abs(reg @ wv.weights - wv.multiplier).max())


def verify_optimality(matrix, alpha: float, wv, trials: int = 1000,
                      step: float = 1e-3,
                      rng: np.random.Generator | None = None) -> bool:
    """Brute-force optimality oracle for the constrained minimum.

    Samples unit directions d with sum(d) = 0 and checks that every
    feasible step w + step*d does not lower the energy w'(M+aI)w by more
    than 1e-12. Valid because the energy is convex for PSD M, alpha >= 0.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    m = _entries(matrix)
    reg = m + alpha * np.eye(m.shape[0])
    w = np.asarray(getattr(wv, "weights", wv), dtype=np.float64)
    base = float(w @ reg @ w)
    dirs = rng.standard_normal((trials, m.shape[0]))
    dirs -= dirs.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(dirs, axis=1)
    dirs = dirs[norms > 0.0] / norms[norms > 0.0, None]
    cands = w + step * dirs
    energies = np.einsum("ti,ij,tj->t", cands, reg, cands)
    return bool((energies >= base - 1e-12).all())
