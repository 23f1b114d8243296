"""Patch geometry: cubic patch offsets, the local search neighborhood, and
the correspondence search that picks each atlas's best-matching displacement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class PatchSpec:
    """Cubic patch of radius patch_radius, search window of radius
    search_radius; side lengths 2r+1."""

    patch_radius: int = 2
    search_radius: int = 3

    def __post_init__(self):
        if self.patch_radius < 0:
            raise GeometryError(f"patch_radius must be >= 0, got {self.patch_radius}")
        if self.search_radius < 0:
            raise GeometryError(f"search_radius must be >= 0, got {self.search_radius}")

    @property
    def patch_size(self) -> int:
        side = 2 * self.patch_radius + 1
        return side ** 3

    @property
    def search_size(self) -> int:
        side = 2 * self.search_radius + 1
        return side ** 3


def patch_offsets(radius: int) -> np.ndarray:
    """(s**3, 3) int offsets of a cubic patch, ordered by (z, y, x)
    ascending. Row order is the accumulation order everywhere, so both
    compute backends see bit-identical floating point sums.
    """
    if radius < 0:
        raise GeometryError(f"radius must be >= 0, got {radius}")
    rng = np.arange(-radius, radius + 1)
    z, y, x = np.meshgrid(rng, rng, rng, indexing="ij")
    out = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    return np.ascontiguousarray(out, dtype=np.intp)


def displacement_candidates(radius: int) -> np.ndarray:
    """(s**3, 3) candidate displacements for the correspondence search,
    sorted by squared length then (z, y, x); ties in the search resolve to
    the earliest row, so the zero displacement wins when nothing is
    strictly better.
    """
    cands = patch_offsets(radius)
    dist2 = (cands ** 2).sum(axis=1)
    order = np.lexsort((cands[:, 0], cands[:, 1], cands[:, 2], dist2))
    return np.ascontiguousarray(cands[order])


def clamp_index(idx: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Clamp (..., 3) voxel indices to the volume bounds axis by axis
    (replication padding at the faces)."""
    upper = np.asarray(dims, dtype=np.intp) - 1
    return np.clip(idx, 0, upper)


def extract_patch(data: np.ndarray, center, offsets: np.ndarray) -> np.ndarray:
    """Patch values around center in offset order, replication-padded."""
    idx = clamp_index(np.asarray(center, dtype=np.intp) + offsets, data.shape)
    return data[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.float64)


def patch_dissimilarity(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of absolute differences between two equal-length patch vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"patch shapes differ: {a.shape} vs {b.shape}")
    total = 0.0
    for p in range(a.shape[0]):
        total += abs(a[p] - b[p])
    return total


def search_correspondence(target: np.ndarray, atlas: np.ndarray, center,
                          spec: PatchSpec) -> tuple[np.ndarray, float]:
    """Best displacement for one atlas at one voxel.

    Compares the target patch at center with atlas patches shifted by each
    candidate displacement; atlas samples clamp once at x + p + d. Returns
    (displacement, dissimilarity); first minimal candidate wins.
    """
    offsets = patch_offsets(spec.patch_radius)
    cands = displacement_candidates(spec.search_radius)
    center = np.asarray(center, dtype=np.intp)
    t_patch = extract_patch(target, center, offsets)
    best = None
    best_cost = np.inf
    for d in cands:
        a_patch = extract_patch(atlas, center + d, offsets)
        cost = patch_dissimilarity(t_patch, a_patch)
        if cost < best_cost:
            best_cost = cost
            best = d
    return np.asarray(best, dtype=np.intp), float(best_cost)
