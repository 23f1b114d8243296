"""Per-voxel dependency matrices for the three fusion modes.

These builders are the readable reference path: one voxel at a time, plain
numpy, every intermediate named. The chunked kernels in backends/ compute
the same quantities in bulk and are tested against this module.

Modes:
  jlf        n x n Gram of target-time residuals over the n same-time atlases
  jlf_multi  m x m Gram of target-time residuals over all atlases
  fourd_jlf  m x m own-time residual Gram, scaled by temporal penalties
             p_i * p_j that inflate the expected error of atlases registered
             to a time point whose target differs from the current one
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .patches import PatchSpec, clamp_index, patch_offsets, search_correspondence
from .volume import AtlasBank, LongitudinalSeries

# Exponent ceiling for the temporal penalty: p <= e^150, so a product
# p_i * p_j <= e^300 stays finite in float64.
E_CAP = 150.0

TARGET_TIME = "target_time"
OWN_TIME = "own_time"


@dataclass(frozen=True)
class DependencyMatrix:
    entries: np.ndarray
    voxel: tuple[int, int, int]
    time: int

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise GeometryError(f"dependency matrix must be square, got {entries.shape}")
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def correspondence(ref: np.ndarray, atlas: np.ndarray, x, spec: PatchSpec) -> np.ndarray:
    d, _ = search_correspondence(ref, atlas, x, spec)
    return d


def residual_vector(ref: np.ndarray, atlas: np.ndarray, x, spec: PatchSpec,
                    disp: np.ndarray) -> np.ndarray:
    """a(y) = |R(y) - I(y + d)| for each y in the patch around x.

    Patch coordinates clamp to the grid first (replication padding), then
    the displaced atlas sample clamps again.
    """
    x = np.asarray(x, dtype=np.intp)
    offsets = patch_offsets(spec.patch_radius)
    y = clamp_index(x + offsets, ref.shape)
    ya = clamp_index(y + np.asarray(disp, dtype=np.intp), atlas.shape)
    r = ref[y[:, 0], y[:, 1], y[:, 2]].astype(np.float64)
    a = atlas[ya[:, 0], ya[:, 1], ya[:, 2]].astype(np.float64)
    return np.abs(r - a)


def _residuals_for(series: LongitudinalSeries, bank: AtlasBank, t: int, x,
                   spec: PatchSpec, against: str) -> np.ndarray:
    """(m', P) residual rows. target_time uses T_t as reference for every
    atlas; own_time uses each atlas's registration target T_q(i)."""
    if against == TARGET_TIME:
        indices = range(bank.m)
        refs = [series.targets[t].data] * bank.m
    elif against == OWN_TIME:
        indices = range(bank.m)
        refs = [series.targets[q].data for q in bank.provenance]
    else:
        raise GeometryError(f"unknown residual reference {against!r}")
    rows = []
    for i, ref in zip(indices, refs):
        img = bank.pairs[i][0].data
        d = correspondence(ref, img, x, spec)
        rows.append(residual_vector(ref, img, x, spec, d))
    return np.asarray(rows)


def gram(residuals: np.ndarray) -> np.ndarray:
    """G(i,j) = sum_p a_i(p) * a_j(p), accumulated over patch positions in
    order so the result is bitwise comparable with the chunked kernels."""
    m, psize = residuals.shape
    g = np.zeros((m, m))
    for p in range(psize):
        col = residuals[:, p]
        g += col[:, None] * col[None, :]
    return g


def build_jlf_matrix(series: LongitudinalSeries, bank: AtlasBank, t: int, x,
                     spec: PatchSpec) -> DependencyMatrix:
    sub = AtlasBank(n=bank.n, k=1, pairs=bank.pairs[bank.block(t)])
    one = LongitudinalSeries((series.targets[t],))
    res = _residuals_for(one, sub, 0, x, spec, TARGET_TIME)
    return DependencyMatrix(gram(res), tuple(x), t)


def build_jlfmulti_matrix(series: LongitudinalSeries, bank: AtlasBank, t: int,
                          x, spec: PatchSpec) -> DependencyMatrix:
    res = _residuals_for(series, bank, t, x, spec, TARGET_TIME)
    return DependencyMatrix(gram(res), tuple(x), t)


def temporal_penalty(series: LongitudinalSeries, bank: AtlasBank, t: int,
                     i: int, x, spec: PatchSpec, beta: float,
                     epsilon: float) -> float:
    """exp(min(E, 150)) with E = beta * sum_y |T_q(y) - T_t(y)| /
    max(|T_q(y) - I_i(N_i(y))|, epsilon); i and t are 0-based here.

    The displacement in the denominator is the one found against the
    atlas's own registration target T_q.
    """
    if beta < 0:
        raise GeometryError(f"beta must be >= 0, got {beta}")
    if not epsilon > 0:
        raise GeometryError(f"epsilon must be > 0, got {epsilon}")
    q = int(bank.provenance[i])
    own = series.targets[q].data
    tgt = series.targets[t].data
    img = bank.pairs[i][0].data
    d = correspondence(own, img, x, spec)
    den = residual_vector(own, img, x, spec, d)
    x = np.asarray(x, dtype=np.intp)
    y = clamp_index(x + patch_offsets(spec.patch_radius), own.shape)
    num = np.abs(own[y[:, 0], y[:, 1], y[:, 2]].astype(np.float64)
                 - tgt[y[:, 0], y[:, 1], y[:, 2]].astype(np.float64))
    total = 0.0
    for p in range(num.shape[0]):
        total += num[p] / max(den[p], epsilon)
    return float(np.exp(min(beta * total, E_CAP)))


def build_gamma_matrix(series: LongitudinalSeries, bank: AtlasBank, x,
                       spec: PatchSpec) -> np.ndarray:
    """Own-time residual Gram over all m atlases; independent of the
    fusion target time."""
    res = _residuals_for(series, bank, 0, x, spec, OWN_TIME)
    return gram(res)


def build_4djlf_matrix(series: LongitudinalSeries, bank: AtlasBank, t: int, x,
                       spec: PatchSpec, beta: float,
                       epsilon: float) -> DependencyMatrix:
    g = build_gamma_matrix(series, bank, x, spec)
    pen = np.array([temporal_penalty(series, bank, t, i, x, spec, beta, epsilon)
                    for i in range(bank.m)])
    scaled = g * (pen[:, None] * pen[None, :])
    return DependencyMatrix(scaled, tuple(x), t)


def phi_block(gamma_full: np.ndarray, q: int, r: int, n: int) -> np.ndarray:
    """Block (q, r) of the full Gamma matrix, 1-based block indices; block q
    covers atlas rows (q-1)*n .. q*n."""
    k = gamma_full.shape[0] // n
    if not (1 <= q <= k and 1 <= r <= k):
        raise GeometryError(f"block indices ({q}, {r}) outside 1..{k}")
    rows = slice((q - 1) * n, q * n)
    cols = slice((r - 1) * n, r * n)
    return gamma_full[rows, cols]
