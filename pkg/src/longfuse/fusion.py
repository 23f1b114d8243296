"""Fusion driver: masking, consensus shortcut, chunked kernel dispatch,
per-voxel weight solve, and weighted label voting for each time point.

Determinism contract: for fixed inputs and config the segmentations are
bitwise identical for any worker count. Work is cut into fixed-size voxel
chunks whose boundaries do not depend on the worker count, every chunk
writes a disjoint slice of the output, and all tie-breaks are fixed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import backends
from .dependency import E_CAP
from .errors import DegenerateMatrixError, FusionError, GeometryError
from .patches import displacement_candidates, patch_offsets
from .solver import solve_weights
from .volume import LABEL, AtlasBank, LongitudinalSeries, Volume

MODES = ("jlf", "jlf_multi", "fourd_jlf")
MASK_POLICIES = ("union_nonzero", "explicit_mask", "full")

# Voxels per kernel call; fixed so chunk boundaries never depend on the
# worker count.
CHUNK = 2048


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "fourd_jlf"
    patch_radius: int = 2
    search_radius: int = 3
    alpha: float = 0.1
    beta: float = 100.0
    epsilon: float = 1e-6
    consensus_shortcut: bool = True
    mask_policy: str = "union_nonzero"
    workers: int = 1
    backend: str | None = None
    emit_posteriors: bool = False
    # Residual reference for jlf_multi: "target" compares every atlas
    # against T_t, "own" against each atlas's registration target.
    multi_reference: str = "target"

    def __post_init__(self):
        if self.mode not in MODES:
            raise FusionError(f"unknown mode {self.mode!r} (choose from {MODES})")
        if self.mask_policy not in MASK_POLICIES:
            raise FusionError(
                f"unknown mask policy {self.mask_policy!r} (choose from {MASK_POLICIES})")
        if self.multi_reference not in ("target", "own"):
            raise FusionError(
                f"multi_reference must be 'target' or 'own', got {self.multi_reference!r}")
        if self.patch_radius < 0 or self.search_radius < 0:
            raise FusionError("patch_radius and search_radius must be >= 0")
        if self.alpha < 0:
            raise FusionError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise FusionError(f"beta must be >= 0, got {self.beta}")
        if not self.epsilon > 0:
            raise FusionError(f"epsilon must be > 0, got {self.epsilon}")
        if self.workers < 1:
            raise FusionError(f"workers must be >= 1, got {self.workers}")


@dataclass
class FusionStats:
    masked_voxels: int = 0
    shortcut_voxels: int = 0
    solved_voxels: int = 0
    solver_fallbacks: int = 0
    backend: str = ""


@dataclass
class FusionResult:
    segmentation: Volume
    time: int
    stats: FusionStats
    posteriors: dict[int, np.ndarray] | None = None


def weighted_vote(labels_at_x, weights) -> tuple[int, dict[int, float]]:
    """Per-label score v_l = sum_i w_i * [S_i(x) = l]; winner is the
    argmax, ties to the smallest label. Scores are raw (may be negative);
    posterior emission clips and renormalizes separately."""
    labels_at_x = [int(l) for l in labels_at_x]
    weights = np.asarray(weights, dtype=np.float64)
    if len(labels_at_x) != weights.shape[0]:
        raise FusionError(
            f"{len(labels_at_x)} labels but {weights.shape[0]} weights")
    scores: dict[int, float] = {l: 0.0 for l in sorted(set(labels_at_x))}
    for lab, w in zip(labels_at_x, weights):
        scores[lab] += float(w)
    winner = None
    best = -math.inf
    for lab in sorted(scores):
        if scores[lab] > best:
            best = scores[lab]
            winner = lab
    return winner, scores


def plan_voxel_partition(dims, workers: int) -> list[tuple[int, int]]:
    """Split the flat voxel index range of dims into `workers` contiguous
    blocks of near-equal size (pairwise disjoint, covering everything)."""
    if workers < 1:
        raise FusionError(f"workers must be >= 1, got {workers}")
    total = 1
    for d in dims:
        total *= int(d)
    workers = min(workers, total) if total else 1
    bounds = np.linspace(0, total, workers + 1).astype(np.intp)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers)]


def _atlas_roles(cfg: FusionConfig, bank: AtlasBank, t: int):
    """Participating atlas indices plus each one's reference and penalty
    volume assignment (as target indices; -1 means no penalty)."""
    if cfg.mode == "jlf":
        idx = list(range(bank.block(t).start, bank.block(t).stop))
        refs = [t] * len(idx)
        nums = [-1] * len(idx)
    elif cfg.mode == "jlf_multi":
        idx = list(range(bank.m))
        if cfg.multi_reference == "target":
            refs = [t] * bank.m
        else:
            refs = [int(q) for q in bank.provenance]
        nums = [-1] * bank.m
    else:
        idx = list(range(bank.m))
        refs = [int(q) for q in bank.provenance]
        nums = [t] * bank.m
    return idx, refs, nums


def _build_stack(series: LongitudinalSeries, bank: AtlasBank, atlas_idx):
    """One float64 (V, nx, ny, nz) array holding targets then the unique
    atlas images, plus the stack position of each participating atlas."""
    vols = [np.ascontiguousarray(tv.data, dtype=np.float64) for tv in series.targets]
    pos_by_id: dict[int, int] = {}
    img_pos = []
    for i in atlas_idx:
        img = bank.pairs[i][0].data
        pos = pos_by_id.get(id(img))
        if pos is None:
            pos = len(vols)
            vols.append(np.ascontiguousarray(img, dtype=np.float64))
            pos_by_id[id(img)] = pos
        img_pos.append(pos)
    return np.stack(vols), np.asarray(img_pos, dtype=np.intp)


def _mask_for(cfg: FusionConfig, bank: AtlasBank, atlas_idx, dims,
              mask: Volume | None) -> np.ndarray:
    if cfg.mask_policy == "full":
        return np.ones(dims, dtype=bool)
    if cfg.mask_policy == "explicit_mask":
        if mask is None:
            raise FusionError("mask_policy explicit_mask needs a mask volume")
        if mask.dims != dims:
            raise GeometryError(
                f"mask dims {mask.dims} do not match targets {dims}")
        return mask.data != 0
    out = np.zeros(dims, dtype=bool)
    for i in atlas_idx:
        out |= bank.pairs[i][1].data != 0
    return out


def _check_finite(series: LongitudinalSeries, bank: AtlasBank) -> None:
    for t, vol in enumerate(series.targets):
        if not np.isfinite(vol.data).all():
            raise GeometryError(f"target {t} contains non-finite intensities")
    seen = set()
    for i, (img, _) in enumerate(bank.pairs):
        if id(img.data) in seen:
            continue
        seen.add(id(img.data))
        if not np.isfinite(img.data).all():
            raise GeometryError(f"atlas intensity {i} contains non-finite values")


def _fuse_chunk(backend, stack, img_idx, ref_idx, num_idx, coords, offsets,
                cands, cfg: FusionConfig, labels_chunk, t):
    """Solve one chunk: kernel, penalties, weights, vote. Returns the
    winning labels, raw per-voxel scores against the chunk's label set,
    and the solver fallback count."""
    grams, expo = backend.build_systems(
        stack, img_idx, ref_idx, num_idx, coords, offsets, cands,
        cfg.beta, cfg.epsilon)
    pens = np.exp(np.minimum(expo, E_CAP))
    mats = grams * (pens[:, :, None] * pens[:, None, :])

    n_vox, m = pens.shape
    uniq = np.unique(labels_chunk)
    comp = np.searchsorted(uniq, labels_chunk)
    scores = np.zeros((n_vox, uniq.size))
    weights = np.empty((n_vox, m))
    fallbacks = 0
    for v in range(n_vox):
        try:
            wv = solve_weights(mats[v], cfg.alpha)
        except DegenerateMatrixError as exc:
            raise FusionError(str(exc), voxel=coords[v], time_index=t) from exc
        weights[v] = wv.weights
        fallbacks += wv.used_fallback
    rows = np.arange(n_vox)
    for i in range(m):
        np.add.at(scores, (rows, comp[i]), weights[:, i])
    winners = uniq[np.argmax(scores, axis=1)]
    return winners, scores, uniq, fallbacks


def _posterior_rows(scores: np.ndarray) -> np.ndarray:
    """Clip negative scores to zero and renormalize each row; the clipped
    sum is >= 1 because raw scores sum to 1."""
    clipped = np.maximum(scores, 0.0)
    return clipped / clipped.sum(axis=1, keepdims=True)


def fuse(series: LongitudinalSeries, bank: AtlasBank, cfg: FusionConfig,
         mask: Volume | None = None) -> list[FusionResult]:
    """Fuse every time point of the series against the atlas bank.

    Returns one FusionResult per time point, in order. Voxels outside the
    processing mask receive label 0.
    """
    bank.check_against(series)
    _check_finite(series, bank)
    backend = backends.get_backend(cfg.backend)
    offsets = patch_offsets(cfg.patch_radius)
    cands = displacement_candidates(cfg.search_radius)
    dims = series.targets[0].dims
    spacing = series.targets[0].spacing

    results = []
    for t in range(series.k):
        atlas_idx, ref_idx, num_idx = _atlas_roles(cfg, bank, t)
        stack, img_idx = _build_stack(series, bank, atlas_idx)
        ref_idx = np.asarray(ref_idx, dtype=np.intp)
        num_idx = np.asarray(num_idx, dtype=np.intp)

        mask_bool = _mask_for(cfg, bank, atlas_idx, dims, mask)
        coords = np.argwhere(mask_bool).astype(np.intp)
        labels_at = np.stack(
            [bank.pairs[i][1].data[mask_bool] for i in atlas_idx]
        ).astype(np.int32) if coords.size else np.zeros((len(atlas_idx), 0), np.int32)

        seg = np.zeros(dims, dtype=np.int32)
        stats = FusionStats(masked_voxels=int(coords.shape[0]),
                            backend=backend.name)
        post: dict[int, np.ndarray] | None = None
        if cfg.emit_posteriors:
            all_labels = sorted(int(l) for l in np.unique(labels_at)) if coords.size else []
            post = {l: np.zeros(dims, dtype=np.float64)
                    for l in set(all_labels) | {0}}
            post[0][~mask_bool] = 1.0

        if cfg.consensus_shortcut and coords.shape[0]:
            unanimous = (labels_at == labels_at[0]).all(axis=0)
        else:
            unanimous = np.zeros(coords.shape[0], dtype=bool)
        if unanimous.any():
            uc = coords[unanimous]
            seg[uc[:, 0], uc[:, 1], uc[:, 2]] = labels_at[0, unanimous]
            stats.shortcut_voxels = int(unanimous.sum())
            if post is not None:
                for l in np.unique(labels_at[0, unanimous]):
                    pick = uc[labels_at[0, unanimous] == l]
                    post[int(l)][pick[:, 0], pick[:, 1], pick[:, 2]] = 1.0

        todo = np.flatnonzero(~unanimous)
        stats.solved_voxels = int(todo.size)
        if todo.size:
            n_blocks = max(1, math.ceil(todo.size / CHUNK))
            blocks = plan_voxel_partition((todo.size,), n_blocks)

            def run_block(lo_hi):
                lo, hi = lo_hi
                sel = todo[lo:hi]
                return sel, _fuse_chunk(
                    backend, stack, img_idx, ref_idx, num_idx,
                    coords[sel], offsets, cands, cfg, labels_at[:, sel], t)

            if cfg.workers == 1:
                outputs = map(run_block, blocks)
            else:
                pool = ThreadPoolExecutor(max_workers=cfg.workers)
                try:
                    outputs = list(pool.map(run_block, blocks))
                finally:
                    pool.shutdown()
            for sel, (winners, scores, uniq, fb) in outputs:
                cc = coords[sel]
                seg[cc[:, 0], cc[:, 1], cc[:, 2]] = winners
                stats.solver_fallbacks += fb
                if post is not None:
                    rows = _posterior_rows(scores)
                    for j, l in enumerate(uniq):
                        post[int(l)][cc[:, 0], cc[:, 1], cc[:, 2]] = rows[:, j]

        results.append(FusionResult(
            segmentation=Volume(seg, spacing, LABEL),
            time=t, stats=stats, posteriors=post))
    return results
