"""Chunked fusion kernel in pure numpy.

Computes, for a chunk of voxels, every atlas's best search displacement,
residual patch vector, Gram matrix, and temporal-penalty exponent. The
compiled kernel in longfuse._core implements the same contract; both
accumulate over patch positions in the same sequential order and pick the
first minimal search candidate, so their outputs agree bitwise.

Contract (shared by both backends):
  vols     (V, nx, ny, nz) float64, every distinct volume used
  img_idx  (m,) index into vols of each atlas's intensity image
  ref_idx  (m,) index of each atlas's residual/search reference
  num_idx  (m,) index of the penalty-numerator volume, or -1 for none
  coords   (N, 3) voxel coordinates to process
  offsets  (P, 3) patch offsets, fixed order
  cands    (C, 3) search displacements, fixed order
  returns  grams (N, m, m), exponents (N, m)

Penalty exponents are beta * sum_p num/max(den, eps) before capping;
callers apply exp(min(E, cap)) so both backends share one exp.
"""

from __future__ import annotations

import numpy as np

name = "numpy"


def _gather(vol: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return vol[idx[..., 0], idx[..., 1], idx[..., 2]]


def build_systems(vols, img_idx, ref_idx, num_idx, coords, offsets, cands,
                  beta, epsilon):
    vols = np.asarray(vols, dtype=np.float64)
    img_idx = np.asarray(img_idx, dtype=np.intp)
    ref_idx = np.asarray(ref_idx, dtype=np.intp)
    num_idx = np.asarray(num_idx, dtype=np.intp)
    coords = np.asarray(coords, dtype=np.intp)
    offsets = np.asarray(offsets, dtype=np.intp)
    cands = np.asarray(cands, dtype=np.intp)

    n_vox = coords.shape[0]
    n_atlas = img_idx.shape[0]
    n_patch = offsets.shape[0]
    n_cand = cands.shape[0]
    upper = np.asarray(vols.shape[1:], dtype=np.intp) - 1

    grams = np.zeros((n_vox, n_atlas, n_atlas))
    expo = np.zeros((n_vox, n_atlas))
    if n_vox == 0:
        return grams, expo

    # patch coordinates, clamped once: (P, N, 3)
    ys = np.empty((n_patch, n_vox, 3), dtype=np.intp)
    for p in range(n_patch):
        np.clip(coords + offsets[p], 0, upper, out=ys[p])

    # patch values of each referenced volume at the clamped coordinates
    patch_cache: dict[int, np.ndarray] = {}

    def patches_of(vol_id: int) -> np.ndarray:
        got = patch_cache.get(vol_id)
        if got is None:
            vol = vols[vol_id]
            got = np.empty((n_vox, n_patch))
            for p in range(n_patch):
                got[:, p] = _gather(vol, ys[p])
            patch_cache[vol_id] = got
        return got

    residuals = np.empty((n_atlas, n_vox, n_patch))
    for i in range(n_atlas):
        img = vols[img_idx[i]]
        ref_patch = patches_of(ref_idx[i])

        # search: cost of every candidate, summed over p in order
        costs = np.zeros((n_vox, n_cand))
        for p in range(n_patch):
            pos = coords[:, None, :] + (cands[None, :, :] + offsets[p])
            np.clip(pos, 0, upper, out=pos)
            costs += np.abs(ref_patch[:, p, None] - _gather(img, pos))
        best = np.argmin(costs, axis=1)
        disp = cands[best]

        # residuals at the chosen displacement (patch coord clamps first,
        # displaced sample clamps again)
        for p in range(n_patch):
            ya = np.clip(ys[p] + disp, 0, upper)
            residuals[i, :, p] = np.abs(ref_patch[:, p] - _gather(img, ya))

        if num_idx[i] >= 0:
            other_patch = patches_of(num_idx[i])
            acc = np.zeros(n_vox)
            for p in range(n_patch):
                num = np.abs(ref_patch[:, p] - other_patch[:, p])
                acc += num / np.maximum(residuals[i, :, p], epsilon)
            expo[:, i] = beta * acc

    for p in range(n_patch):
        col = residuals[:, :, p].T
        grams += col[:, :, None] * col[:, None, :]
    return grams, expo
