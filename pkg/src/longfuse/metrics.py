"""Evaluation metrics: Dice overlap, longitudinal reproducibility,
volume trajectories, Wilcoxon signed-rank test, and Cohen's d."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

from .errors import GeometryError
from .volume import Volume, same_grid

# Sample size up to which the signed-rank null is enumerated exactly.
EXACT_LIMIT = 25


def dice(a: Volume, b: Volume, label: int) -> float:
    """2|A n B| / (|A| + |B|) for the voxels carrying `label`; 1.0 when
    the label is absent from both, 0.0 when absent from exactly one."""
    if not same_grid(a, b):
        raise GeometryError(
            f"dice inputs on different grids: {a.dims}/{a.spacing} vs "
            f"{b.dims}/{b.spacing}")
    in_a = a.data == label
    in_b = b.data == label
    na = int(in_a.sum())
    nb = int(in_b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((in_a & in_b).sum()) / (na + nb)


@dataclass(frozen=True)
class DiceReport:
    per_label: dict[int, float]
    mean: float
    counts_a: dict[int, int]
    counts_b: dict[int, int]


def dice_report(a: Volume, b: Volume, labels=None) -> DiceReport:
    """Per-label Dice plus voxel counts; labels default to every nonzero
    label present in either input."""
    if labels is None:
        present = set(np.unique(a.data)) | set(np.unique(b.data))
        labels = sorted(int(l) for l in present if l != 0)
    per = {int(l): dice(a, b, int(l)) for l in labels}
    mean = sum(per.values()) / len(per) if per else 1.0
    counts_a = {int(l): int((a.data == l).sum()) for l in labels}
    counts_b = {int(l): int((b.data == l).sum()) for l in labels}
    return DiceReport(per, mean, counts_a, counts_b)


@dataclass(frozen=True)
class ReproducibilityMatrix:
    values: np.ndarray
    labels: tuple[int, ...]


def reproducibility(segs, labels=None) -> ReproducibilityMatrix:
    """k x k matrix of label-mean Dice between every pair of time points'
    segmentations."""
    segs = list(segs)
    if len(segs) < 2:
        raise ValueError(f"reproducibility needs >= 2 segmentations, got {len(segs)}")
    if labels is None:
        labels = sorted({int(l) for s in segs for l in np.unique(s.data)} - {0})
    labels = tuple(int(l) for l in labels)
    k = len(segs)
    out = np.ones((k, k))
    for s in range(k):
        for t in range(s + 1, k):
            vals = [dice(segs[s], segs[t], l) for l in labels]
            out[s, t] = out[t, s] = sum(vals) / len(vals) if vals else 1.0
    return ReproducibilityMatrix(out, labels)


def volume_trajectory(segs, labels, groups=None) -> dict:
    """Label volumes in mm^3 per time point, plus optional label-group
    aggregates ({"name": [labels...]})."""
    segs = list(segs)
    if not segs:
        raise ValueError("volume_trajectory needs at least one segmentation")
    for s in segs[1:]:
        if not same_grid(segs[0], s):
            raise GeometryError("volume_trajectory inputs on different grids")
    voxel_mm3 = float(np.prod(segs[0].spacing))
    per_label = {int(l): [int((s.data == l).sum()) * voxel_mm3 for s in segs]
                 for l in labels}
    result = {"per_label": per_label, "groups": {}}
    for name, members in (groups or {}).items():
        totals = [0.0] * len(segs)
        for l in members:
            series = per_label.get(int(l))
            if series is None:
                series = [int((s.data == l).sum()) * voxel_mm3 for s in segs]
            for t, v in enumerate(series):
                totals[t] += v
        result["groups"][name] = totals
    return result


def _exact_two_sided(w2: int, ranks2) -> float:
    """Exact two-sided p for scaled statistic w2 = 2*W+ by enumerating the
    signed-rank null over the doubled (integer) ranks."""
    total = int(sum(ranks2))
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts += shifted
    denom = counts.sum()
    lo = counts[:w2 + 1].sum() / denom
    hi = counts[w2:].sum() / denom
    return float(min(1.0, 2.0 * min(lo, hi)))


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided paired signed-rank p-value.

    Zero differences are dropped; |differences| are ranked with average
    ranks on ties. The null distribution is enumerated exactly for up to
    25 nonzero pairs (ranks doubled so tied half-ranks stay integral) and
    approximated normally with tie correction above that.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got "
                         f"{x.shape} and {y.shape}")
    if x.size < 5:
        raise ValueError(f"need at least 5 pairs, got {x.size}")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    if n <= EXACT_LIMIT:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w_pos))
        return _exact_two_sided(w2, ranks2)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = (n * (n + 1) * (2 * n + 1)) / 24.0 \
        - float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var <= 0:
        return 1.0
    if w_pos > mean:
        z = (w_pos - 0.5 - mean) / math.sqrt(var)
    elif w_pos < mean:
        z = (w_pos + 0.5 - mean) / math.sqrt(var)
    else:
        z = 0.0
    return float(min(1.0, 2.0 * norm.sf(abs(z))))


def cohens_d(x, y) -> float:
    """(mean(x) - mean(y)) / pooled sd with n-1 denominators.

    Identical constant samples give 0.0; differing means over zero pooled
    spread are undefined and reported as nan.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ValueError("cohens_d needs at least 2 samples per group")
    diff = float(x.mean() - y.mean())
    pooled = ((x.size - 1) * x.var(ddof=1) + (y.size - 1) * y.var(ddof=1)) \
        / (x.size + y.size - 2)
    sd = math.sqrt(pooled)
    if sd == 0.0:
        return 0.0 if diff == 0.0 else math.nan
    return diff / sd


def write_csv(path, rows, fieldnames) -> None:
    """One metric per row; values formatted with repr-faithful floats."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
