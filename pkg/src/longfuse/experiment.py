"""Desk-scale experiment protocols on phantoms.

Two studies mirror the evaluation design for longitudinal fusion:

* reproducibility: fuse every time point of a phantom and score the mean
  pairwise Dice between the per-time segmentations; higher means the
  segmentations are longitudinally more consistent.
* robustness: pair each target with an unrelated outlier volume (a
  "dummy" follow-up) and check how much each mode's accuracy on the real
  target moves. Temporal pooling must not buy consistency at the price
  of being dragged around by a pathological time point.

Both repeat over independent phantom seeds and compare modes with the
signed-rank test and Cohen's d.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fusion import FusionConfig, fuse
from .metrics import cohens_d, dice, reproducibility, wilcoxon_signed_rank
from .phantom import PhantomSpec, dummy_bank, generate_phantom, make_dummy_pairs


@dataclass(frozen=True)
class ExperimentTable:
    """Per-seed scores per mode plus pairwise mode comparisons."""

    study: str
    seeds: tuple[int, ...]
    per_seed: dict[str, list[float]]
    comparisons: list[dict]

    def rows(self) -> list[dict]:
        out = []
        for mode, vals in self.per_seed.items():
            for seed, val in zip(self.seeds, vals):
                out.append({"study": self.study, "mode": mode,
                            "seed": seed, "score": val})
        return out


def _compare(study: str, per_seed: dict[str, list[float]]) -> list[dict]:
    modes = list(per_seed)
    rows = []
    for a_pos, mode_a in enumerate(modes):
        for mode_b in modes[a_pos + 1:]:
            x = np.asarray(per_seed[mode_a])
            y = np.asarray(per_seed[mode_b])
            try:
                p_val = wilcoxon_signed_rank(x, y)
            except ValueError:
                p_val = float("nan")
            rows.append({
                "study": study, "mode_a": mode_a, "mode_b": mode_b,
                "mean_a": float(x.mean()), "mean_b": float(y.mean()),
                "wilcoxon_p": p_val, "cohens_d": cohens_d(x, y),
            })
    return rows


def _config_for(base: FusionConfig, mode: str) -> FusionConfig:
    return replace(base, mode=mode)


def reproducibility_experiment(spec: PhantomSpec, modes, seeds,
                               base_config: FusionConfig) -> ExperimentTable:
    """Mean pairwise longitudinal Dice per (mode, seed)."""
    seeds = tuple(int(s) for s in seeds)
    per_seed: dict[str, list[float]] = {m: [] for m in modes}
    for seed in seeds:
        series, _, bank = generate_phantom(replace(spec, seed=seed))
        for mode in modes:
            results = fuse(series, bank, _config_for(base_config, mode))
            segs = [r.segmentation for r in results]
            matrix = reproducibility(segs, labels=spec.labels).values
            upper = matrix[np.triu_indices(len(segs), k=1)]
            per_seed[mode].append(float(upper.mean()))
    return ExperimentTable("reproducibility", seeds, per_seed,
                           _compare("reproducibility", per_seed))


def robustness_experiment(spec: PhantomSpec, outlier_spec: PhantomSpec,
                          modes, seeds,
                          base_config: FusionConfig) -> ExperimentTable:
    """Mean Dice-vs-truth of the real target inside dummy pairs, per
    (mode, seed). outlier_spec must be a k=1 phantom with the same grid
    and atlas count as spec."""
    if outlier_spec.k != 1:
        raise ValueError("outlier_spec must have k = 1")
    if outlier_spec.n != spec.n:
        raise ValueError(
            f"outlier_spec has n={outlier_spec.n}, expected {spec.n}")
    seeds = tuple(int(s) for s in seeds)
    per_seed: dict[str, list[float]] = {m: [] for m in modes}
    for seed in seeds:
        series, truths, bank = generate_phantom(replace(spec, seed=seed))
        out_series, _, out_bank = generate_phantom(
            replace(outlier_spec, seed=seed + 7919))
        outlier = out_series.targets[0]
        pairs_series = make_dummy_pairs(series, outlier)
        for mode in modes:
            cfg = _config_for(base_config, mode)
            scores = []
            for t, two_point in enumerate(pairs_series):
                bank_t = dummy_bank(bank, t, out_bank.pairs)
                result = fuse(two_point, bank_t, cfg)[0]
                vals = [dice(result.segmentation, truths[t], l)
                        for l in spec.labels]
                scores.append(sum(vals) / len(vals))
            per_seed[mode].append(float(np.mean(scores)))
    return ExperimentTable("robustness", seeds, per_seed,
                           _compare("robustness", per_seed))


def default_outlier_spec(spec: PhantomSpec) -> PhantomSpec:
    """An unrelated single-time-point phantom on the same grid, standing
    in for a scan of a different subject: the same tissue contrasts, so
    its patches look locally matchable, but shrunken and displaced
    structures, so its labels are wrong over wide bands."""
    shift = tuple(d * 0.06 for d in spec.dims)
    structures = tuple(
        replace(s,
                center=tuple(c + dc for c, dc in zip(s.center, shift)),
                radii=tuple(r * 0.7 for r in s.radii),
                time_scales=(1.0,))
        for s in spec.structures)
    return replace(spec, k=1, structures=structures,
                   time_intensity_offsets=(0.0,))
