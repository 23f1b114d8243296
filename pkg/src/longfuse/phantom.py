"""Synthetic longitudinal phantoms: analytically known label fields,
noisy intensity targets, simulated registered atlas banks, and the
dummy-pair construction for robustness experiments.

A phantom stands in for a scanned subject: nested ellipsoids shrink or
grow per time point, targets are per-label means plus Gaussian noise, and
each time point's n atlases are that time's truth with boundary labels
flipped at a configured rate ("rater error") and freshly noised
intensities, laid out block-major in the bank.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError, PhantomError
from .volume import INTENSITY, LABEL, AtlasBank, LongitudinalSeries, Volume


@dataclass(frozen=True)
class Ellipsoid:
    """One labeled structure: center/radii in voxel units, one radius
    scale factor per time point."""

    label: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    time_scales: tuple[float, ...]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    k: int
    n: int
    structures: tuple[Ellipsoid, ...]
    label_means: dict[int, float]
    noise_sigma: float = 0.05
    atlas_label_error_rate: float = 0.1
    atlas_intensity_sigma: float = 0.05
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Per-time intensity shift added to the targets (scanner/session
    # drift); drives the temporal penalties apart between time points.
    time_intensity_offsets: tuple[float, ...] = ()

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise PhantomError(f"need k >= 1 and n >= 1, got k={self.k} n={self.n}")
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise PhantomError(f"bad dims {self.dims}")
        if not self.structures:
            raise PhantomError("phantom needs at least one structure")
        if not 0.0 <= self.atlas_label_error_rate <= 1.0:
            raise PhantomError(
                f"atlas_label_error_rate must be in [0,1], got {self.atlas_label_error_rate}")
        if self.noise_sigma < 0 or self.atlas_intensity_sigma < 0:
            raise PhantomError("noise sigmas must be >= 0")
        offsets = tuple(self.time_intensity_offsets or ()) or (0.0,) * self.k
        if len(offsets) != self.k:
            raise PhantomError(
                f"time_intensity_offsets needs {self.k} entries, got {len(offsets)}")
        object.__setattr__(self, "time_intensity_offsets", offsets)
        object.__setattr__(self, "structures", tuple(self.structures))
        if 0 not in self.label_means:
            raise PhantomError("label_means must include background label 0")
        for s in self.structures:
            if s.label <= 0:
                raise PhantomError(f"structure labels must be positive, got {s.label}")
            if s.label not in self.label_means:
                raise PhantomError(f"no intensity mean for label {s.label}")
            if len(s.time_scales) != self.k:
                raise PhantomError(
                    f"structure {s.label}: {len(s.time_scales)} time scales for k={self.k}")
            for t, scale in enumerate(s.time_scales):
                if not scale > 0:
                    raise PhantomError(f"structure {s.label}: scale {scale} at t={t}")
                for a in range(3):
                    r = s.radii[a] * scale
                    if s.center[a] - r < 0 or s.center[a] + r > self.dims[a] - 1:
                        raise PhantomError(
                            f"structure {s.label} exceeds volume bounds at t={t} axis {a}")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(sorted({s.label for s in self.structures}))


def _mean_lut(spec: PhantomSpec) -> np.ndarray:
    top = max(spec.labels)
    lut = np.zeros(top + 1)
    for lab, mean in spec.label_means.items():
        lut[lab] = mean
    return lut


def render_truth(spec: PhantomSpec, t: int) -> np.ndarray:
    """Ground-truth label field at time t; structures paint in order, so
    later (inner) structures overwrite earlier ones."""
    nx, ny, nz = spec.dims
    gx = np.arange(nx, dtype=np.float64)[:, None, None]
    gy = np.arange(ny, dtype=np.float64)[None, :, None]
    gz = np.arange(nz, dtype=np.float64)[None, None, :]
    out = np.zeros(spec.dims, dtype=np.int32)
    for s in spec.structures:
        scale = s.time_scales[t]
        rx, ry, rz = (r * scale for r in s.radii)
        cx, cy, cz = s.center
        inside = (((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2
                  + ((gz - cz) / rz) ** 2) <= 1.0
        out[inside] = s.label
    return out


def boundary_flip(labels: np.ndarray, rate: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Flip boundary voxels (those with a differing 6-neighbor) to one of
    their differing neighbors' labels with the given probability."""
    padded = np.pad(labels, 1, mode="edge")
    core = (slice(1, -1),) * 3
    shifts = []
    for axis in range(3):
        for delta in (-1, 1):
            sl = list(core)
            sl[axis] = slice(1 + delta, padded.shape[axis] - 1 + delta)
            shifts.append(padded[tuple(sl)])
    differs = np.zeros(labels.shape, dtype=bool)
    for sh in shifts:
        differs |= sh != labels
    flip = differs & (rng.random(labels.shape) < rate)
    out = labels.copy()
    where = np.argwhere(flip)
    pick = rng.random(where.shape[0])
    for j, (x, y, z) in enumerate(where):
        own = labels[x, y, z]
        cands = [int(sh[x, y, z]) for sh in shifts if sh[x, y, z] != own]
        out[x, y, z] = cands[int(pick[j] * len(cands))]
    return out


def generate_phantom(spec: PhantomSpec
                     ) -> tuple[LongitudinalSeries, tuple[Volume, ...], AtlasBank]:
    """Targets, ground-truth labels, and the block-major atlas bank.

    Draw order is fixed (targets by time, then atlases by time then
    index), so output is bitwise reproducible per seed.
    """
    rng = np.random.default_rng(spec.seed)
    lut = _mean_lut(spec)
    truths_data = [render_truth(spec, t) for t in range(spec.k)]

    targets = []
    for t in range(spec.k):
        img = (lut[truths_data[t]] + spec.time_intensity_offsets[t]
               + rng.standard_normal(spec.dims) * spec.noise_sigma)
        targets.append(Volume(img, spec.spacing, INTENSITY))

    pairs = []
    for t in range(spec.k):
        for _ in range(spec.n):
            lab = boundary_flip(truths_data[t], spec.atlas_label_error_rate, rng)
            img = lut[lab] + rng.standard_normal(spec.dims) * spec.atlas_intensity_sigma
            pairs.append((Volume(img, spec.spacing, INTENSITY),
                          Volume(lab, spec.spacing, LABEL)))

    series = LongitudinalSeries(tuple(targets))
    truths = tuple(Volume(d, spec.spacing, LABEL) for d in truths_data)
    return series, truths, AtlasBank(n=spec.n, k=spec.k, pairs=tuple(pairs))


def make_dummy_pairs(targets: LongitudinalSeries,
                     outlier: Volume) -> list[LongitudinalSeries]:
    """One synthetic 2-time-point series (T_t, outlier) per target,
    simulating a pathological follow-up scan."""
    if outlier.kind != INTENSITY:
        raise GeometryError("outlier must be an intensity volume")
    first = targets.targets[0]
    if first.dims != outlier.dims or first.spacing != outlier.spacing:
        raise GeometryError(
            f"outlier grid {outlier.dims}/{outlier.spacing} does not match "
            f"targets {first.dims}/{first.spacing}")
    return [LongitudinalSeries((t, outlier)) for t in targets.targets]


def dummy_bank(bank: AtlasBank, t: int, outlier_pairs) -> AtlasBank:
    """Bank for a dummy pair: block 1 is the real bank's block t, block 2
    the atlases registered to the outlier."""
    outlier_pairs = tuple(outlier_pairs)
    if len(outlier_pairs) != bank.n:
        raise GeometryError(
            f"need {bank.n} outlier pairs, got {len(outlier_pairs)}")
    real = bank.pairs[bank.block(t)]
    return AtlasBank(n=bank.n, k=2, pairs=real + outlier_pairs)


def concentric_spec(dims=(32, 32, 32), k=3, n=4, seed=0, labels=3,
                    shrink=0.05, **overrides) -> PhantomSpec:
    """Convenience builder: `labels` nested ellipsoids centered in the
    volume, outermost first, all shrinking by `shrink` per time step."""
    if not 1 <= labels <= 5:
        raise PhantomError(f"labels must be in 1..5, got {labels}")
    center = tuple((d - 1) / 2.0 for d in dims)
    scales = tuple(1.0 - shrink * t for t in range(k))
    fractions = (0.40, 0.28, 0.18, 0.11, 0.06)[:labels]
    structures = tuple(
        Ellipsoid(label=i + 1, center=center,
                  radii=tuple(f * (d - 1) / 2.0 for d in dims),
                  time_scales=scales)
        for i, f in enumerate(fractions))
    means = {0: 0.0}
    for i in range(labels):
        means[i + 1] = 0.25 + 0.75 * i / max(labels - 1, 1)
    fields = dict(dims=tuple(dims), k=k, n=n, structures=structures,
                  label_means=means, seed=seed)
    fields.update(overrides)
    return PhantomSpec(**fields)


def spec_to_dict(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    d["label_means"] = {str(k): v for k, v in spec.label_means.items()}
    return d


def spec_from_dict(d: dict) -> PhantomSpec:
    d = dict(d)
    d["structures"] = tuple(
        Ellipsoid(label=int(s["label"]), center=tuple(s["center"]),
                  radii=tuple(s["radii"]), time_scales=tuple(s["time_scales"]))
        for s in d["structures"])
    d["label_means"] = {int(k): float(v) for k, v in d["label_means"].items()}
    for key in ("dims", "spacing", "time_intensity_offsets"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return PhantomSpec(**d)


def save_spec(spec: PhantomSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")


def load_spec(path) -> PhantomSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))
