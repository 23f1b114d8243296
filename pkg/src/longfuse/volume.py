"""Volume data model: single volumes, longitudinal target series, and the
registered atlas bank with its block-major time provenance."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti
from .errors import GeometryError, NiftiError

INTENSITY = "intensity"
LABEL = "label"

# Labels are written as int16; this is the hard ceiling for label values.
MAX_LABEL = 32767


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with voxel spacing.

    data is indexed [x, y, z] and has shape == dims; spacing is mm per
    voxel along each axis. kind is "intensity" or "label"; label volumes
    must hold non-negative integers.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    kind: str

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GeometryError(f"volume data must be 3D, got shape {data.shape}")
        if any(d < 1 for d in data.shape):
            raise GeometryError(f"volume dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0.0 for s in spacing):
            raise GeometryError(f"spacing must be three positive reals, got {self.spacing}")
        if self.kind not in (INTENSITY, LABEL):
            raise GeometryError(f"unknown volume kind {self.kind!r}")
        if self.kind == LABEL:
            if data.dtype.kind not in "iu":
                raise GeometryError(
                    f"label volume must have integer dtype, got {data.dtype}")
            if data.size and int(data.min()) < 0:
                raise GeometryError("label volume contains negative values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def grid(self) -> tuple:
        return (self.dims, self.spacing)

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume":
        return Volume(data, self.spacing, self.kind if kind is None else kind)

    def as_intensity(self) -> "Volume":
        """View this volume's values as intensities (float data)."""
        if self.kind == INTENSITY:
            return self
        return Volume(self.data.astype(np.float32), self.spacing, INTENSITY)


def same_grid(a: Volume, b: Volume) -> bool:
    return a.dims == b.dims and a.spacing == b.spacing


def require_same_grid(a: Volume, b: Volume, what: str) -> None:
    if not same_grid(a, b):
        raise GeometryError(
            f"{what}: grid mismatch (dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing})")


@dataclass(frozen=True)
class LongitudinalSeries:
    """Ordered intensity targets of one subject, ascending in time."""

    targets: tuple[Volume, ...]
    subject_id: str = ""

    def __post_init__(self):
        targets = tuple(self.targets)
        if len(targets) < 1:
            raise GeometryError("a longitudinal series needs at least one target")
        for idx, vol in enumerate(targets):
            if vol.kind != INTENSITY:
                raise GeometryError(f"target {idx} is not an intensity volume")
            require_same_grid(targets[0], vol, f"target {idx}")
        object.__setattr__(self, "targets", targets)

    @property
    def k(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class AtlasBank:
    """The m = n*k registered (intensity, label) atlas pairs, concatenated
    block-major in time: pair i (1-based) belongs to time point
    q(i) = floor((i-1)/n) + 1, so block q spans indices (q-1)*n .. q*n.
    """

    n: int
    k: int
    pairs: tuple[tuple[Volume, Volume], ...]

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise GeometryError(f"atlas bank needs n >= 1 and k >= 1, got n={self.n} k={self.k}")
        pairs = tuple((i, s) for i, s in self.pairs)
        if len(pairs) != self.n * self.k:
            raise GeometryError(
                f"atlas bank needs n*k = {self.n * self.k} pairs, got {len(pairs)}")
        ref = pairs[0][0]
        for idx, (img, lab) in enumerate(pairs):
            if img.kind != INTENSITY:
                raise GeometryError(f"atlas pair {idx}: first volume is not intensity")
            if lab.kind != LABEL:
                raise GeometryError(f"atlas pair {idx}: second volume is not a label map")
            require_same_grid(ref, img, f"atlas intensity {idx}")
            require_same_grid(img, lab, f"atlas pair {idx}")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def replicated(cls, pairs, k: int) -> "AtlasBank":
        """Bank that reuses the same n pairs for each of k time points."""
        pairs = tuple(pairs)
        return cls(n=len(pairs), k=k, pairs=pairs * k)

    @property
    def m(self) -> int:
        return self.n * self.k

    def q(self, i: int) -> int:
        """Time point of atlas i (both 1-based)."""
        if not 1 <= i <= self.m:
            raise IndexError(f"atlas index {i} outside 1..{self.m}")
        return (i - 1) // self.n + 1

    @property
    def provenance(self) -> np.ndarray:
        """0-based time index per atlas, block-major."""
        return np.repeat(np.arange(self.k), self.n)

    def block(self, t: int) -> slice:
        """0-based atlas index range registered to time point t (0-based)."""
        if not 0 <= t < self.k:
            raise IndexError(f"time index {t} outside 0..{self.k - 1}")
        return slice(t * self.n, (t + 1) * self.n)

    def check_against(self, series: LongitudinalSeries) -> None:
        if series.k != self.k:
            raise GeometryError(
                f"series has {series.k} time points but bank was built for {self.k}")
        require_same_grid(series.targets[0], self.pairs[0][0], "atlas bank")


def read_volume(path) -> Volume:
    """Load a NIfTI-1 volume. Integer files load as label volumes (or as
    intensity if they contain negatives), floating files as intensity."""
    path = Path(path)
    data, spacing = nifti.read(path)
    if data.dtype.kind in "iu":
        if data.size and int(data.min()) < 0:
            return Volume(data.astype(np.float32), spacing, INTENSITY)
        return Volume(data, spacing, LABEL)
    return Volume(data, spacing, INTENSITY)


def write_volume(volume: Volume, path) -> None:
    """Write a volume as NIfTI-1: labels as int16 (code 4), intensity as
    float32 (code 16), gzipped when the path ends in .gz."""
    path = Path(path)
    if volume.kind == LABEL:
        if volume.data.size and int(volume.data.max()) > MAX_LABEL:
            raise NiftiError(
                f"{path}: label value {int(volume.data.max())} exceeds the "
                f"int16 range (max {MAX_LABEL})")
        nifti.write(path, volume.data.astype(np.int16), volume.spacing, nifti.CODE_INT16)
    else:
        nifti.write(path, volume.data.astype(np.float32), volume.spacing,
                    nifti.CODE_FLOAT32)


def normalize_intensity(volume: Volume, low: float = 1.0, high: float = 99.0) -> Volume:
    """Rescale so the low/high percentiles map to 0/1, clamped to [0, 1].

    Constant (and near-constant) volumes map to all zeros. Needed because
    the temporal penalty takes ratios of intensity differences across
    sessions, which only make sense on a common scale.
    """
    if volume.kind != INTENSITY:
        raise GeometryError("normalize_intensity expects an intensity volume")
    data = volume.data.astype(np.float64)
    p_lo, p_hi = np.percentile(data, [low, high])
    if not p_hi > p_lo:
        return volume.with_data(np.zeros_like(data))
    scaled = np.clip((data - p_lo) / (p_hi - p_lo), 0.0, 1.0)
    return volume.with_data(scaled)
