"""longfuse: longitudinal multi-atlas label fusion.

Fuses registered atlas label maps into per-time-point segmentations of a
longitudinal image series, with joint (pairwise-dependency) weighting and
temporal penalties that adapt each atlas's trust to how much its
registration target differs from the image being segmented.
"""

__version__ = "0.1.0"

from .fusion import FusionConfig, FusionResult, fuse, weighted_vote
from .phantom import PhantomSpec, concentric_spec, generate_phantom, make_dummy_pairs
from .solver import WeightVector, solve_weights
from .volume import (AtlasBank, LongitudinalSeries, Volume, normalize_intensity,
                     read_volume, write_volume)

__all__ = [
    "__version__",
    "AtlasBank", "FusionConfig", "FusionResult", "LongitudinalSeries",
    "PhantomSpec", "Volume", "WeightVector",
    "concentric_spec", "fuse", "generate_phantom", "make_dummy_pairs",
    "normalize_intensity", "read_volume", "solve_weights", "weighted_vote",
    "write_volume",
]
