from __future__ import annotations

import numpy as np
import pytest

from longfuse.dependency import temporal_penalty
from longfuse.errors import GeometryError, PhantomError
from longfuse.patches import PatchSpec
from longfuse.phantom import (Ellipsoid, PhantomSpec, boundary_flip,
                              concentric_spec, dummy_bank, generate_phantom,
                              load_spec, make_dummy_pairs, render_truth,
                              save_spec, spec_from_dict, spec_to_dict)
from longfuse.volume import LongitudinalSeries

from .conftest import intensity_volume


def test_concentric_spec_geometry():
    spec = concentric_spec(dims=(20, 20, 20), k=2, n=3, labels=3)
    assert spec.labels == (1, 2, 3)
    assert spec.k == 2 and spec.n == 3
    assert spec.label_means[0] == 0.0
    assert spec.label_means[3] == 1.0
    assert spec.time_intensity_offsets == (0.0, 0.0)
    for s in spec.structures:
        assert s.center == (9.5, 9.5, 9.5)
        assert len(s.time_scales) == 2


def test_concentric_spec_label_count_limits():
    with pytest.raises(PhantomError):
        concentric_spec(labels=0)
    with pytest.raises(PhantomError):
        concentric_spec(labels=6)


def test_spec_validation():
    ell = Ellipsoid(1, (5.0, 5.0, 5.0), (2.0, 2.0, 2.0), (1.0,))
    with pytest.raises(PhantomError, match="k >= 1"):
        PhantomSpec(dims=(11, 11, 11), k=0, n=1, structures=(ell,),
                    label_means={0: 0.0, 1: 1.0})
    with pytest.raises(PhantomError, match="structure"):
        PhantomSpec(dims=(11, 11, 11), k=1, n=1, structures=(),
                    label_means={0: 0.0})
    with pytest.raises(PhantomError, match="background"):
        PhantomSpec(dims=(11, 11, 11), k=1, n=1, structures=(ell,),
                    label_means={1: 1.0})
    with pytest.raises(PhantomError, match="no intensity mean"):
        PhantomSpec(dims=(11, 11, 11), k=1, n=1, structures=(ell,),
                    label_means={0: 0.0})
    with pytest.raises(PhantomError, match="time scales"):
        PhantomSpec(dims=(11, 11, 11), k=2, n=1, structures=(ell,),
                    label_means={0: 0.0, 1: 1.0})
    with pytest.raises(PhantomError, match="error_rate"):
        PhantomSpec(dims=(11, 11, 11), k=1, n=1, structures=(ell,),
                    label_means={0: 0.0, 1: 1.0}, atlas_label_error_rate=1.5)
    with pytest.raises(PhantomError, match="bounds"):
        PhantomSpec(dims=(8, 8, 8), k=1, n=1,
                    structures=(Ellipsoid(1, (4.0, 4.0, 4.0),
                                          (6.0, 2.0, 2.0), (1.0,)),),
                    label_means={0: 0.0, 1: 1.0})
    with pytest.raises(PhantomError, match="offsets"):
        PhantomSpec(dims=(11, 11, 11), k=1, n=1, structures=(ell,),
                    label_means={0: 0.0, 1: 1.0},
                    time_intensity_offsets=(0.0, 0.1))


def test_render_truth_nesting_and_shrink():
    spec = concentric_spec(dims=(24, 24, 24), k=3, n=1, labels=2, shrink=0.1)
    t0 = render_truth(spec, 0)
    # inner structure overwrites the outer one
    assert set(np.unique(t0)) == {0, 1, 2}
    center = tuple(int(c) for c in spec.structures[0].center)
    assert t0[center] == 2
    counts = [(render_truth(spec, t) != 0).sum() for t in range(3)]
    assert counts[0] > counts[1] > counts[2]


def test_noise_free_phantom_matches_truth_exactly():
    spec = concentric_spec(dims=(14, 14, 14), k=2, n=2, noise_sigma=0.0,
                           atlas_label_error_rate=0.0,
                           atlas_intensity_sigma=0.0)
    series, truths, bank = generate_phantom(spec)
    lut = np.array([spec.label_means[l] for l in (0,) + spec.labels])
    for t in range(2):
        assert np.array_equal(series.targets[t].data, lut[truths[t].data])
        for img, lab in bank.pairs[bank.block(t)]:
            assert np.array_equal(lab.data, truths[t].data)
            assert np.array_equal(img.data, lut[truths[t].data])


def test_generation_is_seed_deterministic():
    spec = concentric_spec(dims=(12, 12, 12), k=2, n=2, seed=13)
    a_series, a_truths, a_bank = generate_phantom(spec)
    b_series, b_truths, b_bank = generate_phantom(spec)
    for t in range(2):
        assert np.array_equal(a_series.targets[t].data, b_series.targets[t].data)
        assert np.array_equal(a_truths[t].data, b_truths[t].data)
    for (ai, al), (bi, bl) in zip(a_bank.pairs, b_bank.pairs):
        assert np.array_equal(ai.data, bi.data)
        assert np.array_equal(al.data, bl.data)
    c_series, _, _ = generate_phantom(concentric_spec(
        dims=(12, 12, 12), k=2, n=2, seed=14))
    assert not np.array_equal(a_series.targets[0].data,
                              c_series.targets[0].data)


def test_boundary_flip_rate_zero_is_identity(rng):
    labels = render_truth(concentric_spec(dims=(14, 14, 14), k=1, n=1), 0)
    out = boundary_flip(labels, 0.0, rng)
    assert out is not labels
    assert np.array_equal(out, labels)


def _boundary_mask(labels):
    padded = np.pad(labels, 1, mode="edge")
    core = (slice(1, -1),) * 3
    differs = np.zeros(labels.shape, dtype=bool)
    for axis in range(3):
        for delta in (-1, 1):
            sl = list(core)
            sl[axis] = slice(1 + delta, padded.shape[axis] - 1 + delta)
            differs |= padded[tuple(sl)] != labels
    return differs


def test_boundary_flip_changes_only_boundary(rng):
    spec = concentric_spec(dims=(16, 16, 16), k=1, n=1, labels=2)
    labels = render_truth(spec, 0)
    out = boundary_flip(labels, 1.0, rng)
    changed = out != labels
    assert changed.any()
    # only voxels with a differing 6-neighbor may flip
    assert not (changed & ~_boundary_mask(labels)).any()
    # a flip takes the value of a differing neighbor
    padded = np.pad(labels, 1, mode="edge")
    for x, y, z in np.argwhere(changed):
        neigh = {int(padded[x, y + 1, z + 1]), int(padded[x + 2, y + 1, z + 1]),
                 int(padded[x + 1, y, z + 1]), int(padded[x + 1, y + 2, z + 1]),
                 int(padded[x + 1, y + 1, z]), int(padded[x + 1, y + 1, z + 2])}
        assert int(out[x, y, z]) in neigh
        assert int(out[x, y, z]) != int(labels[x, y, z])


def test_make_dummy_pairs_shares_outlier():
    spec = concentric_spec(dims=(12, 12, 12), k=3, n=1)
    series, _, _ = generate_phantom(spec)
    outlier = intensity_volume(np.zeros((12, 12, 12)))
    pairs = make_dummy_pairs(series, outlier)
    assert len(pairs) == 3
    for t, two in enumerate(pairs):
        assert two.k == 2
        assert two.targets[0] is series.targets[t]
        assert two.targets[1] is outlier


def test_make_dummy_pairs_validates_outlier():
    spec = concentric_spec(dims=(12, 12, 12), k=2, n=1)
    series, truths, _ = generate_phantom(spec)
    with pytest.raises(GeometryError, match="intensity"):
        make_dummy_pairs(series, truths[0])
    small = intensity_volume(np.zeros((6, 6, 6)))
    with pytest.raises(GeometryError, match="grid"):
        make_dummy_pairs(series, small)


def test_dummy_bank_layout():
    spec = concentric_spec(dims=(12, 12, 12), k=2, n=2)
    _, _, bank = generate_phantom(spec)
    out_spec = concentric_spec(dims=(12, 12, 12), k=1, n=2, seed=77)
    _, _, out_bank = generate_phantom(out_spec)
    two = dummy_bank(bank, 1, out_bank.pairs)
    assert two.k == 2 and two.n == 2
    assert two.pairs[:2] == bank.pairs[bank.block(1)]
    assert two.pairs[2:] == out_bank.pairs
    with pytest.raises(GeometryError, match="outlier pairs"):
        dummy_bank(bank, 0, out_bank.pairs[:1])


def test_outlier_equal_to_target_has_unit_penalties():
    # a dummy pair whose second scan is the target itself: every penalty
    # numerator is zero, so nothing is down-weighted
    spec = concentric_spec(dims=(12, 12, 12), k=1, n=2, seed=21)
    series, _, bank = generate_phantom(spec)
    target = series.targets[0]
    two = LongitudinalSeries((target, target))
    bank2 = dummy_bank(bank, 0, bank.pairs)
    ps = PatchSpec(1, 1)
    for i in range(bank2.m):
        for t in range(2):
            p = temporal_penalty(two, bank2, t, i, (6, 6, 6), ps, 100.0, 1e-6)
            assert p == 1.0


def test_spec_dict_roundtrip():
    spec = concentric_spec(dims=(16, 16, 16), k=2, n=3, seed=5,
                           shrink=0.08, noise_sigma=0.02,
                           time_intensity_offsets=(0.0, 0.4))
    back = spec_from_dict(spec_to_dict(spec))
    assert back == spec


def test_spec_file_roundtrip(tmp_path):
    spec = concentric_spec(dims=(14, 14, 14), k=3, n=2, seed=9)
    path = tmp_path / "spec.json"
    save_spec(spec, path)
    assert load_spec(path) == spec
