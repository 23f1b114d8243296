from __future__ import annotations

import numpy as np
import pytest

from longfuse import backends
from longfuse.backends import numpy_backend
from longfuse.dependency import (E_CAP, build_4djlf_matrix, build_jlf_matrix,
                                 build_jlfmulti_matrix)
from longfuse.errors import LongfuseError
from longfuse.fusion import FusionConfig, _atlas_roles, _build_stack
from longfuse.patches import PatchSpec, displacement_candidates, patch_offsets
from longfuse.phantom import concentric_spec, generate_phantom


def test_numpy_backend_is_always_available():
    avail = backends.available()
    assert avail["numpy"] is True
    assert isinstance(avail["cython"], bool)


def test_compiled_backend_is_built():
    # the package ships a compiled kernel; a pure-python install would
    # silently lose the fast path, so the suite insists on it
    assert backends.available()["cython"] is True
    assert backends.get_backend("cython").name == "cython"


def test_backend_selection():
    assert backends.get_backend("numpy").name == "numpy"
    assert backends.get_backend("auto").name == "cython"
    with pytest.raises(LongfuseError, match="unknown backend"):
        backends.get_backend("fortran")


def test_backend_env_variable(monkeypatch):
    monkeypatch.setenv(backends.ENV_VAR, "numpy")
    assert backends.get_backend(None).name == "numpy"
    monkeypatch.setenv(backends.ENV_VAR, "cython")
    assert backends.get_backend(None).name == "cython"
    monkeypatch.delenv(backends.ENV_VAR)
    assert backends.get_backend(None).name == "cython"


def test_missing_compiled_backend(monkeypatch):
    monkeypatch.setattr(backends, "_load_compiled", lambda: None)
    assert backends.available() == {"numpy": True, "cython": False}
    assert backends.get_backend("auto").name == "numpy"
    with pytest.raises(LongfuseError, match="not.*built"):
        backends.get_backend("cython")


def _kernel_inputs(spec, mode, t, coords, patch_radius, search_radius,
                   multi_reference="target"):
    series, _, bank = generate_phantom(spec)
    cfg = FusionConfig(mode=mode, patch_radius=patch_radius,
                       search_radius=search_radius,
                       multi_reference=multi_reference)
    atlas_idx, ref_idx, num_idx = _atlas_roles(cfg, bank, t)
    stack, img_idx = _build_stack(series, bank, atlas_idx)
    return (series, bank, (stack, img_idx,
                           np.asarray(ref_idx, dtype=np.intp),
                           np.asarray(num_idx, dtype=np.intp),
                           np.asarray(coords, dtype=np.intp),
                           patch_offsets(patch_radius),
                           displacement_candidates(search_radius)))


@pytest.mark.parametrize("mode", ["jlf", "jlf_multi", "fourd_jlf"])
@pytest.mark.parametrize("radii", [(1, 1), (0, 2)])
def test_backends_agree_bitwise(mode, radii, rng):
    spec = concentric_spec(dims=(14, 14, 14), k=2, n=2, seed=11)
    coords = rng.integers(0, 14, size=(40, 3))
    _, _, args = _kernel_inputs(spec, mode, 1, coords, *radii)
    g_np, e_np = numpy_backend.build_systems(*args, 100.0, 1e-6)
    compiled = backends.get_backend("cython")
    g_cy, e_cy = compiled.build_systems(*args, 100.0, 1e-6)
    assert np.array_equal(g_np, g_cy)
    assert np.array_equal(e_np, e_cy)


def test_kernel_matches_reference_builders(rng):
    spec = concentric_spec(dims=(14, 14, 14), k=2, n=2, seed=12)
    ps = PatchSpec(1, 1)
    coords = [(7, 7, 7), (5, 9, 6), (0, 0, 0), (13, 13, 13), (4, 4, 10)]
    for backend_name in ("numpy", "cython"):
        backend = backends.get_backend(backend_name)

        series, bank, args = _kernel_inputs(spec, "fourd_jlf", 0, coords, 1, 1)
        grams, expo = backend.build_systems(*args, 100.0, 1e-6)
        pens = np.exp(np.minimum(expo, E_CAP))
        mats = grams * (pens[:, :, None] * pens[:, None, :])
        for v, x in enumerate(coords):
            ref = build_4djlf_matrix(series, bank, 0, x, ps, 100.0, 1e-6)
            assert np.array_equal(mats[v], ref.entries), (backend_name, x)

        series, bank, args = _kernel_inputs(spec, "jlf", 0, coords, 1, 1)
        grams, expo = backend.build_systems(*args, 100.0, 1e-6)
        assert np.array_equal(expo, np.zeros_like(expo))
        for v, x in enumerate(coords):
            ref = build_jlf_matrix(series, bank, 0, x, ps)
            assert np.array_equal(grams[v], ref.entries), (backend_name, x)

        series, bank, args = _kernel_inputs(spec, "jlf_multi", 1, coords, 1, 1)
        grams, _ = backend.build_systems(*args, 100.0, 1e-6)
        for v, x in enumerate(coords):
            ref = build_jlfmulti_matrix(series, bank, 1, x, ps)
            assert np.array_equal(grams[v], ref.entries), (backend_name, x)


def test_kernels_handle_empty_chunks():
    spec = concentric_spec(dims=(10, 10, 10), k=1, n=2, seed=0)
    _, _, args = _kernel_inputs(spec, "jlf", 0, np.zeros((0, 3)), 1, 1)
    for name in ("numpy", "cython"):
        grams, expo = backends.get_backend(name).build_systems(*args, 1.0, 1e-6)
        assert grams.shape == (0, 2, 2)
        assert expo.shape == (0, 2)


def test_exponents_are_raw_and_uncapped():
    # kernels report beta * sum(num/den) before the cap; the driver owns
    # the exp and the ceiling
    spec = concentric_spec(dims=(10, 10, 10), k=2, n=1, seed=3,
                           time_intensity_offsets=(0.0, 0.8),
                           noise_sigma=0.0, atlas_intensity_sigma=0.0,
                           atlas_label_error_rate=0.0)
    coords = [(5, 5, 5), (4, 4, 4)]
    _, _, args = _kernel_inputs(spec, "fourd_jlf", 0, coords, 1, 1)
    for name in ("numpy", "cython"):
        _, expo = backends.get_backend(name).build_systems(*args, 100.0, 1e-6)
        cross = expo[:, 1]
        assert (cross > E_CAP).all()
