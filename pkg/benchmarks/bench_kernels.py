"""Time the per-voxel system builder on the numpy and compiled backends.

Run from a checkout with the package installed:

    python benchmarks/bench_kernels.py --dims 24 --voxels 400
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from longfuse import backends
from longfuse.dependency import E_CAP
from longfuse.fusion import FusionConfig, _atlas_roles, _build_stack
from longfuse.patches import displacement_candidates, patch_offsets
from longfuse.phantom import concentric_spec, generate_phantom


def build_inputs(args):
    spec = concentric_spec(dims=(args.dims,) * 3, k=args.k, n=args.n,
                           seed=args.seed)
    series, _, bank = generate_phantom(spec)
    cfg = FusionConfig(mode=args.mode, patch_radius=args.patch_radius,
                       search_radius=args.search_radius)
    idx, refs, nums = _atlas_roles(cfg, bank, args.time)
    vols, img_pos = _build_stack(series, bank, idx)
    rng = np.random.default_rng(args.seed)
    lo = args.search_radius + args.patch_radius
    coords = rng.integers(lo, args.dims - lo, size=(args.voxels, 3))
    return (vols, img_pos,
            np.asarray(refs, dtype=np.intp), np.asarray(nums, dtype=np.intp),
            np.ascontiguousarray(coords, dtype=np.intp),
            patch_offsets(args.patch_radius),
            displacement_candidates(args.search_radius),
            cfg.beta, cfg.epsilon)


def run_backend(name, inputs, repeats):
    backend = backends.get_backend(name)
    backend.build_systems(*inputs)  # warm up
    best = float("inf")
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        grams, expo = backend.build_systems(*inputs)
        best = min(best, time.perf_counter() - start)
    return best, grams, expo


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dims", type=int, default=24)
    parser.add_argument("--k", type=int, default=2)
    parser.add_argument("--n", type=int, default=3)
    parser.add_argument("--mode", default="fourd_jlf",
                        choices=("jlf", "jlf_multi", "fourd_jlf"))
    parser.add_argument("--time", type=int, default=0)
    parser.add_argument("--patch-radius", type=int, default=2)
    parser.add_argument("--search-radius", type=int, default=3)
    parser.add_argument("--voxels", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    inputs = build_inputs(args)
    n_vox = inputs[4].shape[0]
    print(f"{args.mode}: {n_vox} voxels, {inputs[1].size} atlases, "
          f"patch r={args.patch_radius}, search r={args.search_radius}")

    available = backends.available()
    results = {}
    for name in ("numpy", "cython"):
        if not available.get(name):
            print(f"{name:>8}: not available")
            continue
        elapsed, grams, expo = run_backend(name, inputs, args.repeats)
        results[name] = (elapsed, grams, expo)
        print(f"{name:>8}: {elapsed * 1e3:8.2f} ms  "
              f"({n_vox / elapsed:10.0f} voxels/s)")

    if len(results) == 2:
        slow, fast = results["numpy"], results["cython"]
        print(f"speedup: {slow[0] / fast[0]:.1f}x")
        pens = [np.exp(np.minimum(r[2], E_CAP)) for r in (slow, fast)]
        same = (np.array_equal(slow[1], fast[1])
                and np.array_equal(pens[0], pens[1]))
        print(f"backends agree bitwise: {same}")


if __name__ == "__main__":
    main()
