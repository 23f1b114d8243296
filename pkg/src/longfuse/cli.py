"""Command-line surface: fuse, phantom, eval, and experiment subcommands.

Exit codes: 0 success, 1 usage error, 2 input validation failure,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (DegenerateMatrixError, FusionError, GeometryError,
                     LongfuseError, NiftiError, PhantomError)
from .experiment import (default_outlier_spec, reproducibility_experiment,
                         robustness_experiment)
from .fusion import MODES, FusionConfig, fuse
from .manifest import build_manifest, write_manifest
from .metrics import (cohens_d, dice, reproducibility, volume_trajectory,
                      wilcoxon_signed_rank, write_csv)
from .phantom import concentric_spec, generate_phantom, load_spec, save_spec
from .volume import (LABEL, AtlasBank, LongitudinalSeries, Volume,
                     normalize_intensity, read_volume, write_volume)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_RUNTIME = 3

_MODE_BY_FLAG = {"jlf": "jlf", "jlf-multi": "jlf_multi", "4djlf": "fourd_jlf"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad flags; we reserve 2 for input
    validation, so usage problems raise instead."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _mode_from(value: str) -> str:
    if value in _MODE_BY_FLAG:
        return _MODE_BY_FLAG[value]
    if value in MODES:
        return value
    raise UsageError(f"unknown mode {value!r} (choose from {sorted(_MODE_BY_FLAG)})")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"--config {path}: file not found")
    except json.JSONDecodeError as exc:
        raise ValueError(f"--config {path}: invalid JSON ({exc})")
    if not isinstance(cfg, dict):
        raise ValueError(f"--config {path}: top level must be an object")
    return cfg


def _pick(flag_value, config: dict, key: str, default):
    """Precedence: explicit flag > config file > built-in default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _read_intensity(path, normalize: bool) -> Volume:
    vol = read_volume(path)
    if vol.kind == LABEL:
        vol = vol.as_intensity()
    return normalize_intensity(vol) if normalize else vol


def _read_labels(path) -> Volume:
    vol = read_volume(path)
    if vol.kind != LABEL:
        raise ValueError(f"{path}: expected an integer label volume")
    return vol


# ---------------------------------------------------------------- fuse


def _add_fuse_args(sub):
    p = sub.add_parser("fuse", help="fuse atlas labels onto a target series")
    p.add_argument("--mode", choices=sorted(_MODE_BY_FLAG), default=None)
    p.add_argument("--targets", nargs="+", required=True,
                   metavar="NIFTI", help="target intensity images, time-ascending")
    p.add_argument("--atlas-images", nargs="+", required=True, metavar="NIFTI")
    p.add_argument("--atlas-labels", nargs="+", required=True, metavar="NIFTI")
    p.add_argument("--per-time-atlases", action="store_true",
                   help="atlas lists hold k blocks of n files (time-ascending) "
                        "instead of one block replicated at every time point")
    p.add_argument("--patch-radius", type=int, default=None)
    p.add_argument("--search-radius", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--mask", default=None,
                   help="union_nonzero, full, or a mask volume path")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--backend", choices=("auto", "numpy", "cython"), default=None)
    p.add_argument("--consensus-shortcut", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction,
                   default=None, help="percentile-normalize intensities (default on)")
    p.add_argument("--posteriors", action=argparse.BooleanOptionalAction,
                   default=None, help="also write per-label probability maps")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--config", default=None, metavar="JSON")
    p.set_defaults(func=cmd_fuse)


def cmd_fuse(args) -> int:
    config = _load_config_file(args.config)
    mode_raw = _pick(args.mode, config, "mode", "fourd_jlf")
    cfg = FusionConfig(
        mode=_mode_from(mode_raw),
        patch_radius=int(_pick(args.patch_radius, config, "patch_radius", 2)),
        search_radius=int(_pick(args.search_radius, config, "search_radius", 3)),
        alpha=float(_pick(args.alpha, config, "alpha", 0.1)),
        beta=float(_pick(args.beta, config, "beta", 100.0)),
        epsilon=float(_pick(args.epsilon, config, "epsilon", 1e-6)),
        consensus_shortcut=bool(_pick(args.consensus_shortcut, config,
                                      "consensus_shortcut", True)),
        workers=int(_pick(args.workers, config, "workers", 1)),
        backend=_pick(args.backend, config, "backend", None),
        emit_posteriors=bool(_pick(args.posteriors, config, "posteriors", False)),
    )
    normalize = bool(_pick(args.normalize, config, "normalize", True))
    mask_arg = _pick(args.mask, config, "mask", "union_nonzero")

    mask_vol = None
    if mask_arg in ("union_nonzero", "full"):
        cfg = FusionConfig(**{**asdict(cfg), "mask_policy": mask_arg})
    else:
        mask_vol = read_volume(mask_arg)
        cfg = FusionConfig(**{**asdict(cfg), "mask_policy": "explicit_mask"})

    if len(args.atlas_images) != len(args.atlas_labels):
        raise ValueError(
            f"--atlas-images has {len(args.atlas_images)} entries but "
            f"--atlas-labels has {len(args.atlas_labels)}")

    targets = [_read_intensity(p, normalize) for p in args.targets]
    series = LongitudinalSeries(tuple(targets))
    pairs = tuple(
        (_read_intensity(img, normalize), _read_labels(lab))
        for img, lab in zip(args.atlas_images, args.atlas_labels))

    k = series.k
    if args.per_time_atlases:
        if len(pairs) % k != 0:
            raise ValueError(
                f"--per-time-atlases: {len(pairs)} atlas pairs do not divide "
                f"into {k} time blocks")
        bank = AtlasBank(n=len(pairs) // k, k=k, pairs=pairs)
    else:
        bank = AtlasBank.replicated(pairs, k)

    if cfg.mode == "fourd_jlf" and k == 1:
        print("notice: single time point; fourd_jlf output equals jlf",
              file=sys.stderr)

    timings = {}
    started = time.perf_counter()
    results = fuse(series, bank, cfg, mask=mask_vol)
    timings["fuse_total"] = time.perf_counter() - started

    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs = []
    for r in results:
        out = Path(f"{prefix}_t{r.time + 1}.nii.gz")
        write_volume(r.segmentation, out)
        outputs.append(out)
        if r.posteriors is not None:
            for lab, prob in sorted(r.posteriors.items()):
                pout = Path(f"{prefix}_t{r.time + 1}_label{lab}_prob.nii.gz")
                write_volume(Volume(prob.astype(np.float32),
                                    r.segmentation.spacing, "intensity"), pout)
                outputs.append(pout)
        s = r.stats
        print(f"t{r.time + 1}: {s.masked_voxels} masked, "
              f"{s.shortcut_voxels} shortcut, {s.solved_voxels} solved, "
              f"{s.solver_fallbacks} fallbacks [{s.backend}]")

    inputs = list(args.targets) + list(args.atlas_images) + list(args.atlas_labels)
    if mask_vol is not None:
        inputs.append(mask_arg)
    if args.config:
        inputs.append(args.config)
    snapshot = asdict(cfg)
    snapshot["normalize"] = normalize
    snapshot["mask"] = str(mask_arg)
    snapshot["per_time_atlases"] = bool(args.per_time_atlases)
    write_manifest(f"{prefix}_manifest.json",
                   build_manifest("fuse", snapshot, inputs, outputs, timings))
    return EXIT_OK


# ------------------------------------------------------------- phantom


def _add_phantom_spec_args(p):
    p.add_argument("--spec", default=None, metavar="JSON",
                   help="phantom spec document (overrides inline flags)")
    p.add_argument("--dims", type=int, nargs=3, default=None)
    p.add_argument("--k", type=int, default=None, help="time points")
    p.add_argument("--n", type=int, default=None, help="atlases per time point")
    p.add_argument("--labels", type=int, default=None, help="nested structures")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shrink", type=float, default=None,
                   help="per-step radius shrink factor")
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--error-rate", type=float, default=None,
                   help="atlas boundary label flip probability")
    p.add_argument("--atlas-sigma", type=float, default=None)
    p.add_argument("--offsets", type=float, nargs="+", default=None,
                   help="per-time intensity offset added to targets")


def _spec_from_args(args):
    if args.spec is not None:
        return load_spec(args.spec)
    overrides = {}
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    if args.error_rate is not None:
        overrides["atlas_label_error_rate"] = args.error_rate
    if args.atlas_sigma is not None:
        overrides["atlas_intensity_sigma"] = args.atlas_sigma
    if args.offsets is not None:
        overrides["time_intensity_offsets"] = tuple(args.offsets)
    return concentric_spec(
        dims=tuple(args.dims) if args.dims else (32, 32, 32),
        k=args.k if args.k is not None else 3,
        n=args.n if args.n is not None else 4,
        seed=args.seed if args.seed is not None else 0,
        labels=args.labels if args.labels is not None else 3,
        shrink=args.shrink if args.shrink is not None else 0.05,
        **overrides)


def _add_phantom_args(sub):
    p = sub.add_parser("phantom", help="generate a synthetic longitudinal phantom")
    _add_phantom_spec_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_phantom)


def cmd_phantom(args) -> int:
    spec = _spec_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series, truths, bank = generate_phantom(spec)

    outputs = []
    spec_path = out_dir / "spec.json"
    save_spec(spec, spec_path)
    outputs.append(spec_path)
    for t in range(spec.k):
        tp = out_dir / f"target_t{t + 1}.nii.gz"
        write_volume(series.targets[t], tp)
        gp = out_dir / f"truth_t{t + 1}.nii.gz"
        write_volume(truths[t], gp)
        outputs += [tp, gp]

    order = []
    for i, (img, lab) in enumerate(bank.pairs):
        t = i // spec.n + 1
        j = i % spec.n + 1
        ip = out_dir / f"atlas_t{t}_a{j}_image.nii.gz"
        lp = out_dir / f"atlas_t{t}_a{j}_labels.nii.gz"
        write_volume(img, ip)
        write_volume(lab, lp)
        outputs += [ip, lp]
        order.append({"index": i + 1, "time_point": t,
                      "image": ip.name, "labels": lp.name})
    bank_path = out_dir / "bank.json"
    bank_path.write_text(json.dumps(
        {"n": spec.n, "k": spec.k, "layout": "block-major by time point",
         "order": order}, indent=2) + "\n")
    outputs.append(bank_path)

    write_manifest(out_dir / "manifest.json",
                   build_manifest("phantom", {"spec": str(spec_path)},
                                  [spec_path], outputs))
    print(f"phantom written to {out_dir} ({spec.k} time points, "
          f"{spec.n} atlases each)")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _add_eval_args(sub):
    p = sub.add_parser("eval", help="score fused segmentations")
    p.add_argument("--fused", action="append", required=True,
                   metavar="MODE=PREFIX",
                   help="per-mode prefix of <prefix>_t<t>.nii.gz files")
    p.add_argument("--truth", default=None, metavar="PREFIX",
                   help="prefix of ground-truth label files")
    p.add_argument("--labels", type=int, nargs="+", default=None)
    p.add_argument("--groups", action="append", default=None,
                   metavar="NAME=L1,L2,...",
                   help="label groups for volume trajectories")
    p.add_argument("--subject", default="subject")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)


def _collect_series(prefix: str) -> list[Path]:
    found = []
    t = 1
    while True:
        path = Path(f"{prefix}_t{t}.nii.gz")
        if not path.exists():
            path = Path(f"{prefix}_t{t}.nii")
            if not path.exists():
                break
        found.append(path)
        t += 1
    if not found:
        raise FileNotFoundError(f"no files matching {prefix}_t<t>.nii[.gz]")
    return found


def cmd_eval(args) -> int:
    fused: dict[str, list[Volume]] = {}
    for item in args.fused:
        if "=" not in item:
            raise UsageError(f"--fused expects MODE=PREFIX, got {item!r}")
        mode, prefix = item.split("=", 1)
        fused[mode] = [read_volume(p) for p in _collect_series(prefix)]
    counts = {m: len(v) for m, v in fused.items()}
    if len(set(counts.values())) != 1:
        raise ValueError(f"modes disagree on time point count: {counts}")
    k = next(iter(counts.values()))

    truth = None
    if args.truth:
        truth = [read_volume(p) for p in _collect_series(args.truth)]
        if len(truth) != k:
            raise ValueError(
                f"{len(truth)} truth volumes for {k} fused time points")

    if args.labels:
        labels = tuple(args.labels)
    else:
        labels = tuple(sorted(
            {int(l) for segs in fused.values() for s in segs
             for l in np.unique(s.data)} - {0}))
    if not labels:
        raise ValueError("no nonzero labels found to evaluate")

    groups = {}
    for item in args.groups or []:
        if "=" not in item:
            raise UsageError(f"--groups expects NAME=L1,L2,..., got {item!r}")
        name, members = item.split("=", 1)
        groups[name] = [int(v) for v in members.split(",") if v]

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    if truth is not None:
        rows = []
        for mode, segs in sorted(fused.items()):
            for t in range(k):
                per = [dice(segs[t], truth[t], l) for l in labels]
                rows += [{"subject": args.subject, "mode": mode, "time": t + 1,
                          "label": l, "dice": d} for l, d in zip(labels, per)]
                rows.append({"subject": args.subject, "mode": mode,
                             "time": t + 1, "label": "mean",
                             "dice": sum(per) / len(per)})
        path = out_dir / "dice_vs_truth.csv"
        write_csv(path, rows, ["subject", "mode", "time", "label", "dice"])
        outputs.append(path)

    repro_samples: dict[str, list[float]] = {}
    rows = []
    if k >= 2:
        for mode, segs in sorted(fused.items()):
            matrix = reproducibility(segs, labels).values
            samples = []
            for s in range(k):
                for t in range(s + 1, k):
                    rows.append({"subject": args.subject, "mode": mode,
                                 "time_a": s + 1, "time_b": t + 1,
                                 "mean_dice": matrix[s, t]})
                    samples += [dice(segs[s], segs[t], l) for l in labels]
            repro_samples[mode] = samples
        path = out_dir / "reproducibility.csv"
        write_csv(path, rows,
                  ["subject", "mode", "time_a", "time_b", "mean_dice"])
        outputs.append(path)

    rows = []
    for mode, segs in sorted(fused.items()):
        traj = volume_trajectory(segs, labels, groups)
        for l, series_vals in traj["per_label"].items():
            rows += [{"subject": args.subject, "mode": mode, "time": t + 1,
                      "region": l, "volume_mm3": v}
                     for t, v in enumerate(series_vals)]
        for name, series_vals in traj["groups"].items():
            rows += [{"subject": args.subject, "mode": mode, "time": t + 1,
                      "region": name, "volume_mm3": v}
                     for t, v in enumerate(series_vals)]
    path = out_dir / "trajectories.csv"
    write_csv(path, rows, ["subject", "mode", "time", "region", "volume_mm3"])
    outputs.append(path)

    rows = []
    modes = sorted(fused)
    for a_pos, mode_a in enumerate(modes):
        for mode_b in modes[a_pos + 1:]:
            bases = []
            if repro_samples:
                bases.append(("reproducibility", repro_samples[mode_a],
                              repro_samples[mode_b]))
            if truth is not None:
                acc = {m: [dice(fused[m][t], truth[t], l)
                           for t in range(k) for l in labels]
                       for m in (mode_a, mode_b)}
                bases.append(("accuracy", acc[mode_a], acc[mode_b]))
            for basis, xs, ys in bases:
                try:
                    p_val = wilcoxon_signed_rank(xs, ys)
                except ValueError:
                    p_val = float("nan")
                rows.append({"subject": args.subject, "basis": basis,
                             "mode_a": mode_a, "mode_b": mode_b,
                             "n": len(xs), "wilcoxon_p": p_val,
                             "cohens_d": cohens_d(xs, ys)})
    if rows:
        path = out_dir / "stats.csv"
        write_csv(path, rows, ["subject", "basis", "mode_a", "mode_b", "n",
                               "wilcoxon_p", "cohens_d"])
        outputs.append(path)

    write_manifest(out_dir / "manifest.json",
                   build_manifest("eval",
                                  {"fused": args.fused, "truth": args.truth,
                                   "labels": list(labels)},
                                  [], outputs))
    print(f"wrote {len(outputs)} metric files to {out_dir}")
    return EXIT_OK


# ----------------------------------------------------------- experiment


def _add_experiment_args(sub):
    p = sub.add_parser("experiment",
                       help="phantom studies: reproducibility and robustness")
    _add_phantom_spec_args(p)
    p.add_argument("--study", choices=("reproducibility", "robustness", "both"),
                   default="both")
    p.add_argument("--modes", nargs="+", choices=sorted(_MODE_BY_FLAG),
                   default=sorted(_MODE_BY_FLAG))
    p.add_argument("--seeds", type=int, default=10, help="number of phantom seeds")
    p.add_argument("--patch-radius", type=int, default=1)
    p.add_argument("--search-radius", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=100.0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--backend", choices=("auto", "numpy", "cython"), default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)


def cmd_experiment(args) -> int:
    spec = _spec_from_args(args)
    modes = [_mode_from(m) for m in args.modes]
    seeds = tuple(range(spec.seed, spec.seed + args.seeds))
    base = FusionConfig(mode=modes[0], patch_radius=args.patch_radius,
                        search_radius=args.search_radius, alpha=args.alpha,
                        beta=args.beta, epsilon=args.epsilon,
                        workers=args.workers, backend=args.backend)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = []
    timings = {}
    if args.study in ("reproducibility", "both"):
        start = time.perf_counter()
        tables.append(reproducibility_experiment(spec, modes, seeds, base))
        timings["reproducibility"] = time.perf_counter() - start
    if args.study in ("robustness", "both"):
        start = time.perf_counter()
        tables.append(robustness_experiment(
            spec, default_outlier_spec(spec), modes, seeds, base))
        timings["robustness"] = time.perf_counter() - start

    outputs = []
    score_rows = [row for tab in tables for row in tab.rows()]
    path = out_dir / "experiment_scores.csv"
    write_csv(path, score_rows, ["study", "mode", "seed", "score"])
    outputs.append(path)

    stat_rows = [row for tab in tables for row in tab.comparisons]
    if stat_rows:
        path = out_dir / "experiment_stats.csv"
        write_csv(path, stat_rows, ["study", "mode_a", "mode_b", "mean_a",
                                    "mean_b", "wilcoxon_p", "cohens_d"])
        outputs.append(path)

    lines = [f"longfuse experiment report (seeds {seeds[0]}..{seeds[-1]})", ""]
    for tab in tables:
        lines.append(f"== {tab.study} ==")
        for mode, vals in tab.per_seed.items():
            arr = np.asarray(vals)
            lines.append(f"  {mode:10s} mean={arr.mean():.4f} sd={arr.std(ddof=1):.4f}"
                         if arr.size > 1 else f"  {mode:10s} mean={arr.mean():.4f}")
        for c in tab.comparisons:
            lines.append(f"  {c['mode_a']} vs {c['mode_b']}: "
                         f"p={c['wilcoxon_p']:.4g} d={c['cohens_d']:.3f}")
        lines.append("")
    report = out_dir / "report.txt"
    report.write_text("\n".join(lines) + "\n")
    outputs.append(report)

    spec_path = out_dir / "spec.json"
    save_spec(spec, spec_path)
    outputs.append(spec_path)
    write_manifest(out_dir / "manifest.json",
                   build_manifest("experiment",
                                  {"study": args.study, "modes": modes,
                                   "seeds": list(seeds)},
                                  [spec_path], outputs, timings))
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="longfuse",
                     description="longitudinal multi-atlas label fusion")
    parser.add_argument("--version", action="version",
                        version=f"longfuse {__version__}")
    sub = parser.add_subparsers(dest="command")
    _add_fuse_args(sub)
    _add_phantom_args(sub)
    _add_eval_args(sub)
    _add_experiment_args(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError(parser.format_usage())
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (NiftiError, GeometryError, PhantomError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FusionError, DegenerateMatrixError, LongfuseError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
