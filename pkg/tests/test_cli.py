from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from longfuse.cli import main
from longfuse.manifest import read_manifest, sha256_of
from longfuse.volume import read_volume


def run(*args):
    return main([str(a) for a in args])


def make_phantom(tmp_path, name="ph", **kw):
    out = tmp_path / name
    args = ["phantom", "--out-dir", out,
            "--dims", kw.pop("dx", 12), kw.pop("dy", 12), kw.pop("dz", 12),
            "--k", kw.pop("k", 1), "--n", kw.pop("n", 2),
            "--seed", kw.pop("seed", 0)]
    for flag, value in kw.items():
        args += [f"--{flag.replace('_', '-')}", value]
    assert run(*args) == 0
    return out


def fuse_args(ph, out_prefix, mode="jlf", **extra):
    bank = json.loads((ph / "bank.json").read_text())
    images = [ph / entry["image"] for entry in bank["order"]]
    labels = [ph / entry["labels"] for entry in bank["order"]]
    k = bank["k"]
    targets = [ph / f"target_t{t + 1}.nii.gz" for t in range(k)]
    args = ["fuse", "--mode", mode, "--targets", *targets,
            "--atlas-images", *images, "--atlas-labels", *labels,
            "--patch-radius", 1, "--search-radius", 1,
            "--per-time-atlases", "--out-prefix", out_prefix]
    for flag, value in extra.items():
        args += [f"--{flag.replace('_', '-')}", value]
    return args


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0
    assert "longfuse" in capsys.readouterr().out


def test_no_command_is_usage_error(capsys):
    assert run() == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert run("fuse", "--bogus") == 1


def test_fuse_requires_targets(capsys):
    assert run("fuse", "--atlas-images", "a.nii", "--atlas-labels", "b.nii",
               "--out-prefix", "x") == 1
    assert "--targets" in capsys.readouterr().err


def test_phantom_writes_expected_files(tmp_path):
    ph = make_phantom(tmp_path, k=2, n=2)
    names = {p.name for p in ph.iterdir()}
    expected = {"spec.json", "bank.json", "manifest.json"}
    for t in (1, 2):
        expected |= {f"target_t{t}.nii.gz", f"truth_t{t}.nii.gz"}
        for a in (1, 2):
            expected |= {f"atlas_t{t}_a{a}_image.nii.gz",
                         f"atlas_t{t}_a{a}_labels.nii.gz"}
    assert names == expected
    bank = json.loads((ph / "bank.json").read_text())
    assert bank["n"] == 2 and bank["k"] == 2
    assert [e["time_point"] for e in bank["order"]] == [1, 1, 2, 2]
    manifest = read_manifest(ph / "manifest.json")
    assert manifest["command"] == "phantom"


def test_phantom_output_is_deterministic(tmp_path):
    a = make_phantom(tmp_path, name="a", k=2, n=2, seed=4)
    b = make_phantom(tmp_path, name="b", k=2, n=2, seed=4)
    for path in sorted(a.glob("*.nii.gz")):
        assert path.read_bytes() == (b / path.name).read_bytes()
    assert (a / "spec.json").read_bytes() == (b / "spec.json").read_bytes()


def test_phantom_invalid_spec_is_input_error(tmp_path, capsys):
    assert run("phantom", "--out-dir", tmp_path / "x",
               "--error-rate", 1.5) == 2
    assert "error" in capsys.readouterr().err
    assert run("phantom", "--out-dir", tmp_path / "y", "--k", 0) == 2


def test_phantom_spec_file_reproduces_run(tmp_path):
    a = make_phantom(tmp_path, name="a", k=2, n=2, seed=9)
    out = tmp_path / "b"
    assert run("phantom", "--spec", a / "spec.json", "--out-dir", out) == 0
    for path in sorted(a.glob("*.nii.gz")):
        assert path.read_bytes() == (out / path.name).read_bytes()


def test_fuse_single_time_point_4djlf_notice(tmp_path, capsys):
    ph = make_phantom(tmp_path, k=1, n=2)
    assert run(*fuse_args(ph, tmp_path / "four", mode="4djlf")) == 0
    assert "single time point" in capsys.readouterr().err
    assert run(*fuse_args(ph, tmp_path / "plain", mode="jlf")) == 0
    assert "single time point" not in capsys.readouterr().err
    four = (tmp_path / "four_t1.nii.gz").read_bytes()
    plain = (tmp_path / "plain_t1.nii.gz").read_bytes()
    assert four == plain


def test_fuse_writes_manifest_with_hashes(tmp_path, capsys):
    ph = make_phantom(tmp_path, k=1, n=2)
    prefix = tmp_path / "seg"
    assert run(*fuse_args(ph, prefix, mode="jlf")) == 0
    out = capsys.readouterr().out
    assert "t1:" in out and "masked" in out
    manifest = read_manifest(f"{prefix}_manifest.json")
    assert manifest["command"] == "fuse"
    assert manifest["config"]["mode"] == "jlf"
    assert manifest["config"]["patch_radius"] == 1
    assert str(prefix) + "_t1.nii.gz" in manifest["outputs"]
    by_path = {i["path"]: i["sha256"] for i in manifest["inputs"]}
    target = str(ph / "target_t1.nii.gz")
    assert by_path[target] == sha256_of(target)
    assert "fuse_total" in manifest["timings_seconds"]


def test_fuse_output_matches_library_naming(tmp_path):
    ph = make_phantom(tmp_path, k=2, n=2)
    prefix = tmp_path / "seg"
    assert run(*fuse_args(ph, prefix, mode="jlf")) == 0
    for t in (1, 2):
        seg = read_volume(f"{prefix}_t{t}.nii.gz")
        assert seg.kind == "label"
        assert seg.dims == (12, 12, 12)


def test_fuse_flags_override_config_file(tmp_path):
    ph = make_phantom(tmp_path, k=1, n=2)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mode": "jlf_multi", "beta": 5.0,
                               "normalize": False}))
    prefix = tmp_path / "seg"
    assert run(*fuse_args(ph, prefix, mode="jlf", config=cfg)) == 0
    manifest = read_manifest(f"{prefix}_manifest.json")
    assert manifest["config"]["mode"] == "jlf"  # flag wins
    assert manifest["config"]["beta"] == 5.0    # config fills the gap
    assert manifest["config"]["normalize"] is False


def test_fuse_config_file_errors(tmp_path, capsys):
    ph = make_phantom(tmp_path, k=1, n=2)
    assert run(*fuse_args(ph, tmp_path / "s", config=tmp_path / "nope.json")) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(*fuse_args(ph, tmp_path / "s", config=bad)) == 2
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    assert run(*fuse_args(ph, tmp_path / "s", config=arr)) == 2


def test_fuse_atlas_list_mismatch(tmp_path, capsys):
    ph = make_phantom(tmp_path, k=1, n=2)
    args = fuse_args(ph, tmp_path / "seg")
    drop = args.index("--atlas-labels") + 2
    assert run(*(args[:drop] + args[drop + 1:])) == 2
    assert "--atlas-labels" in capsys.readouterr().err


def test_fuse_per_time_atlases_must_divide(tmp_path, capsys):
    ph = make_phantom(tmp_path, k=2, n=2)
    args = fuse_args(ph, tmp_path / "seg")
    # drop one atlas pair: 3 pairs cannot split into 2 time blocks
    img_at = args.index("--atlas-images") + 2
    args = args[:img_at] + args[img_at + 1:]
    lab_at = args.index("--atlas-labels") + 2
    args = args[:lab_at] + args[lab_at + 1:]
    assert run(*args) == 2
    assert "divide" in capsys.readouterr().err


def test_fuse_replicated_bank_without_per_time_flag(tmp_path):
    ph = make_phantom(tmp_path, k=2, n=2)
    bank = json.loads((ph / "bank.json").read_text())
    first_block = bank["order"][:2]
    args = ["fuse", "--mode", "jlf",
            "--targets", ph / "target_t1.nii.gz", ph / "target_t2.nii.gz",
            "--atlas-images", *[ph / e["image"] for e in first_block],
            "--atlas-labels", *[ph / e["labels"] for e in first_block],
            "--patch-radius", 1, "--search-radius", 1,
            "--out-prefix", tmp_path / "rep"]
    assert run(*args) == 0
    assert (tmp_path / "rep_t2.nii.gz").exists()


def test_fuse_posteriors_and_backend_flags(tmp_path):
    ph = make_phantom(tmp_path, k=1, n=2)
    prefix = tmp_path / "post"
    args = fuse_args(ph, prefix, mode="jlf", backend="numpy")
    assert run(*args, "--posteriors") == 0
    probs = sorted(tmp_path.glob("post_t1_label*_prob.nii.gz"))
    assert probs
    total = sum(read_volume(p).data.astype(np.float64) for p in probs)
    assert np.allclose(total, 1.0, atol=1e-5)


def test_eval_identical_fused_and_truth(tmp_path):
    # 16^3 so every sphere shell is thick enough to own voxels
    ph = make_phantom(tmp_path, k=2, n=2, dx=16, dy=16, dz=16)
    out = tmp_path / "metrics"
    assert run("eval", "--fused", f"jlf={ph}/truth",
               "--truth", f"{ph}/truth", "--out-dir", out) == 0
    dice_rows = read_rows(out / "dice_vs_truth.csv")
    assert dice_rows
    assert all(float(r["dice"]) == 1.0 for r in dice_rows)
    repro_rows = read_rows(out / "reproducibility.csv")
    assert {r["mode"] for r in repro_rows} == {"jlf"}
    traj_rows = read_rows(out / "trajectories.csv")
    assert {r["region"] for r in traj_rows} == {"1", "2", "3"}
    assert not (out / "stats.csv").exists()
    assert read_manifest(out / "manifest.json")["command"] == "eval"


def test_eval_two_modes_produce_stats(tmp_path):
    ph = make_phantom(tmp_path, k=2, n=2)
    out = tmp_path / "metrics"
    assert run("eval", "--fused", f"a={ph}/truth", "--fused", f"b={ph}/truth",
               "--truth", f"{ph}/truth", "--out-dir", out) == 0
    stats = read_rows(out / "stats.csv")
    assert {r["basis"] for r in stats} == {"reproducibility", "accuracy"}
    for r in stats:
        assert r["mode_a"] == "a" and r["mode_b"] == "b"


def test_eval_groups_and_label_selection(tmp_path):
    ph = make_phantom(tmp_path, k=2, n=2)
    out = tmp_path / "metrics"
    assert run("eval", "--fused", f"jlf={ph}/truth", "--labels", "1", "2",
               "--groups", "core=1,2", "--out-dir", out) == 0
    regions = {r["region"] for r in read_rows(out / "trajectories.csv")}
    assert regions == {"1", "2", "core"}


def test_eval_missing_series_is_input_error(tmp_path, capsys):
    assert run("eval", "--fused", f"jlf={tmp_path}/nothing",
               "--out-dir", tmp_path / "m") == 2
    assert "no files matching" in capsys.readouterr().err


def test_eval_bad_fused_syntax_is_usage_error(tmp_path):
    assert run("eval", "--fused", "prefix-without-mode",
               "--out-dir", tmp_path / "m") == 1


def test_experiment_both_studies(tmp_path):
    out = tmp_path / "exp"
    assert run("experiment", "--dims", 12, 12, 12, "--k", 2, "--n", 2,
               "--seeds", 5, "--modes", "jlf", "4djlf",
               "--study", "both", "--out-dir", out) == 0
    scores = read_rows(out / "experiment_scores.csv")
    assert len(scores) == 2 * 2 * 5  # study x mode x seed
    assert {r["study"] for r in scores} == {"reproducibility", "robustness"}
    assert {r["mode"] for r in scores} == {"jlf", "fourd_jlf"}
    stats = read_rows(out / "experiment_stats.csv")
    assert len(stats) == 2
    report = (out / "report.txt").read_text()
    assert "reproducibility" in report and "robustness" in report
    assert (out / "spec.json").exists()
    assert read_manifest(out / "manifest.json")["command"] == "experiment"


def test_experiment_single_mode_skips_stats(tmp_path):
    out = tmp_path / "exp"
    assert run("experiment", "--dims", 12, 12, 12, "--k", 2, "--n", 2,
               "--seeds", 5, "--modes", "jlf",
               "--study", "reproducibility", "--out-dir", out) == 0
    assert (out / "experiment_scores.csv").exists()
    assert not (out / "experiment_stats.csv").exists()


def test_experiment_runs_are_reproducible(tmp_path):
    common = ["experiment", "--dims", 12, 12, 12, "--k", 2, "--n", 2,
              "--seeds", 5, "--modes", "jlf", "--study", "reproducibility"]
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run(*common, "--out-dir", a) == 0
    assert run(*common, "--out-dir", b) == 0
    assert (a / "experiment_scores.csv").read_bytes() == \
        (b / "experiment_scores.csv").read_bytes()
    assert (a / "report.txt").read_bytes() == (b / "report.txt").read_bytes()
