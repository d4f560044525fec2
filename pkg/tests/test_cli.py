import json

import numpy as np
import pytest

from pedloc import cli
from pedloc import dataset_io as dio
from pedloc import trn as T


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def synth_dir(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    assert run("synth", "--seed", 4, "--n", 120, "--noise", 1.0, "--out-dir", d) == 0
    return d


def test_synth_byte_identical(tmp_path, synth_dir):
    other = tmp_path / "again"
    other.mkdir()
    assert run("synth", "--seed", 4, "--n", 120, "--noise", 1.0, "--out-dir", other) == 0
    for name in ("keypoints.txt", "truth.txt", "manifest.json"):
        assert (synth_dir / name).read_bytes() == (other / name).read_bytes()
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["synth_config"]["pixel_noise_sigma"] == 1.0
    with open(synth_dir / "keypoints.txt") as f:
        records = dio.read_keypoints(f)
    assert len(records) == 120 and all(r.gt_distance is not None for r in records)


def test_seed_required(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        run("synth", "--n", 3, "--out-dir", tmp_path)
    assert info.value.code == cli.EXIT_USAGE
    assert "--seed" in capsys.readouterr().err


def test_refuses_overwrite_without_force(synth_dir):
    before = (synth_dir / "keypoints.txt").read_bytes()
    assert run("synth", "--seed", 5, "--n", 10, "--out-dir", synth_dir) == cli.EXIT_USAGE
    assert (synth_dir / "keypoints.txt").read_bytes() == before
    assert run("synth", "--seed", 5, "--n", 10, "--out-dir", synth_dir, "--force") == 0
    assert (synth_dir / "keypoints.txt").read_bytes() != before


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text("# comment line\npixel_noise_sigma = 3.0  # trailing comment\nn=7\n", encoding="utf-8")
    out = tmp_path / "o"
    out.mkdir()
    assert run("synth", "--seed", 1, "--config", cfg, "--noise", 0.5, "--out-dir", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n"] == 7
    assert manifest["synth_config"]["pixel_noise_sigma"] == 0.5
    cfg.write_text("no_such_key=1\n")
    assert run("synth", "--seed", 1, "--config", cfg, "--out-dir", out, "--force") == cli.EXIT_USAGE


def _train(synth_dir, out, *extra):
    return run("train-loc", "--seed", 2, "--data", synth_dir / "keypoints.txt", "--model", out / "m.json",
               "--log", out / "log.jsonl", "--epochs", 3, "--set", "hidden_dim=16", *extra)


def test_train_eval_infer(tmp_path, synth_dir, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert _train(synth_dir, a) == 0
    assert _train(synth_dir, b) == 0
    assert (a / "m.json").read_bytes() == (b / "m.json").read_bytes()
    assert (a / "log.jsonl").read_bytes() == (b / "log.jsonl").read_bytes()
    log = [json.loads(line) for line in (a / "log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in log] == [0, 1, 2]

    capsys.readouterr()
    assert run("eval-loc", "--model", a / "m.json", "--data", synth_dir / "keypoints.txt",
               "--csv", a / "r.csv", "--report", a / "r.txt", "--geometric-height", 1.7) == 0
    out = capsys.readouterr().out
    assert "johnson_su" in out and "geometric" in out and "ties to smaller" in out
    assert (a / "r.csv").read_text().startswith("method,bin_center,count,ale_m\n")

    assert run("infer-loc", "--model", a / "m.json", "--data", synth_dir / "keypoints.txt",
               "--out", a / "pred.txt") == 0
    lines = (a / "pred.txt").read_text().splitlines()
    assert len(lines) == 121
    rid, dist, lo, hi = lines[1].split()
    assert float(lo) < float(dist) < float(hi)


def test_infer_warns_on_under_visible_record(tmp_path, synth_dir, capsys):
    assert _train(synth_dir, tmp_path) == 0
    joints = np.zeros((17, 3))
    joints[:3, 2] = 1.0
    bad = dio.KeypointRecord(9, 9, joints, (0, 0, 1, 1))
    with open(synth_dir / "keypoints.txt") as f:
        records = dio.read_keypoints(f)[:2] + [bad]
    path = tmp_path / "mixed.txt"
    with open(path, "w") as f:
        dio.write_keypoints(records, f)
    capsys.readouterr()
    assert run("infer-loc", "--model", tmp_path / "m.json", "--data", path) == 0
    captured = capsys.readouterr()
    assert "9:9 error" in captured.out
    assert "1 record(s)" in captured.err


def test_ingest_renders_published_row(capsys):
    from importlib import resources
    path = resources.files("pedloc").joinpath("data/kitti_ale_reference.csv")
    assert run("eval-loc", "--ingest", path) == 0
    out = capsys.readouterr().out
    (row,) = [line for line in out.splitlines() if line.startswith("Ours")]
    assert row.split() == ["Ours", "0.49", "0.63", "0.96", "1.16", "1.55", "1.35", "2.92", "-"]


def test_data_errors(tmp_path, synth_dir):
    bad = tmp_path / "bad.txt"
    bad.write_text("# pedloc-keypoints v1\n1 2 3\n")
    assert run("train-loc", "--seed", 0, "--data", bad, "--model", tmp_path / "m.json") == cli.EXIT_DATA
    assert run("train-loc", "--seed", 0, "--data", tmp_path / "missing.txt",
               "--model", tmp_path / "m.json") == cli.EXIT_DATA
    (tmp_path / "m.json").write_text('{"format": "pedloc-locnet", "version": 1')
    assert run("infer-loc", "--model", tmp_path / "m.json", "--data", synth_dir / "keypoints.txt") == cli.EXIT_DATA
    assert not (tmp_path / "m2.json").exists()


def test_numerical_failure_exit_code(tmp_path, synth_dir):
    with open(synth_dir / "keypoints.txt") as f:
        records = dio.read_keypoints(f)
    from dataclasses import replace
    huge = [replace(r, gt_distance=1e200) for r in records]
    path = tmp_path / "huge.txt"
    with open(path, "w") as f:
        dio.write_keypoints(huge, f)
    code = run("train-loc", "--seed", 0, "--data", path, "--model", tmp_path / "m.json",
               "--loss", "gaussian", "--epochs", 2)
    assert code == cli.EXIT_NUMERIC
    assert not (tmp_path / "m.json").exists()


def test_trn_workflow(tmp_path, capsys):
    tr, va, model = tmp_path / "tr.bin", tmp_path / "va.txt", tmp_path / "trn.json"
    common = ("--frames", 4, "--dim", 3, "--classes", 4)
    assert run("trn", "synth-motif", "--seed", 1, "--n", 200, *common, "--out", tr) == 0
    assert run("trn", "synth-motif", "--seed", 2, "--n", 80, *common, "--out", va, "--text") == 0
    x, labels = T.read_features(va)
    assert x.shape == (80, 4, 1, 3) and len(labels) == 80
    args = ("trn", "train", "--seed", 3, "--train", tr, "--val", va, "--epochs", 3,
            "--set", "g_hidden=8", "--set", "tuples_per_scale=3")
    assert run(*args, "--model", model) == 0
    assert run(*args, "--model", tmp_path / "again.json") == 0
    assert model.read_bytes() == (tmp_path / "again.json").read_bytes()
    capsys.readouterr()
    assert run("trn", "eval", "--model", model, "--data", va) == 0
    assert "Accuracy (%):" in capsys.readouterr().out
    assert run("trn", "eval", "--model", model, "--data", tr.with_suffix(".none")) == cli.EXIT_DATA


def test_trn_span_needs_fewer_classes(tmp_path):
    code = run("trn", "synth-motif", "--seed", 1, "--n", 5, "--variant", "span", "--out", tmp_path / "x.bin")
    assert code == cli.EXIT_USAGE
    assert run("trn", "synth-motif", "--seed", 1, "--n", 5, "--variant", "span", "--classes", 7,
               "--out", tmp_path / "x.bin") == 0


def test_no_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        run()
    assert info.value.code == cli.EXIT_USAGE
