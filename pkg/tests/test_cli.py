import json

import numpy as np
import pytest

from hsurf import io
from hsurf.cli import main


@pytest.fixture
def synth_dir(tmp_path):
    d = tmp_path / "data"
    assert main(["synth", "--shapes", "sphere:1,quadric:1", "--sigma", "0", "--samples", "300",
                 "--seed", "1", "--out", str(d)]) == 0
    assert main(["synth", "--shapes", "sphere:1,quadric:1", "--sigma", "0.005", "--samples", "300",
                 "--seed", "1", "--out", str(d)]) == 0
    return d


def test_synth_emits_pairs(synth_dir):
    xyz = sorted(synth_dir.glob("*.xyz"))
    assert len(xyz) == 4
    for f in xyz:
        assert f.with_suffix(".normals").exists()
        assert len(f.read_text().splitlines()) == 300
    labels = {v["corruption"] for v in io.read_manifest(synth_dir).values()}
    assert labels == {"sigma=0", "sigma=0.005"}


def test_estimate_pca_on_plane_fixture(fixtures_dir, tmp_path):
    out = tmp_path / "plane.normals"
    assert main(["estimate", "--method", "pca", "--input", str(fixtures_dir / "plane.xyz"),
                 "--patch-size", "16", "--out", str(out)]) == 0
    n = np.loadtxt(out)
    assert len(n) == len((fixtures_dir / "plane.xyz").read_text().splitlines())
    np.testing.assert_allclose(np.abs(n), np.tile([0, 0, 1.0], (len(n), 1)), atol=1e-12)


@pytest.mark.parametrize("method", ["jet:2", "hsurf"])
def test_estimate_line_count(fixtures_dir, tmp_path, method):
    out = tmp_path / "n.normals"
    args = ["estimate", "--method", method, "--input", str(fixtures_dir / "sphere.xyz"), "--out", str(out)]
    args += ["--checkpoint", str(fixtures_dir / "tiny_init.ckpt")] if method == "hsurf" else ["--patch-size", "24"]
    assert main(args) == 0
    assert len(out.read_text().splitlines()) == 150


def test_estimate_normals_in_world_frame(fixtures_dir, tmp_path):
    out = tmp_path / "n.normals"
    assert main(["estimate", "--method", "jet:2", "--input", str(fixtures_dir / "sphere.xyz"),
                 "--patch-size", "24", "--out", str(out)]) == 0
    pts = np.loadtxt(fixtures_dir / "sphere.xyz")
    n = np.loadtxt(out)
    cos = np.abs(np.sum(n * pts / np.linalg.norm(pts, axis=1, keepdims=True), axis=1))
    assert np.median(cos) > 0.999


def test_bench_rows_and_report(synth_dir, tmp_path, capsys):
    report = tmp_path / "r.json"
    assert main(["bench", "--data", str(synth_dir), "--methods", "pca,jet:2", "--patch-size", "32",
                 "--queries-per-shape", "30", "--report", str(report)]) == 0
    rows = capsys.readouterr().out.strip().splitlines()[2:]
    assert sorted((r.split()[0], r.split()[1]) for r in rows) == sorted(
        (m, c) for m in ("pca", "jet:2") for c in ("sigma=0", "sigma=0.005"))
    doc = json.loads(report.read_text())
    assert set(doc["results"]) == {"pca", "jet:2"}
    assert report.with_suffix(".txt").exists()


def test_bench_reports_byte_identical(synth_dir, tmp_path):
    for name in ("a.json", "b.json"):
        assert main(["bench", "--data", str(synth_dir), "--methods", "pca,jet:1", "--patch-size", "32",
                     "--queries-per-shape", "20", "--seed", "3", "--report", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_train_resume_and_mismatch(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    tiny = {"patch_size": 16, "scales": [16], "k_local": 8, "k_encode": 8, "n_encoded": 4,
            "feature_dim": 8, "dense_depth": 2, "n_res_blocks": 2, "hidden": 8, "growth": 4}
    cfg.write_text(json.dumps({"model": tiny, "train": {"epochs": 2, "queries_per_shape": 8, "batch_size": 8}}))
    ck = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(synth_dir), "--config", str(cfg), "--out", str(ck)]) == 0
    out = capsys.readouterr().out
    assert "epoch 1/2" in out and "epoch 2/2" in out
    assert io.load_checkpoint(ck).epoch == 2
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"model": {**tiny, "feature_dim": 12}, "train": {"epochs": 3}}))
    assert main(["train", "--data", str(synth_dir), "--config", str(other), "--resume", str(ck),
                 "--out", str(tmp_path / "x.ckpt")]) == 2


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck"]) == 0
    assert "all passed" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["--nope"],
    ["estimate", "--method", "pca"],
    ["estimate", "--method", "jet:7", "--input", "x", "--out", "y"],
    ["estimate", "--method", "spline", "--input", "x", "--out", "y"],
    ["synth", "--shapes", "cube:2", "--out", "x"],
    ["bench", "--data", "x", "--methods", "hsurf"],
    ["--threads", "0", "gradcheck"],
])
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, fixtures_dir):
    assert main(["estimate", "--method", "pca", "--input", str(tmp_path / "missing.xyz"),
                 "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.xyz"
    bad.write_text("1 2\n")
    assert main(["estimate", "--method", "pca", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["estimate", "--method", "pca", "--input", str(fixtures_dir / "plane.xyz"),
                 "--patch-size", "1000", "--out", str(tmp_path / "o")]) == 2


def test_degenerate_input_exit_3(tmp_path):
    pts = tmp_path / "line.xyz"
    pts.write_text("".join(f"{i} 0 0\n" for i in range(20)))
    out = tmp_path / "o.normals"
    assert main(["estimate", "--method", "pca", "--input", str(pts), "--patch-size", "8", "--out", str(out)]) == 3
    assert len(out.read_text().splitlines()) == 20


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_threads_env(monkeypatch):
    monkeypatch.setenv("HSURF_THREADS", "abc")
    assert main(["gradcheck"]) == 1
