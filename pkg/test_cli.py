#!/usr/bin/env python3
"""
End-to-end tests for the omline command line
"""

import json
import os

import numpy as np
import pytest

import cli
from cli import main
from conftest import make_dicom_slice
from detections import DetectionSet, read_detections, write_detections
from errors import EXIT_GEOMETRY, EXIT_IO, EXIT_LANDMARK_MISSING, EXIT_USAGE
from phantom import render_sphere_phantom
from reformat import read_mesh_obj
from volume import load_volume, save_volume

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "Data")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tilted_case(tmp_path_factory):
    """phantom rolled by 6 degrees plus its classical detections, written through the CLI"""
    root = tmp_path_factory.mktemp("case")
    assert run("phantom", "gen", "--out", root, "--roll", 6, "--threads", 4) == 0
    volume = root / "phantom.vol"
    detections = root / "detections.csv"
    assert run("detect", "--classic", volume, "--out", detections) == 0
    return root, volume, detections


def test_phantom_gen_outputs(tilted_case):
    root, volume, _ = tilted_case
    for name in ("phantom.vol", "phantom.raw", "truth.csv", "ground_truth.csv"):
        assert (root / name).exists()
    assert load_volume(str(volume)).geometry.dims == (128, 128, 128)
    assert "# roll_deg = 6.000000" in (root / "truth.csv").read_text()


def test_standardize_pipeline(tilted_case, tmp_path, capsys):
    _, volume, detections = tilted_case
    out = tmp_path / "std"
    assert run("standardize", volume, detections, "--out", out, "--threads", 4, "--iso", -350) == 0
    for name in ("standardized.vol", "standardized.raw", "landmarks.csv", "standardized.obj", "manifest.json"):
        assert (out / name).exists()

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["angles_deg"]["roll"] == pytest.approx(6.0, abs=2.0)
    assert manifest["applied_rotation_deg"]["roll"] == pytest.approx(-manifest["angles_deg"]["roll"], abs=0.5)
    assert manifest["index_space"] is False
    assert manifest["case_id"] == "phantom"
    assert set(manifest["stage_seconds"]) == {"load", "identify", "rotate", "reconstruct", "write"}
    assert all(os.path.exists(p) for p in manifest["outputs"].values())

    assert "# angle_space = physical" in (out / "landmarks.csv").read_text()
    assert len(read_mesh_obj(str(out / "standardized.obj")).triangles) > 0
    assert "Angles (deg)" in capsys.readouterr().out


def test_index_space_is_recorded(tilted_case, tmp_path):
    _, volume, detections = tilted_case
    out = tmp_path / "std"
    assert run("standardize", volume, detections, "--out", out, "--index-space", "--threads", 2) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["index_space"] is True
    assert "# angle_space = index" in (out / "landmarks.csv").read_text()


def test_identify_prints_angles(tilted_case, tmp_path, capsys):
    _, volume, detections = tilted_case
    report = tmp_path / "landmarks.csv"
    assert run("identify", volume, detections, "--out", report) == 0
    assert "left_eye" in capsys.readouterr().out
    assert report.read_text().startswith("# case_id = phantom")


def test_missing_landmark_exit_code(tilted_case, tmp_path, capsys):
    _, volume, detections = tilted_case
    ds = read_detections(str(detections))
    kept = DetectionSet(ds.case_id, tuple(r for r in ds.records if r.landmark.value != "right_eac"))
    partial = tmp_path / "partial.csv"
    write_detections(kept, str(partial))
    out = tmp_path / "std"
    assert run("standardize", volume, partial, "--out", out) == EXIT_LANDMARK_MISSING
    assert "right_eac" in capsys.readouterr().err
    assert not (out / "standardized.vol").exists()


def _fail(*args, **kwargs):
    raise OSError("No space left on device")


def test_standardize_leaves_nothing_when_a_late_write_fails(tilted_case, tmp_path, monkeypatch):
    _, volume, detections = tilted_case
    monkeypatch.setattr(cli.RunManifest, "write", _fail)
    out = tmp_path / "std"
    assert run("standardize", volume, detections, "--out", out, "--iso", -350) == EXIT_IO
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == []


def test_eval_det_leaves_nothing_when_curves_fail(tilted_case, tmp_path, monkeypatch):
    root, _, detections = tilted_case
    monkeypatch.setattr(cli, "write_curves_csv", _fail)
    out = tmp_path / "eval"
    assert run("eval", "det", "--pred", detections, "--gt", root / "ground_truth.csv", "--out", out) == EXIT_IO
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == []


def test_eval_det(tilted_case, tmp_path, capsys):
    root, _, detections = tilted_case
    out = tmp_path / "eval"
    assert run("eval", "det", "--pred", detections, "--gt", root / "ground_truth.csv", "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 < report["map"] <= 1.0
    assert report["iou_threshold"] == 0.5
    assert sorted(p.name for p in out.glob("curves_*.csv")) == [
        "curves_left_eac.csv", "curves_left_eye.csv", "curves_right_eac.csv", "curves_right_eye.csv",
    ]
    assert "mAP:" in capsys.readouterr().out


def test_reconstruct_sphere(tmp_path):
    volume = tmp_path / "sphere.vol"
    save_volume(render_sphere_phantom(size=32, radius_mm=8.0), str(volume))
    mesh = tmp_path / "sphere.obj"
    assert run("reconstruct", volume, "--iso", -350, "--out", mesh) == 0
    assert mesh.read_text().startswith("v ")
    assert run("reconstruct", volume, "--iso", 2000, "--out", tmp_path / "none.obj") == EXIT_GEOMETRY
    assert not (tmp_path / "none.obj").exists()


def test_eval_efficiency_table(capsys):
    assert run("eval", "efficiency", os.path.join(DATA_DIR, "model_efficiency.csv")) == 0
    out = capsys.readouterr().out
    assert "YOLOv8" in out
    assert "0.0834" in out and "0.0507" in out
    assert "swapped" in out


def test_eval_scores(tmp_path, capsys):
    assert run("eval", "scores", os.path.join(DATA_DIR, "observer_scores.csv")) == 0
    out = capsys.readouterr().out
    assert "mean=2.85" in out
    assert "viable=48/52 (92.3%)" in out
    assert "differs from count-derived mean" in out

    paired = tmp_path / "paired.csv"
    paired.write_text("x,y\n1,2\n2,3\n3,4\n4,5\n5,6\n")
    assert run("eval", "scores", "--paired", paired) == 0
    assert "p=0.062500" in capsys.readouterr().out

    assert run("eval", "scores") == EXIT_USAGE


def test_dicom_import(tmp_path):
    series = tmp_path / "series"
    series.mkdir()
    for n, z in enumerate([0.0, 1.0, 2.0, 3.0]):
        pixels = np.full((4, 4), 1000 + n)
        (series / f"s{n}.dcm").write_bytes(make_dicom_slice(z=z, instance=n + 1, pixels=pixels))
    out = tmp_path / "ct.vol"
    assert run("dicom", "import", "--dir", series, "--out", out) == 0
    volume = load_volume(str(out))
    assert volume.geometry.dims == (4, 4, 4)
    assert volume.voxels[3, 0, 0] == 1003 - 1024

    assert run("dicom", "import", "--dir", series, "--out", tmp_path / "scan.raw") == EXIT_IO
    assert not (tmp_path / "scan.raw").exists()

    (series / "s9.dcm").write_bytes(b"garbage")
    assert run("dicom", "import", "--dir", series, "--out", tmp_path / "bad.vol") == EXIT_IO


def test_usage_errors(tmp_path):
    assert run("standardize", "--bogus-flag") == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE
    assert run("eval", "det", "--pred", "p", "--gt", "g", "--out", tmp_path, "--iou", 1.5) == EXIT_USAGE


def test_missing_input_file(tmp_path):
    assert run("reconstruct", tmp_path / "absent.vol", "--iso", 0, "--out", tmp_path / "m.obj") == EXIT_IO


def test_bad_environment(monkeypatch):
    monkeypatch.setenv("OMLINE_THREADS", "zero")
    assert run("eval", "scores") == EXIT_USAGE


def test_modules_open_with_interpreter_line_and_title():
    root = os.path.dirname(os.path.abspath(__file__))
    for name in sorted(os.listdir(root)):
        if not name.endswith(".py"):
            continue
        with open(os.path.join(root, name), encoding="utf-8") as handle:
            head = [handle.readline().rstrip("\n") for _ in range(3)]
        assert head[0] == "#!/usr/bin/env python3", name
        assert head[1] == '"""', name
        assert head[2].strip(), name
