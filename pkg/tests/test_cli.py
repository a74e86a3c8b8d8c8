import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from scenes import planted_scene
from pancut.cli import main
from pancut.eval import DatasetConfig
from pancut.tensor_io import (
    LabelMap,
    load_label_map,
    palette_color,
    save_feature_map,
    save_image,
    save_label_map,
    save_text_embeddings,
)


@pytest.fixture(scope="module")
def scene_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    s = planted_scene()
    save_feature_map(s["discovery"], root / "img.npy")
    save_feature_map(s["grounding"], root / "img_clip.npy")
    save_image(s["image"], root / "img.png")
    save_text_embeddings(s["texts"], root / "texts.npy")
    cfg = DatasetConfig("toy", ["background", "class1", "class2"], ["wall"])
    (root / "toy.json").write_text(json.dumps(cfg.to_json()))
    (root / "gt").mkdir()
    save_label_map(LabelMap(s["pix"]), root / "gt" / "img.png")
    return root, s


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_discover_writes_masks_and_manifest(scene_files, tmp_path, capsys):
    root, s = scene_files
    code, out, err = run(capsys, "discover", "--features", root / "img.npy", "--out", tmp_path / "d")
    assert code == 0, err
    assert json.loads(out) == {"image": "img", "objects": 2}
    masks = sorted((tmp_path / "d" / "img").glob("mask_*.png"))
    assert [m.name for m in masks] == ["mask_001.png", "mask_002.png"]
    doc = json.loads((tmp_path / "d" / "img" / "objects.json").read_text())
    assert (doc["height"], doc["width"]) == (336, 448)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["command"] == "discover" and manifest["seed"] == 0
    assert manifest["config"]["cut"]["max_iters"] == 16 and manifest["config"]["cut"]["min_nodes"] == 5
    assert manifest["inputs"][0]["sha256"]
    assert "img" in manifest["timing"]


def test_rerun_is_byte_identical(scene_files, tmp_path, capsys):
    root, _ = scene_files
    assert run(capsys, "discover", "--features", root / "img.npy", "--out", tmp_path / "a")[0] == 0
    code, _, err = run(capsys, "rerun", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b")
    assert code == 0, err
    for f in sorted((tmp_path / "a" / "img").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "img" / f.name).read_bytes()


def test_rerun_detects_changed_input(tmp_path, capsys):
    x = np.eye(3)[np.repeat(np.arange(3), 12)].reshape(6, 6, 3).astype(np.float32)
    np.save(tmp_path / "f.npy", x)
    assert run(capsys, "discover", "--features", tmp_path / "f.npy", "--out", tmp_path / "o")[0] == 0
    np.save(tmp_path / "f.npy", x * 2)
    code, _, err = run(capsys, "rerun", tmp_path / "o" / "manifest.json")
    assert code == 3 and json.loads(err)["error"] == "InputChangedError"


def test_seed_env_recorded(scene_files, tmp_path, capsys, monkeypatch):
    root, _ = scene_files
    monkeypatch.setenv("PANCUT_SEED", "7")
    assert run(capsys, "discover", "--features", root / "img.npy", "--out", tmp_path)[0] == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["cut"]["solver"]["seed"] == 7


def test_jobs_give_same_outputs(tmp_path, capsys):
    rng = np.random.default_rng(0)
    paths = []
    for i in range(2):
        p = tmp_path / f"f{i}.npy"
        np.save(p, rng.normal(size=(8, 8, 4)).astype(np.float32))
        paths.append(p)
    assert run(capsys, "discover", "--features", *paths, "--out", tmp_path / "s", "--jobs", 1)[0] == 0
    assert run(capsys, "discover", "--features", *paths, "--out", tmp_path / "p", "--jobs", 2)[0] == 0
    for f in sorted((tmp_path / "s").rglob("*.png")):
        assert f.read_bytes() == (tmp_path / "p" / f.relative_to(tmp_path / "s")).read_bytes()


def test_empty_tensor_exit_2(tmp_path, capsys):
    np.save(tmp_path / "e.npy", np.zeros((0, 0, 0), dtype=np.float32))
    code, out, err = run(capsys, "discover", "--features", tmp_path / "e.npy", "--out", tmp_path)
    assert code == 2 and out == ""
    assert json.loads(err)["error"] == "ShapeError"


def test_missing_file_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "discover", "--features", tmp_path / "nope.npy", "--out", tmp_path)
    assert code == 2 and json.loads(err)["error"] == "FileNotFoundError"


def test_crf_needs_image(scene_files, tmp_path, capsys):
    root, _ = scene_files
    code, _, err = run(capsys, "discover", "--features", root / "img.npy", "--crf", "on", "--out", tmp_path)
    assert code == 3 and json.loads(err)["exit_code"] == 3


def test_discover_then_ground(scene_files, tmp_path, capsys):
    root, s = scene_files
    args = ["discover", "--features", root / "img.npy", "--image", root / "img.png", "--crf", "on", "--out", tmp_path / "d"]
    assert run(capsys, *args)[0] == 0
    code, out, err = run(
        capsys, "ground", "--masks", tmp_path / "d" / "img", "--features", root / "img_clip.npy",
        "--texts", root / "texts.npy", "--dataset", root / "toy.json", "--out", tmp_path / "g",
    )
    assert code == 0, err
    pred = load_label_map(tmp_path / "g" / "img.png")
    assert np.array_equal(pred.labels, s["pix"])
    side = json.loads((tmp_path / "g" / "img.json").read_text())
    assert {o["class_id"] for o in side["objects"]} == {1, 2}
    assert side["halt_reason"] == "degenerate"


def test_segment_then_eval(scene_files, tmp_path, capsys):
    root, s = scene_files
    code, out, err = run(
        capsys, "segment", "--image", root / "img.png", "--discovery", root / "img.npy",
        "--grounding", root / "img_clip.npy", "--texts", root / "texts.npy", "--dataset", root / "toy.json",
        "--out", tmp_path / "pred",
    )
    assert code == 0, err
    assert json.loads(out)["objects"] == 2
    assert np.array_equal(load_label_map(tmp_path / "pred" / "img.png").labels, s["pix"])
    code, out, err = run(capsys, "eval", "--pred", tmp_path / "pred", "--gt", root / "gt", "--dataset", root / "toy.json")
    assert code == 0, err
    doc = json.loads(out)
    assert doc["miou"] == 1.0 and doc["excluded_classes"] == []
    assert (tmp_path / "pred" / "manifest.eval.json").exists()


def test_eval_dims_mismatch_exit_3(scene_files, tmp_path, capsys):
    root, _ = scene_files
    (tmp_path / "pred").mkdir()
    save_label_map(LabelMap(np.zeros((4, 4), dtype=int)), tmp_path / "pred" / "img.png")
    code, out, err = run(capsys, "eval", "--pred", tmp_path / "pred", "--gt", root / "gt", "--dataset", root / "toy.json")
    assert code == 3 and out == ""
    assert json.loads(err)["error"] == "ShapeError"


def test_eval_bundled_dataset_and_jobs(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        lab = rng.integers(0, 21, (5, 6))
        save_label_map(LabelMap(lab), tmp_path / "p" / f"{i}.png")
        Image.fromarray(lab.astype(np.uint8)).save(tmp_path / "g" / f"{i}.png")
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "p", "--gt", tmp_path / "g", "--dataset", "voc21", "--jobs", 2)
    assert code == 0 and json.loads(out)["miou"] == 1.0


def test_overlay_one_pixel(tmp_path, capsys):
    save_image(np.full((1, 1, 3), 255, dtype=np.uint8), tmp_path / "w.png")
    save_label_map(LabelMap(np.array([[3]])), tmp_path / "l.png")
    code, _, err = run(capsys, "overlay", "--image", tmp_path / "w.png", "--pred", tmp_path / "l.png", "--out", tmp_path / "o.png")
    assert code == 0, err
    got = np.asarray(Image.open(tmp_path / "o.png"))[0, 0]
    assert np.array_equal(got, np.floor((255 + palette_color(3).astype(int)) / 2 + 0.5))
    assert (tmp_path / "o.png.manifest.json").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pancut.cli", "eval", "--pred", tmp_path / "x", "--gt", tmp_path, "--dataset", "voc21"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""
    assert json.loads(proc.stderr)["error"] == "FileNotFoundError"
