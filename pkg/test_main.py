import json
import os

import numpy as np
import pandas as pd
import pytest

from imaging import BinaryMask, Raster, load_image, load_mask, save_image, save_mask
from main import main
from scene_io import load_scene, load_splats, save_camera, splats_to_bytes


def run(*args):
    return main(["--threads", "1", "--log-level", "WARNING", *[str(a) for a in args]])


def write_images(folder, planes):
    os.makedirs(folder, exist_ok=True)
    for k, plane in enumerate(planes):
        save_image(Raster(np.repeat(np.asarray(plane, dtype=float)[:, :, None], 3, axis=2)),
                   str(folder / f"img_{k}.png"))


def square(size=24):
    plane = np.ones((size, size))
    plane[6:18, 6:18] = 0.2
    return plane


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            full = os.path.join(dirpath, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


# ========== MASK AND ATTENTION ==========

def test_mask_writes_one_mask_and_composite_per_image(tmp_path):
    write_images(tmp_path / "in", [square()] * 3)
    assert run("mask", "--in", tmp_path / "in", "--out", tmp_path / "out") == 0
    for k in range(3):
        mask = load_mask(str(tmp_path / "out" / f"img_{k}_mask.pgm"))
        assert mask.bits[12, 12] and not mask.bits[0, 0]
        white = load_image(str(tmp_path / "out" / f"img_{k}_white.png"))
        assert np.all(white.data[0, 0] == 1.0)


def test_zero_threshold_gives_full_masks(tmp_path):
    write_images(tmp_path / "in", [square()])
    assert run("mask", "--in", tmp_path / "in", "--out", tmp_path / "out", "--threshold", 0) == 0
    assert load_mask(str(tmp_path / "out" / "img_0_mask.pgm")).bits.all()


def test_supplied_saliency_replaces_fallback(tmp_path):
    write_images(tmp_path / "in", [square()])
    os.makedirs(tmp_path / "sal")
    sal = np.zeros((24, 24))
    sal[:, :5] = 1.0
    np.save(tmp_path / "sal" / "img_0.npy", sal)
    assert run("mask", "--in", tmp_path / "in", "--out", tmp_path / "out", "--saliency-dir", tmp_path / "sal") == 0
    assert np.array_equal(load_mask(str(tmp_path / "out" / "img_0_mask.pgm")).bits, sal >= 0.5)


def test_attention_maps(tmp_path):
    edge = np.zeros((16, 16))
    edge[:, 8:] = 1.0
    write_images(tmp_path / "in", [np.full((16, 16), 0.4), edge])
    assert run("attention", "--in", tmp_path / "in", "--out", tmp_path / "out") == 0
    flat = np.load(tmp_path / "out" / "img_0.npy")
    assert np.all(flat == 0.0)
    quantized = np.asarray(load_image(str(tmp_path / "out" / "img_1.pgm")).plane * 255).round()
    assert np.all(quantized[:, 7:9] == 255) and np.all(quantized[:, :6] == 0)


def test_empty_input_directory(tmp_path):
    os.makedirs(tmp_path / "empty")
    assert run("attention", "--in", tmp_path / "empty", "--out", tmp_path / "out") == 1
    assert run("mask", "--in", tmp_path / "missing", "--out", tmp_path / "out") == 1


# ========== SYNTH ==========

def test_synth_is_reproducible(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"seed": 8, "object": "phantom", "views": 3, "size": 32, "splats": 6}))
    assert run("synth", "--spec", spec, "--out", tmp_path / "a") == 0
    assert run("synth", "--spec", spec, "--out", tmp_path / "b") == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    assert len(load_scene(str(tmp_path / "a" / "scene.json")).views) == 3


def test_synth_rejects_bad_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"views": 1}))
    assert run("synth", "--spec", spec, "--out", tmp_path / "a") == 1


# ========== SFM ==========

def test_sfm_needs_two_views(tmp_path, phantom_dir):
    manifest = json.loads((phantom_dir / "scene.json").read_text())
    manifest["views"] = manifest["views"][:1]
    view = manifest["views"][0]
    for key in ("image", "mask", "attention"):
        if view.get(key):
            view[key] = str(phantom_dir / view[key])
    (tmp_path / "one.json").write_text(json.dumps(manifest))
    assert run("sfm", "--scene", tmp_path / "one.json", "--out", tmp_path / "out") == 1


def test_sfm_failure_exits_with_runtime_code(tmp_path, rng):
    os.makedirs(tmp_path / "images")
    os.makedirs(tmp_path / "masks")
    coarse = rng.uniform(size=(16, 16))
    views = []
    for k in range(2):
        plane = np.roll(np.kron(coarse, np.ones((4, 4))), 2 * k, axis=1)
        save_image(Raster(np.repeat(plane[:, :, None], 3, axis=2)), str(tmp_path / "images" / f"v{k}.png"))
        save_mask(BinaryMask(np.zeros((64, 64), dtype=bool)), str(tmp_path / "masks" / f"v{k}.pgm"))
        views.append({"name": f"v{k}", "image": f"images/v{k}.png", "mask": f"masks/v{k}.pgm"})
    intr = {"fx": 64.0, "fy": 64.0, "cx": 31.5, "cy": 31.5, "width": 64, "height": 64}
    (tmp_path / "scene.json").write_text(json.dumps({"intrinsics": intr, "views": views}))
    assert run("sfm", "--scene", tmp_path / "scene.json", "--out", tmp_path / "out") == 2


def test_sfm_on_cuboid(tmp_path, cuboid_scene):
    manifest = os.path.join(cuboid_scene.manifest.root, "scene.json")
    assert run("sfm", "--scene", manifest, "--out", tmp_path / "sfm") == 0
    summary = json.loads((tmp_path / "sfm" / "summary.json").read_text())
    assert summary["points"] > 0 and summary["masked"]
    assert summary["mean_error"] < 0.5
    scene = load_scene(str(tmp_path / "sfm" / "scene.json"))
    assert len(scene.views) == 3
    scene.require_cameras()


@pytest.mark.slow
def test_unmasked_sfm_keeps_more_points(tmp_path, cuboid_scene):
    manifest = os.path.join(cuboid_scene.manifest.root, "scene.json")
    assert run("sfm", "--scene", manifest, "--out", tmp_path / "masked") == 0
    assert run("sfm", "--scene", manifest, "--out", tmp_path / "plain", "--no-mask") == 0
    masked = json.loads((tmp_path / "masked" / "summary.json").read_text())
    plain = json.loads((tmp_path / "plain" / "summary.json").read_text())
    assert plain["points"] > masked["points"]


# ========== TRAIN / RENDER / EVAL ==========

def short_config(tmp_path, iterations=2):
    path = tmp_path / "short.cfg"
    path.write_text(f"iterations = {iterations}\nreport_interval = 1\nfinal_prune = false\n")
    return path


def test_train_records_run_metadata(tmp_path, phantom_dir):
    out = tmp_path / "run"
    code = run("train", "--scene", phantom_dir / "scene.json", "--init", phantom_dir / "truth" / "cloud.ply",
               "--config", short_config(tmp_path), "--out", out, "--no-attention")
    assert code == 0
    meta = json.loads((out / "run.json").read_text())
    assert meta["attention_enabled"] is False
    assert meta["train_time"] > 0
    assert meta["initial_splats"] == len(load_splats(str(phantom_dir / "truth" / "cloud.ply")))
    assert len(pd.read_csv(out / "loss.csv")) == 2
    assert len(load_splats(str(out / "splats.ply"))) == meta["final_splats"]


def test_train_missing_init(tmp_path, phantom_dir):
    code = run("train", "--scene", phantom_dir / "scene.json", "--init", tmp_path / "absent.ply",
               "--out", tmp_path / "run")
    assert code == 1


def test_render_reproduces_phantom_view(tmp_path, phantom_dir):
    scene = load_scene(str(phantom_dir / "scene.json"))
    view = scene.views[0]
    save_camera(view.camera, scene.intrinsics, str(tmp_path / "cam.json"))
    assert run("render", "--splats", phantom_dir / "truth" / "cloud.ply", "--camera", tmp_path / "cam.json",
               "--out", tmp_path / "view.png") == 0
    assert np.max(np.abs(load_image(str(tmp_path / "view.png")).data - view.image.data)) <= 1.0 / 255 + 1e-12


def test_render_from_synth_cameras(tmp_path, phantom_dir):
    cameras = phantom_dir / "cameras.json"
    splats = phantom_dir / "truth" / "cloud.ply"
    assert run("render", "--splats", splats, "--camera", cameras, "--view", "view_002", "--out", tmp_path / "a.png") == 0
    assert run("render", "--splats", splats, "--camera", cameras, "--view", 2, "--out", tmp_path / "b.png") == 0
    a = load_image(str(tmp_path / "a.png")).data
    assert np.array_equal(a, load_image(str(tmp_path / "b.png")).data)
    assert np.max(np.abs(a - np.load(phantom_dir / "truth" / "view_002.npy"))) <= 1.0 / 255
    assert run("render", "--splats", splats, "--camera", cameras, "--out", tmp_path / "c.png") == 1
    assert run("render", "--splats", splats, "--camera", cameras, "--view", "nope", "--out", tmp_path / "c.png") == 1


def test_eval_of_ground_truth(tmp_path, phantom_dir, capsys):
    out = tmp_path / "report.csv"
    assert run("eval", "--splats", phantom_dir / "truth" / "cloud.ply", "--scene", phantom_dir / "scene.json",
               "--out", out, "--label", "truth", "--frames", 1) == 0
    frame = pd.read_csv(out, index_col=0)
    assert frame.loc["truth", "SSIM"] > 0.999
    assert frame.loc["truth", "L1"] <= 0.5 / 255
    assert frame.loc["truth", "Size(MB)"] == pytest.approx(
        len(splats_to_bytes(load_splats(str(phantom_dir / "truth" / "cloud.ply")))) / 1e6)
    assert "truth" in capsys.readouterr().out


def test_bench_prints_fps(phantom_dir, capsys):
    assert run("bench", "--splats", phantom_dir / "truth" / "cloud.ply", "--scene", phantom_dir / "scene.json",
               "--frames", 2) == 0
    assert float(capsys.readouterr().out.strip()) > 0


def test_compare_writes_four_rows(tmp_path, phantom_dir, capsys):
    assert run("compare", "--scene", phantom_dir / "scene.json", "--init", phantom_dir / "truth" / "cloud.ply",
               "--config", short_config(tmp_path, 1), "--out", tmp_path / "cmp", "--frames", 1) == 0
    frame = pd.read_csv(tmp_path / "cmp" / "comparison.csv", index_col=0)
    assert list(frame.index) == ["Original/3DGS", "Original/Ours", "No BG/3DGS", "No BG/Ours"]
    assert (tmp_path / "cmp" / "nobg_ours" / "splats.ply").exists()
