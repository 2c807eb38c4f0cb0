import json
import struct

import numpy as np
import pytest

from layoutmv.cli import EXIT_BAD_INPUT, EXIT_OK, main
from layoutmv.fixtures import FIXTURE_KINDS
from layoutmv.formats import load_mask_png, load_png, read_mask_file, read_mvrc, read_planes, write_ply
from layoutmv.pointcloud import GlobalPointCloud
from layoutmv.scene import CameraPose, SceneLayout, cast_ray


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def bedroom_files(tmp_path):
    scene, cams = tmp_path / "bedroom.json", tmp_path / "cams.json"
    assert run("fixture", "--kind", "bedroom5", "--out", scene, "--cameras-out", cams,
               "--n-cameras", 3, "--resolution", 32) == EXIT_OK
    return scene, cams


def test_fixture_kinds(tmp_path):
    for kind in FIXTURE_KINDS:
        out = tmp_path / f"{kind}.json"
        assert run("fixture", "--kind", kind, "--seed", 3, "--out", out) == EXIT_OK
        SceneLayout.from_json(out)  # revalidates every layout invariant
    assert SceneLayout.from_json(tmp_path / "bedroom5.json").n_boxes == 5
    assert SceneLayout.from_json(tmp_path / "empty_room.json").n_boxes == 0


def test_random_fixture_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("fixture", "--kind", "random", "--seed", 7, "--out", tmp_path / f"{name}.json",
                   "--cameras-out", tmp_path / f"{name}_cams.json", "--resolution", 32) == EXIT_OK
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a_cams.json").read_bytes() == (tmp_path / "b_cams.json").read_bytes()


def test_rasterize_headers_prefix_and_histogram(tmp_path, bedroom_files):
    scene, cams = bedroom_files
    assert run("rasterize", "--scene", scene, "--cameras", cams, "--layers", 3, "--out", tmp_path / "m3",
               "--previews") == EXIT_OK
    assert run("rasterize", "--scene", scene, "--cameras", cams, "--layers", 1, "--out", tmp_path / "m1") == EXIT_OK
    layout = SceneLayout.from_json(scene)
    cameras = [CameraPose.from_dict(d) for d in json.loads(cams.read_text())]
    for i, cam in enumerate(cameras):
        raw = (tmp_path / "m3" / f"cond_{i}.mvrc").read_bytes()
        assert struct.unpack_from("<4sIIII", raw) == (b"MVRC", 1, 32, 32, 3)
        _, (sem3, depth3, local3, glob3) = read_mvrc(tmp_path / "m3" / f"cond_{i}.mvrc")
        _, (sem1, depth1, local1, glob1) = read_mvrc(tmp_path / "m1" / f"cond_{i}.mvrc")
        assert sem1[..., 0].tobytes() == sem3[..., 0].tobytes()
        assert depth1[..., 0].tobytes() == depth3[..., 0].tobytes()
        assert local1.tobytes() == local3.tobytes() and glob1.tobytes() == glob3.tobytes()
        expect = np.zeros(16, int)
        for r in range(32):
            for c in range(32):
                hits = cast_ray(layout, cam, (c + 0.5, r + 0.5))
                expect[hits[0].class_id if hits else 0] += 1
        assert np.array_equal(np.bincount(sem3[..., 0].ravel(), minlength=16), expect)
        assert (tmp_path / "m3" / f"sem_{i}.png").is_file()


def test_missing_scene_exits_2(tmp_path, capsys):
    code = run("generate", "--scene", tmp_path / "nope.json", "--out", tmp_path / "run")
    assert code == EXIT_BAD_INPUT
    assert "scene file not found" in capsys.readouterr().err


def test_bad_inputs_exit_2(tmp_path, bedroom_files):
    scene, cams = bedroom_files
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("rasterize", "--scene", bad, "--cameras", cams, "--out", tmp_path / "o") == EXIT_BAD_INPUT
    assert run("epimask", "--scene", scene, "--cameras", cams, "--query-view", 9, "--out", tmp_path) == EXIT_BAD_INPUT
    assert run("generate", "--scene", scene, "--out", tmp_path / "g", "--n-views", 1) == EXIT_BAD_INPUT
    assert run("generate", "--scene", scene, "--out", tmp_path / "g", "--generator", "magic") == EXIT_BAD_INPUT
    assert run("no-such-command") == EXIT_BAD_INPUT


def test_json_logs_emit_records(tmp_path, capsys, bedroom_files):
    scene, cams = bedroom_files
    assert run("--json-logs", "rasterize", "--scene", scene, "--cameras", cams, "--layers", 2,
               "--out", tmp_path / "o") == EXIT_OK
    lines = [json.loads(s) for s in capsys.readouterr().err.splitlines() if s.strip()]
    assert [rec["view"] for rec in lines if rec.get("step") == "rasterize"] == [0, 1, 2]
    assert all(not any(rec["violations"].values()) for rec in lines if rec.get("step") == "rasterize")
    assert run("--json-logs", "rasterize", "--scene", tmp_path / "missing.json", "--cameras", cams,
               "--out", tmp_path / "o") == EXIT_BAD_INPUT
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit"] == 2 and err["level"] == "ERROR"


def test_epimask_files(tmp_path, bedroom_files):
    scene, cams = bedroom_files
    out = tmp_path / "masks"
    assert run("epimask", "--scene", scene, "--cameras", cams, "--query-view", 1, "--resolution", 8, 16,
               "--visualize", "4,4", "--out", out) == EXIT_OK
    assert run("epimask", "--scene", scene, "--cameras", cams, "--query-view", 1, "--resolution", 8,
               "--plain", "--out", tmp_path / "plain") == EXIT_OK
    res, n, qv, la = read_mask_file(out / "mask_q1_8.mvrm")
    _, _, _, plain = read_mask_file(tmp_path / "plain" / "mask_q1_8.mvrm")
    assert res == (8, 8) and n == 3 and qv == 1
    assert not np.any(la & ~plain)
    assert read_mask_file(out / "mask_q1_16.mvrm")[0] == (16, 16)
    assert load_png(out / "mask_q1_8_cell4_4.png").shape == (32, 96, 3)


def test_plan_traj_records(tmp_path, bedroom_files):
    scene, _ = bedroom_files
    out = tmp_path / "traj.json"
    assert run("plan-traj", "--scene", scene, "--seed", 7, "--interval", 0.4, "--resolution", 32,
               "--out", out) == EXIT_OK
    records = json.loads(out.read_text())
    assert len(records) > 10
    assert {"trajectory_id", "target_box", "seed"} <= set(records[0])
    assert all(r["seed"] == 7 for r in records)
    CameraPose.from_dict(records[0])
    again = tmp_path / "again.json"
    run("plan-traj", "--scene", scene, "--seed", 7, "--resolution", 32, "--out", again)
    assert again.read_bytes() == out.read_bytes()


def test_warp_and_align_depth(tmp_path, bedroom_files):
    scene, cams = bedroom_files
    images = tmp_path / "gt"
    run("fixture", "--kind", "bedroom5", "--out", scene, "--cameras-out", cams, "--n-cameras", 2,
        "--resolution", 32, "--images-dir", images)
    one = json.loads(cams.read_text())
    for i in range(2):
        (tmp_path / f"cam{i}.json").write_text(json.dumps(one[i]))
    assert run("warp", "--image", images / "image_0.png", "--depth", images / "depth_0.mvrc",
               "--src-camera", tmp_path / "cam0.json", "--dst-camera", tmp_path / "cam0.json",
               "--out", tmp_path / "w") == EXIT_OK
    assert np.array_equal(load_png(tmp_path / "w" / "warped.png"), load_png(images / "image_0.png"))
    assert load_mask_png(tmp_path / "w" / "mask.png").all()
    # an inverse-depth affine corruption of the true depth is undone by alignment
    true = read_planes(images / "depth_1.mvrc")[..., 0].astype(np.float64)
    np.save(tmp_path / "rel.npy", 1.0 / (0.5 / true + 0.1))
    assert run("align-depth", "--scene", scene, "--camera", tmp_path / "cam1.json", "--depth", tmp_path / "rel.npy",
               "--out", tmp_path / "aligned.mvrc") == EXIT_OK
    assert np.allclose(read_planes(tmp_path / "aligned.mvrc")[..., 0], true, rtol=1e-5)
    np.save(tmp_path / "small.npy", true[:8])
    assert run("align-depth", "--scene", scene, "--camera", tmp_path / "cam1.json", "--depth", tmp_path / "small.npy",
               "--out", tmp_path / "x.mvrc") == EXIT_BAD_INPUT


def test_render_pc(tmp_path, bedroom_files):
    rng = np.random.default_rng(0)
    pos = np.c_[rng.uniform(-0.5, 0.5, (50, 2)), np.full(50, 2.0)]
    cam = CameraPose([0.0, 0.0, 0.0], np.eye(3), 16, 16, 16, 16, 32, 32)
    (tmp_path / "cam.json").write_text(json.dumps(cam.to_dict()))
    write_ply(tmp_path / "pc.ply", pos, np.full((50, 3), 200, np.uint8))
    assert run("render-pc", "--ply", tmp_path / "pc.ply", "--camera", tmp_path / "cam.json",
               "--out", tmp_path / "r") == EXIT_OK
    mask = load_mask_png(tmp_path / "r" / "mask.png")
    depth = read_planes(tmp_path / "r" / "depth.mvrc")[..., 0]
    assert 0 < mask.sum() <= 50
    assert np.allclose(depth[mask], 2.0, atol=1e-6)
    assert run("render-pc", "--ply", tmp_path / "none.ply", "--camera", tmp_path / "cam.json",
               "--out", tmp_path / "r") == EXIT_BAD_INPUT


def test_generate_one_box(tmp_path):
    scene = tmp_path / "one_box.json"
    run("fixture", "--kind", "one_box", "--out", scene)
    out = tmp_path / "run"
    assert run("generate", "--scene", scene, "--out", out, "--seed", 1, "--resolution", 256, "--stride", 1,
               "--mask-res", 8) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["acceptance_rate"] >= 0.9
    assert manifest["gen_idx"][0] == 0 and len(manifest["views"]) == len(manifest["gen_idx"])
    for name in manifest["files"]:
        assert (out / name).is_file()
    assert len(GlobalPointCloud.from_ply(out / "pointcloud.ply")) == manifest["points"]
