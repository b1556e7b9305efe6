from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from sgsplat import cli
from sgsplat.dataset import orbit_cameras, random_scene, render_views, save_views
from sgsplat.ply import load_ply, save_ply
from sgsplat.raster import Camera, composite_bruteforce, read_image, render
from sgsplat.scene import Scene

# fixture.ply / fixture_golden.npy: a 200-Gaussian SH scene and its image from
# composite_bruteforce, frozen once.
DATA = Path(__file__).parent / "data"


@pytest.fixture
def camera_file(tmp_path):
    path = tmp_path / "cam.json"
    Camera.look_at([0.2, 0.1, -3.0], [0, 0, 0], fx=30.0, width=24, height=20).save(path)
    return path


def test_empty_scene_with_white_background(tmp_path, camera_file):
    save_ply(Scene.empty("sg3"), tmp_path / "e.ply")
    code = cli.main(["render", str(tmp_path / "e.ply"), str(camera_file), str(tmp_path / "e.png"),
                     "--background", "1,1,1"])
    assert code == 0
    assert np.all(read_image(tmp_path / "e.png") == 1.0)


def test_golden_float_dump(tmp_path):
    dump = tmp_path / "img.npy"
    code = cli.main(["render", str(DATA / "fixture.ply"), str(DATA / "fixture_camera.json"),
                     str(tmp_path / "img.png"), "--float-dump", str(dump)])
    assert code == 0
    golden = np.load(DATA / "fixture_golden.npy")
    assert np.abs(np.load(dump) - golden).max() < 1e-5
    ref, _, _ = composite_bruteforce(load_ply(DATA / "fixture.ply"), Camera.load(DATA / "fixture_camera.json"))
    np.testing.assert_array_equal(ref, golden)


def test_render_flags(tmp_path, camera_file):
    save_ply(random_scene("sh", 40, seed=1), tmp_path / "s.ply")
    base = ["render", str(tmp_path / "s.ply"), str(camera_file)]
    for i, extra in enumerate([["--tile-size", "5"], ["--thresholds", "1,3"], ["--model-override", "sh1"],
                               ["--model-override", "mixed"], ["--threads", "1"]]):
        assert cli.main(base + [str(tmp_path / f"o{i}.png")] + extra) == 0
    a = cli.main(base + [str(tmp_path / "a.png"), "--model-override", "sg3", "--seed", "3", "--float-dump",
                         str(tmp_path / "a.npy")])
    b = cli.main(base + [str(tmp_path / "b.png"), "--model-override", "sg3", "--seed", "3", "--float-dump",
                         str(tmp_path / "b.npy")])
    assert a == b == 0
    assert np.load(tmp_path / "a.npy").tobytes() == np.load(tmp_path / "b.npy").tobytes()


def test_bad_ply_exits_1(tmp_path, camera_file, capsys):
    (tmp_path / "bad.ply").write_bytes(b"ply\nformat binary_big_endian 1.0\nend_header\n")
    assert cli.main(["render", str(tmp_path / "bad.ply"), str(camera_file), str(tmp_path / "x.png")]) == 1
    assert "error" in capsys.readouterr().err
    assert cli.main(["render", str(tmp_path / "missing.ply"), str(camera_file), str(tmp_path / "x.png")]) == 1


def test_contract_violation_exits_2(tmp_path, camera_file):
    save_ply(random_scene("sh", 3), tmp_path / "s.ply")
    args = ["render", str(tmp_path / "s.ply"), str(camera_file), str(tmp_path / "x.png")]
    assert cli.main(args + ["--tile-size", "0"]) == 2
    assert cli.main(args + ["--thresholds", "8,2"]) == 2
    save_ply(random_scene("sg3", 3), tmp_path / "g.ply")
    assert cli.main(["convert", str(tmp_path / "g.ply"), str(tmp_path / "o.ply"), "--target", "sg1"]) == 2


def _views_dir(tmp_path, scene, n=2, size=24):
    views = render_views(scene, orbit_cameras(n, width=size, height=size))
    save_views(tmp_path / "views", views)
    return tmp_path / "views"


def test_eval_identical_renders_is_100db(tmp_path, capsys):
    scene = random_scene("sg3", 50, seed=2, background=(0.1, 0.1, 0.1))
    save_ply(scene, tmp_path / "s.ply")
    # render from the saved (float32) scene so the targets match exactly
    views = _views_dir(tmp_path, load_ply(tmp_path / "s.ply"))
    assert cli.main(["eval", str(tmp_path / "s.ply"), str(views), "--json", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert all(r["psnr"] == 100.0 for r in report["views"])
    assert "100.000" in capsys.readouterr().out


def test_eval_ablation_rows(tmp_path):
    scene = random_scene("sh", 30, seed=3)
    save_ply(scene, tmp_path / "s.ply")
    views = _views_dir(tmp_path, load_ply(tmp_path / "s.ply"), n=1, size=20)
    assert cli.main(["eval", str(tmp_path / "s.ply"), str(views), "--ablation", "--json", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert list(report) == ["SHOnly", "+OrthoSG", "+LowDegSH", "+Mixed"]
    assert report["SHOnly"]["psnr"] == 100.0
    assert report["+Mixed"]["kind"] == "mixed"


def test_train_smoke_writes_loss_csv(tmp_path):
    scene = random_scene("sh", 40, seed=4)
    data = tmp_path / "data"
    data.mkdir()
    save_ply(scene, data / "init.ply")
    _views_dir(data, scene, n=2, size=20)
    cfg = tmp_path / "train.cfg"
    cfg.write_text("total_iterations = 50\nsg_start_iteration = 20\n")
    code = cli.main(["train", str(cfg), str(data), str(tmp_path / "out"), "--model", "sg3"])
    assert code == 0
    rows = (tmp_path / "out" / "loss.csv").read_text().splitlines()
    assert len(rows) == 51
    trained = load_ply(tmp_path / "out" / "scene.ply")
    assert trained.kind.value == "sg3"
    assert json.loads((tmp_path / "out" / "config.json").read_text())["total_iterations"] == 50


def test_convert_cli(tmp_path, camera_file, capsys):
    save_ply(random_scene("sh", 20, seed=5), tmp_path / "s.ply")
    code = cli.main(["convert", str(tmp_path / "s.ply"), str(tmp_path / "o.ply"), "--target", "sg3",
                     "--report", str(tmp_path / "rep"), "--held-out", str(camera_file)])
    assert code == 0
    out = capsys.readouterr().out
    assert "ratio 0.4915" in out and "held-out PSNR" in out
    assert json.loads((tmp_path / "rep.json").read_text())["byte_ratio"] == 116 / 236


def test_bench_cli(tmp_path, camera_file, capsys):
    save_ply(random_scene("sh", 30, seed=6), tmp_path / "a.ply")
    save_ply(random_scene("sg3", 30, seed=6), tmp_path / "b.ply")
    code = cli.main(["bench", str(tmp_path / "a.ply"), str(camera_file), "--repeat", "3", "--compare",
                     str(tmp_path / "b.ply"), "--json", str(tmp_path / "b.json")])
    assert code == 0
    report = json.loads((tmp_path / "b.json").read_text())
    assert len(report["renders"]) == 2
    assert all(len(r["times_ms"]) == 3 for r in report["renders"].values())
    flops = {row["kind"]: row["flops_per_gaussian"] for row in report["flops"]}
    assert flops["sg3"] < flops["sh"]
    assert "flops/Gaussian" in capsys.readouterr().out


def test_synth_cli(tmp_path):
    assert cli.main(["synth", str(tmp_path / "syn"), "--n", "30", "--views", "2", "--held-out", "1",
                     "--size", "16"]) == 0
    assert load_ply(tmp_path / "syn" / "scene.ply").kind.value == "sh"
    assert len(list((tmp_path / "syn" / "views").glob("*.json"))) == 2


def test_help_lists_every_flag(capsys):
    parser = cli.build_parser()
    sub_action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(sub_action.choices) >= {"render", "train", "convert", "eval", "bench"}
    for name, sub in sub_action.choices.items():
        with pytest.raises(SystemExit) as exc:
            cli.main([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
    spec_flags = {"render": ["--tile-size", "--thresholds", "--model-override", "--background"],
                  "convert": ["--target", "--report"], "bench": ["--repeat"]}
    for name, flags in spec_flags.items():
        assert all(f in sub_action.choices[name].format_help() for f in flags)
