"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are written straight
to the terminal so they appear without ``-s``.
"""

from __future__ import annotations

import json
import warnings

import numba
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sgsplat import cli
from sgsplat import color_model as cm
from sgsplat.bench import compare_renders, speed_fixture
from sgsplat.convert import FitWarning, convert_checkpoint
from sgsplat.dataset import load_views, random_scene, student_from, teacher_scene, write_synthetic
from sgsplat.errors import OrthogonalityError
from sgsplat.metrics import psnr
from sgsplat.ply import bytes_per_gaussian, floats_per_gaussian, load_ply, save_ply
from sgsplat.raster import Camera, RenderConfig, composite_bruteforce, flops_per_gaussian, render
from sgsplat.train import TrainConfig, train

from conftest import random_unit
from test_grad import check_scene

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    """The bundled synthetic teacher: 1000 degree-3 SH Gaussians, 8 views, 2 held-out views at 128x128."""
    out = tmp_path_factory.mktemp("synthetic")
    return write_synthetic(out, n=1000, n_views=8, n_held_out=2, width=128, height=128, seed=0)


def test_criterion_1_parameter_accounting(report):
    counts = {
        "sh3": cm.param_count(cm.SHOnly(cm.SHCoeffs.zeros(3))),
        "sg1": cm.param_count(cm.DiffuseSG(np.zeros(3), cm.SGLobe(np.zeros(3), 1.0, [0, 0, 1]))),
        "sg3": cm.param_count(cm.DiffuseOrthoSG(np.zeros(3), cm.OrthoSGSet.zeros())),
        "sg3_shared": cm.shared_param_count(cm.DiffuseOrthoSG(np.zeros(3), cm.OrthoSGSet.zeros())),
        "floats_ref": floats_per_gaussian("sh"),
        "floats_sg3": floats_per_gaussian("sg3"),
    }
    expected = {"sh3": 48, "sg1": 10, "sg3": 15, "sg3_shared": 3, "floats_ref": 59, "floats_sg3": 29}
    ok = counts == expected
    report(1, ok, f"counts {counts}")
    assert ok


def test_criterion_2_storage_ratio(tmp_path, report):
    scene = teacher_scene(200, seed=5)
    save_ply(scene, tmp_path / "in.ply")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FitWarning)
        summary = convert_checkpoint(tmp_path / "in.ply", tmp_path / "out.ply", "sg3")
    ratio = summary["byte_ratio"]
    ok = ratio == 116 / 236 and bytes_per_gaussian("sg3") == 116 and bytes_per_gaussian("sh") == 236
    report(2, ok, f"payload ratio {ratio:.4f} (116/236), reduction {summary['reduction_percent']:.2f}%; "
                  f"file ratio incl. headers {summary['file_ratio']:.4f}")
    assert ok


def test_criterion_3_speed_ordering(report):
    sh_scene, sg_scene, cam = speed_fixture(n=50000, size=800)
    results = compare_renders({"sh3": sh_scene, "sg3": sg_scene}, cam, RenderConfig(), repeat=20, warmup=3)
    sh_ms, sg_ms = results["sh3"]["median_ms"], results["sg3"]["median_ms"]
    f_sh, f_sg = flops_per_gaussian("sh", 3), flops_per_gaussian("sg3")
    ok = sg_ms < sh_ms and f_sg < f_sh
    report(3, ok, f"median frame SG3 {sg_ms:.1f} ms vs SH3 {sh_ms:.1f} ms over 20 runs at 800x800, "
                  f"50k Gaussians; flops/Gaussian SG3 {f_sg} vs SH3 {f_sh}")
    assert ok


def test_criterion_4_render_correctness(report):
    rng = np.random.default_rng(44)
    kinds = ["sh", "sg1", "sg3", "mixed"]
    worst_diff, worst_weight, det_fail = 0.0, 0.0, 0
    for i in range(50):
        n = int(rng.integers(1, 501))
        scene = random_scene(kinds[i % 4], n, seed=1000 + i)
        eye = random_unit(rng) * rng.uniform(2.5, 4.0)
        w, h = int(rng.integers(16, 48)), int(rng.integers(16, 48))
        cam = Camera.look_at(eye, rng.normal(0, 0.2, 3), fx=float(rng.uniform(25, 60)), width=w, height=h)
        cfg = RenderConfig(tile_size=int(rng.choice([4, 8, 16])), thresholds=(3.0, 7.0))
        tiled = render(scene, cam, cfg).image
        ref, _, weight = composite_bruteforce(scene, cam, cfg)
        worst_diff = max(worst_diff, float(np.abs(tiled - ref).max()))
        worst_weight = max(worst_weight, float(weight.max()))
        threads = sorted({1, numba.config.NUMBA_NUM_THREADS})
        images = [render(scene, cam, RenderConfig(cfg.tile_size, cfg.thresholds, threads=t)).image for t in threads]
        det_fail += any(img.tobytes() != tiled.tobytes() for img in images)
    ok = worst_diff <= 1e-5 and worst_weight <= 1 + 1e-6 and det_fail == 0
    report(4, ok, f"50 scenes: max |tiled - bruteforce| {worst_diff:.2e}, max blended weight {worst_weight:.6f}, "
                  f"thread counts {sorted({1, numba.config.NUMBA_NUM_THREADS})} nondeterministic scenes {det_fail}")
    assert ok


def test_criterion_5_gradient_correctness(report):
    rng = np.random.default_rng(55)
    cam = Camera.look_at([0.3, 0.2, -3.0], [0, 0, 0], fx=40.0, width=40, height=32)
    cfg = RenderConfig(thresholds=(4.0, 10.0))
    kinds = ["sh", "sg1", "sg3", "mixed"]
    fails, checked, skipped = [], 0, 0
    for i in range(20):
        scene = random_scene(kinds[i % 4], 20, seed=2000 + i)
        f, c, s = check_scene(scene, cam, cfg, rng, per_field=20)
        fails += f
        checked += c
        skipped += s
    rate = 1.0 - len(fails) / max(checked, 1)
    ok = rate >= 0.99 and checked > 0
    report(5, ok, f"{checked} samples checked, {len(fails)} outside 2e-3 rel / 1e-6 abs "
                  f"(pass rate {100 * rate:.2f}%), {skipped} discontinuity-adjacent samples skipped")
    assert ok


def test_criterion_6_staged_training(report):
    defaults = TrainConfig()
    teacher = teacher_scene(150, seed=6)
    from sgsplat.dataset import orbit_cameras, render_views

    views = render_views(teacher, orbit_cameras(3, width=32, height=32))
    student = student_from(teacher, "sg3", seed=1)
    history = []

    def record(it, scene, _):
        history.append((scene.sg_alpha.tobytes(), scene.sg_log_lambda.tobytes()))

    train(student, views, TrainConfig(total_iterations=200, sg_start_iteration=100), callback=record)
    initial = (np.zeros_like(student.sg_alpha).tobytes(), student.sg_log_lambda.tobytes())
    frozen = all(h == initial for h in history[:100])
    moved = history[100][0] != initial[0] and history[-1][1] != initial[1]
    ok = frozen and moved and defaults.sg_start_iteration == 2000 and defaults.sg_learning_rate == 0.0025
    report(6, ok, f"SG amplitude/sharpness bit-unchanged through iteration 99: {frozen}; changed from "
                  f"iteration 100: {moved}; defaults sg_start={defaults.sg_start_iteration}, "
                  f"sg_lr={defaults.sg_learning_rate}")
    assert ok


def test_criterion_7_distillation_quality(synthetic, tmp_path, report):
    held = load_views(synthetic["held_out"])
    scores = {}
    for kind in ("mixed", "sg3"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FitWarning)
            convert_checkpoint(synthetic["scene"], tmp_path / f"{kind}.ply", kind)
        converted = load_ply(tmp_path / f"{kind}.ply")
        scores[kind] = [psnr(np.clip(render(converted, c).image, 0, 1), np.clip(t, 0, 1)) for c, t in held]
    ok = min(scores["mixed"]) > 32.0 and min(scores["sg3"]) > 28.0
    fmt = lambda v: ", ".join(f"{x:.2f}" for x in v)
    report(7, ok, f"held-out PSNR vs teacher render: Mixed [{fmt(scores['mixed'])}] dB (> 32), "
                  f"OrthoSG [{fmt(scores['sg3'])}] dB (> 28)")
    assert ok


def test_criterion_8_orthogonality_and_reductions(report):
    rng = np.random.default_rng(88)
    rejected = 0
    for _ in range(50):
        axes = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        bad = axes.copy()
        bad[0] *= 1.0 + 3e-6
        try:
            cm.OrthoSGSet(np.zeros((3, 3)), np.ones(3), bad)
        except OrthogonalityError:
            rejected += 1
        cm.OrthoSGSet(np.zeros((3, 3)), np.ones(3), axes)
    worst_mixed, worst_const = 0.0, 0.0
    for _ in range(200):
        d = random_unit(rng)
        sh = rng.normal(size=(9, 3))
        axes = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        mixed = cm.MixedSHSG(cm.SHCoeffs(2, sh), cm.OrthoSGSet(np.zeros((3, 3)), rng.uniform(0, 20, 3), axes))
        for deg in (0, 1, 2):
            pure = cm.SHOnly(cm.SHCoeffs(deg, sh[: (deg + 1) ** 2]))
            worst_mixed = max(worst_mixed, float(np.abs(cm.eval_color(mixed, d, deg) - cm.eval_color(pure, d)).max()))
        alpha = rng.normal(size=3)
        lobe = cm.SGLobe(alpha, 0.0, random_unit(rng))
        worst_const = max(worst_const, float(np.abs(cm.eval_sg(lobe, d) - alpha).max()))
    ok = rejected == 50 and worst_mixed <= 1e-12 and worst_const <= 1e-12
    report(8, ok, f"non-orthonormal axes rejected {rejected}/50; zero-amplitude Mixed vs SH max diff "
                  f"{worst_mixed:.1e}; lambda=0 lobe deviation {worst_const:.1e}")
    assert ok


def test_criterion_9_ablation_ordering(synthetic, tmp_path, report):
    out = tmp_path / "ablation.json"
    code = cli.main(["eval", str(synthetic["scene"]), str(synthetic["held_out"]), "--ablation", "--json", str(out)])
    table = json.loads(out.read_text())
    rows = {k: v["psnr"] for k, v in table.items()}
    ok = code == 0 and list(rows) == ["SHOnly", "+OrthoSG", "+LowDegSH", "+Mixed"] and rows["+Mixed"] >= rows["+OrthoSG"]
    report(9, ok, "held-out PSNR " + ", ".join(f"{k} {v:.2f}" for k, v in rows.items()) + " (Mixed >= OrthoSG)")
    assert ok
