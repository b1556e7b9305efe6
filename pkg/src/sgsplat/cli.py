"""Command-line entry point: ``sgsplat {render,train,convert,eval,bench,synth}``.

Exit codes: 0 success, 1 format or I/O error, 2 contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import color_model as cm
from .color_model import ModelKind
from .errors import ContractError, NumericError, PLYFormatError
from .raster import Camera, RenderConfig, render, write_png

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONTRACT = 2

ABLATION_ROWS = ("SHOnly", "+OrthoSG", "+LowDegSH", "+Mixed")
OVERRIDES = ("sh0", "sh1", "sh2", "sh3", "sg1", "sg3", "mixed")


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated numbers, got {text!r}")
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated numbers, got {text!r}")
    return vals


def _thresholds(text: str):
    return _floats(text, 2, "thresholds")


def _rgb(text: str):
    return _floats(text, 3, "background")


def _add_render_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tile-size", type=int, default=16, help="tile edge in pixels (default 16)")
    p.add_argument("--thresholds", type=_thresholds, default=None, metavar="T0,T1",
                   help="pixel radii where the mixed model switches to SH degree 1 and 2 (default 2,8)")
    p.add_argument("--background", type=_rgb, default=None, metavar="R,G,B",
                   help="background color in linear RGB (default: the scene's)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads (default: all cores)")


def _render_cfg(args) -> RenderConfig:
    kw = {"tile_size": args.tile_size, "background": args.background, "threads": args.threads}
    if args.thresholds is not None:
        kw["thresholds"] = args.thresholds
    return RenderConfig(**kw)


def _apply_threads(args) -> None:
    if getattr(args, "threads", None):
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))


def _override(scene, override: str, seed: int):
    from .convert import convert_scene, truncate_sh

    if override.startswith("sh"):
        degree = int(override[2:])
        if scene.kind is not ModelKind.SH:
            raise ContractError("SH degree overrides need an SH scene")
        if degree > scene.sh_degree:
            raise ContractError(f"scene stores SH degree {scene.sh_degree}, cannot render degree {degree}")
        return truncate_sh(scene, degree)
    if scene.kind is ModelKind(override):
        return scene
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return convert_scene(scene, override, seed=seed)[0]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    from .ply import load_ply

    scene = load_ply(args.scene)
    cam = Camera.load(args.camera)
    if args.model_override:
        scene = _override(scene, args.model_override, args.seed)
    image = render(scene, cam, _render_cfg(args)).image
    write_png(args.out, image)
    if args.float_dump:
        np.save(args.float_dump, image)
    print(f"wrote {args.out} ({cam.width}x{cam.height}, {len(scene)} Gaussians, {scene.kind.value})")
    return EXIT_OK


def _training_inputs(data_dir: Path, init, kind):
    from .dataset import load_views, student_from
    from .ply import load_ply

    views_dir = data_dir / "views" if (data_dir / "views").is_dir() else data_dir
    views = load_views(views_dir)
    if init is None:
        for name in ("init.ply", "scene.ply"):
            if (data_dir / name).exists():
                init = data_dir / name
                break
        else:
            raise FileNotFoundError(f"no init.ply or scene.ply in {data_dir}; pass --init")
    scene = load_ply(init)
    if kind is not None and scene.kind is not ModelKind(kind):
        if scene.kind is not ModelKind.SH:
            raise ContractError("only SH scenes can seed a student of another color model")
        scene = student_from(scene, kind)
    return scene, views


def cmd_train(args) -> int:
    from .ply import save_ply
    from .train import TrainConfig, train

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    if args.sg_start is not None:
        overrides["sg_start_iteration"] = args.sg_start
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    scene, views = _training_inputs(Path(args.data_dir), args.init, args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    result = train(scene, views, cfg, _render_cfg(args), out_dir=out)
    save_ply(result.scene, out / "scene.ply")
    print(f"trained {len(result.losses)} iterations, final loss {result.losses[-1]:.6g}; wrote {out / 'scene.ply'}")
    return EXIT_OK


def cmd_convert(args) -> int:
    from .convert import convert_checkpoint

    held = Camera.load(args.held_out) if args.held_out else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summary = convert_checkpoint(
            args.input, args.output, args.target, args.report,
            samples=args.samples, iters=args.iters, seed=args.seed,
            workers=args.workers, held_out_camera=held,
        )
    for w in caught[:1]:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"{summary['n_gaussians']} Gaussians -> {summary['target_model']}")
    print(f"payload bytes {summary['input_payload_bytes']} -> {summary['output_payload_bytes']} "
          f"(ratio {summary['byte_ratio']:.4f}, reduction {summary['reduction_percent']:.2f}%)")
    print(f"file bytes    {summary['input_file_bytes']} -> {summary['output_file_bytes']}")
    print(f"fit RMSE mean {summary['rmse_mean']:.3g} median {summary['rmse_median']:.3g} max {summary['rmse_max']:.3g}")
    if "held_out_psnr" in summary:
        print(f"held-out PSNR vs original render: {summary['held_out_psnr']:.2f} dB")
    return EXIT_OK


def evaluate_views(scene, views, cfg: RenderConfig) -> list[dict]:
    from .metrics import psnr, ssim

    rows = []
    for i, (cam, target) in enumerate(views):
        img = np.clip(render(scene, cam, cfg).image, 0.0, 1.0)
        ref = np.clip(target, 0.0, 1.0)
        rows.append({"view": i, "psnr": psnr(img, ref), "ssim": ssim(img, ref)})
    return rows


def ablation_variants(scene, seed: int = 0) -> dict:
    """The four rows of the color-model ablation, all derived from one SH scene."""
    from .convert import convert_scene, truncate_sh

    if scene.kind is not ModelKind.SH:
        raise ContractError("the ablation starts from an SH scene")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {
            "SHOnly": scene,
            "+OrthoSG": convert_scene(scene, ModelKind.SG3, seed=seed)[0],
            "+LowDegSH": truncate_sh(scene, cm.MIXED_SH_DEGREE),
            "+Mixed": convert_scene(scene, ModelKind.MIXED, seed=seed)[0],
        }


def cmd_eval(args) -> int:
    from .dataset import load_views
    from .ply import load_ply

    scene = load_ply(args.scene)
    views = load_views(args.views_dir)
    cfg = _render_cfg(args)
    report: dict = {}
    if args.ablation:
        print(f"{'variant':<12} {'PSNR':>9} {'SSIM':>8}")
        for name, variant in ablation_variants(scene, args.seed).items():
            rows = evaluate_views(variant, views, cfg)
            p = float(np.mean([r["psnr"] for r in rows]))
            s = float(np.mean([r["ssim"] for r in rows]))
            report[name] = {"kind": variant.kind.value, "psnr": p, "ssim": s, "views": rows}
            print(f"{name:<12} {p:9.3f} {s:8.4f}")
    else:
        rows = evaluate_views(scene, views, cfg)
        print(f"{'view':<6} {'PSNR':>9} {'SSIM':>8}")
        for r in rows:
            print(f"{r['view']:<6} {r['psnr']:9.3f} {r['ssim']:8.4f}")
        p = float(np.mean([r["psnr"] for r in rows]))
        s = float(np.mean([r["ssim"] for r in rows]))
        print(f"{'mean':<6} {p:9.3f} {s:8.4f}")
        report = {"psnr": p, "ssim": s, "views": rows}
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import compare_renders, flops_table
    from .ply import load_ply

    cam = Camera.load(args.camera)
    scenes = {str(args.scene): load_ply(args.scene)}
    for extra in args.compare or []:
        scenes[str(extra)] = load_ply(extra)
    results = compare_renders(scenes, cam, _render_cfg(args), repeat=args.repeat, warmup=args.warmup)
    print(f"{'scene':<40} {'model':<6} {'N':>8} {'median ms':>10} {'FPS':>8}")
    for name, r in results.items():
        print(f"{name:<40} {r['kind']:<6} {r['n_gaussians']:>8} {r['median_ms']:>10.2f} {r['fps']:>8.2f}")
    table = flops_table()
    print()
    print(f"{'model':<6} {'color params':>12} {'flops/Gaussian':>15}")
    for row in table:
        print(f"{row['kind']:<6} {row['color_params']:>12} {row['flops_per_gaussian']:>15}")
    if args.json:
        Path(args.json).write_text(json.dumps({"renders": results, "flops": table}, indent=2) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .dataset import write_synthetic

    paths = write_synthetic(args.out_dir, n=args.n, n_views=args.views, n_held_out=args.held_out,
                            width=args.size, height=args.size, seed=args.seed)
    for key, p in paths.items():
        print(f"{key}: {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgsplat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene from one camera to PNG")
    p.add_argument("scene", help="scene PLY")
    p.add_argument("camera", help="camera JSON")
    p.add_argument("out", help="output PNG")
    _add_render_flags(p)
    p.add_argument("--model-override", choices=OVERRIDES, default=None,
                   help="render an SH scene truncated to a degree (sh0..sh3) or converted to an SG model")
    p.add_argument("--float-dump", default=None, metavar="PATH", help="also save the linear float image as .npy")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="optimize a scene against posed images")
    p.add_argument("config", nargs="?", default=None, help="training config (JSON or key=value lines)")
    p.add_argument("data_dir", help="directory with views/ and init.ply or scene.ply")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--init", default=None, help="initial scene PLY (default: from data_dir)")
    p.add_argument("--model", choices=[k.value for k in ModelKind], default=None,
                   help="color model of the trained scene (default: that of the initial scene)")
    p.add_argument("--iterations", type=int, default=None, help="override total_iterations")
    p.add_argument("--sg-start", type=int, default=None, help="override sg_start_iteration")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train, seed=None)

    p = sub.add_parser("convert", help="distill an SH checkpoint into an SG color model")
    p.add_argument("input", help="reference SH PLY")
    p.add_argument("output", help="output SG PLY")
    p.add_argument("--target", choices=[k.value for k in (ModelKind.SG1, ModelKind.SG3, ModelKind.MIXED)],
                   default=ModelKind.SG3.value, help="target color model (default sg3)")
    p.add_argument("--report", default=None, help="report path; writes .json, _hist.csv and _rmse.csv")
    p.add_argument("--samples", type=int, default=256, help="fit directions on the Fibonacci lattice")
    p.add_argument("--iters", type=int, default=4, help="coordinate-descent sweeps per Gaussian")
    p.add_argument("--workers", type=int, default=1, help="fitting processes (default 1)")
    p.add_argument("--held-out", default=None, metavar="CAMERA", help="camera JSON for a PSNR check")
    _add_common(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="PSNR/SSIM of a scene against a views directory")
    p.add_argument("scene", help="scene PLY")
    p.add_argument("views_dir", help="directory of NNN.json cameras with NNN.npy or NNN.png images")
    p.add_argument("--ablation", action="store_true",
                   help="evaluate SHOnly, +OrthoSG, +LowDegSH and +Mixed variants of an SH scene")
    p.add_argument("--json", default=None, help="write the table as JSON")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="median frame time and the flops-per-Gaussian table")
    p.add_argument("scene", help="scene PLY")
    p.add_argument("camera", help="camera JSON")
    p.add_argument("--repeat", type=int, default=20, help="timed renders (default 20)")
    p.add_argument("--warmup", type=int, default=3, help="untimed renders first (default 3)")
    p.add_argument("--compare", nargs="*", default=None, metavar="PLY", help="more scenes, timed interleaved")
    p.add_argument("--json", default=None, help="write results as JSON")
    _add_render_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write the synthetic teacher scene and its views")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=1000, help="Gaussians (default 1000)")
    p.add_argument("--views", type=int, default=8, help="training views (default 8)")
    p.add_argument("--held-out", type=int, default=2, help="held-out views (default 2)")
    p.add_argument("--size", type=int, default=128, help="image width and height (default 128)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _apply_threads(args)
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (PLYFormatError, OSError, NumericError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
