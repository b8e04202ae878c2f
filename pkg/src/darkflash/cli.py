"""``darkflash`` command line: simulate, meter, capture, register, fuse, evaluate, demo.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import burst, fusion, metering, metrics, registration, sim
from .core import as_gray
from .errors import (
    DarkflashError,
    DegenerateError,
    DomainError,
    NumericError,
)
from .fileio import dumps_json, read_json, read_pfm, write_json, write_pfm

log = logging.getLogger("darkflash")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
VARIANT_CHOICES = (1, 3, 5, 7)
DEMO_RAW_SIZE = 768
WORKING_SIZE = 512


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    p.add_argument("--preset", choices=sim.PRESETS, default=None, help="rig response preset")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="darkflash", description="Stereo dark-flash rig simulator and fusion pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write the bundled synthetic scene")
    p.add_argument("--out", required=True, type=Path, help="scene JSON path")
    p.add_argument("--size", type=int, default=WORKING_SIZE)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--depth", type=float, default=2.0)
    p.add_argument("--layered", action="store_true")
    p.add_argument("--baseline-focal", type=float, default=24.0)

    p = sub.add_parser("meter", parents=[common], help="run automatic exposure on a scene")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None, help="metering JSON (default: standard output)")

    p = sub.add_parser("capture", parents=[common], help="render a capture session")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--metering", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--variant", type=int, choices=VARIANT_CHOICES, default=None, help="only this T/n variant")
    p.add_argument("--flash", choices=burst.DARK_FLASHES, default=None, help="only this dark flash")

    p = sub.add_parser("register", parents=[common], help="flow from a captured burst")
    p.add_argument("--burst", required=True, type=Path)
    p.add_argument("--t", type=int, default=0, help="index of the flash-off pair")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--tile", type=int, default=16)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--size", type=int, default=WORKING_SIZE)
    p.add_argument("--warped-out", type=Path, default=None, help="also write the warped cam1 flash-on RGB")
    p.add_argument("--flash-out", type=Path, default=None, help="also write cam2's flash-on image")

    p = sub.add_parser("fuse", parents=[common], help="fuse a warped RGB with a flash image")
    p.add_argument("--rgb", required=True, type=Path)
    p.add_argument("--flash", required=True, type=Path)
    p.add_argument("--grid", default="identity", help="'identity' or a grid JSON file")
    p.add_argument("--slice", type=Path, default=None, help="slice map PFM (default: luma)")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM after brightness matching")
    p.add_argument("--test", required=True, type=Path)
    p.add_argument("--ref", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("demo", parents=[common], help="run the whole chain on the bundled scene")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--variant", type=int, choices=VARIANT_CHOICES, default=5)
    p.add_argument("--flash", choices=burst.DARK_FLASHES, default="NIR")
    p.add_argument("--raw-size", type=int, default=DEMO_RAW_SIZE)
    p.add_argument("--size", type=int, default=WORKING_SIZE, help="working resolution, at most --raw-size")
    return parser


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(2, "no such file", str(path))
    return path


def _load_scene(path: Path, preset=None):
    scene, header = sim.load_scene(_require(path))
    rig = sim.make_rig(preset or header.get("preset", "ideal"), float(header.get("baseline_focal", 24.0)))
    return scene, rig


def _capture_fn(scene, rig, seed):
    def capture(camera_id, settings):
        noise = sim.NoiseParams(scene.noise.read_sigma, scene.noise.shot_scale, seed)
        settings = sim.with_noise(settings, noise)
        return sim.render_frame(scene, rig.cameras[camera_id], settings, rig.flashes[settings.flash])

    return capture


def _selector(variant, flash):
    def keep(spec):
        if spec.tag == "long_exposure":
            return True
        return (variant is None or spec.variant == variant) and (flash is None or spec.flash_kind == flash)

    return keep


def cmd_simulate(args):
    scene = sim.make_demo_scene(args.size, args.size, seed=args.scene_seed, depth=args.depth, layered=args.layered)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    sim.save_scene(scene, args.out, preset=args.preset or "ideal", baseline_focal=args.baseline_focal)
    print(args.out)


def cmd_meter(args):
    scene, rig = _load_scene(args.scene, args.preset)
    result = metering.run_full_metering(_capture_fn(scene, rig, args.seed), metering.MeteringConfig(), rig.cameras)
    if args.out is None:
        sys.stdout.write(dumps_json(result.to_dict()))
    else:
        write_json(args.out, result.to_dict())
        print(args.out)


def cmd_capture(args):
    scene, rig = _load_scene(args.scene, args.preset)
    m = metering.MeteringResult.from_dict(read_json(_require(args.metering)))
    plan = burst.plan_session(m)
    manifest = burst.execute_session(
        plan, scene, rig, args.out, seed=args.seed, select=_selector(args.variant, args.flash),
        scene_ref=args.scene.name, workers=args.threads,
    )
    print(f"{len(manifest.frames)} frames -> {args.out}")


def _flow_image(flow):
    return np.concatenate([flow, np.zeros(flow.shape[:2] + (1,))], axis=-1)


def cmd_register(args):
    manifest = burst.load_manifest(_require(args.burst))
    size = (args.size, args.size)
    reg = registration.register_pair(
        manifest, args.t, size=size, tile_size=args.tile, params=registration.SolverParams(lambda_smooth=args.lam)
    )
    write_pfm(args.out, _flow_image(reg.flow))
    if args.warped_out or args.flash_out:
        _, _, guide_spec, alt_on = registration.find_pair(manifest, args.t)
        if args.warped_out:
            rgb = registration.prepare(manifest.load_frame(alt_on), size)
            write_pfm(args.warped_out, registration.warp_gather(rgb, reg.flow))
        if args.flash_out:
            write_pfm(args.flash_out, reg.guide)
    print(args.out)


def cmd_fuse(args):
    rgb = read_pfm(_require(args.rgb))
    flash = as_gray(read_pfm(_require(args.flash)))
    grid, slice_map = None, None
    if args.grid != "identity":
        grid, slice_map = fusion.load_grid(_require(Path(args.grid)))
    if args.slice is not None:
        slice_map = read_pfm(_require(args.slice))
    write_pfm(args.out, fusion.fuse_pipeline(rgb, flash, grid, slice_map))
    print(args.out)


def cmd_evaluate(args):
    report = metrics.evaluate(read_pfm(_require(args.test)), read_pfm(_require(args.ref)))
    if args.out is None:
        sys.stdout.write(dumps_json(report.to_dict()))
    else:
        write_json(args.out, report.to_dict())
        print(args.out)


def cmd_demo(args):
    """Bundled scene -> metering -> capture (one variant + long exposure) -> register -> fuse -> evaluate."""
    if not 0 < args.size <= args.raw_size:
        raise UsageError(f"demo: --size {args.size} must lie in [1, --raw-size {args.raw_size}]")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    preset = args.preset or "ideal"
    scene_path = out / "scene" / "scene.json"
    scene = sim.make_demo_scene(args.raw_size, args.raw_size, seed=0)
    sim.save_scene(scene, scene_path, preset=preset)
    scene, rig = _load_scene(scene_path, preset)

    m = metering.run_full_metering(_capture_fn(scene, rig, args.seed), metering.MeteringConfig(), rig.cameras)
    write_json(out / "metering.json", m.to_dict())

    plan = burst.plan_session(m)
    manifest = burst.execute_session(
        plan, scene, rig, out / "session", seed=args.seed, select=_selector(args.variant, args.flash),
        scene_ref="../scene/scene.json", workers=args.threads,
    )

    size = (args.size, args.size)
    reg = registration.register_pair(manifest, 0, size=size)
    write_pfm(out / "flow.pfm", _flow_image(reg.flow))

    _, _, _, alt_on = registration.find_pair(manifest, 0)
    warped = registration.warp_gather(registration.prepare(manifest.load_frame(alt_on), size), reg.flow)
    long_cam1 = next(s for s in manifest.specs() if s.tag == "long_exposure" and s.camera_id == "cam1")
    reference = registration.warp_gather(registration.prepare(manifest.load_frame(long_cam1), size), reg.flow)
    flash = as_gray(reg.guide)

    fused = fusion.fuse_pipeline(warped, flash)
    write_pfm(out / "warped_rgb.pfm", warped)
    write_pfm(out / "flash.pfm", flash)
    write_pfm(out / "reference.pfm", reference)
    write_pfm(out / "fused.pfm", fused)

    report = {
        "reference": "cam1 long exposure warped to cam2",
        "fused": metrics.evaluate(fused, reference).to_dict(),
        "noisy_input": metrics.evaluate(warped, reference).to_dict(),
    }
    write_json(out / "report.json", report)
    sys.stdout.write(dumps_json(report))


COMMANDS = {
    "simulate": cmd_simulate,
    "meter": cmd_meter,
    "capture": cmd_capture,
    "register": cmd_register,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "demo": cmd_demo,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        sys.stderr.write(f"darkflash: file not found: {exc.filename}\n")
        return EXIT_DATA
    except (NumericError, DegenerateError, DomainError, FloatingPointError) as exc:
        sys.stderr.write(f"darkflash: numeric error: {exc}\n")
        return EXIT_NUMERIC
    except (DarkflashError, OSError) as exc:
        sys.stderr.write(f"darkflash: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
