"""Command-line entry point: ``msfusion {calibrate,fuse,match,synth}``.

Exit codes: 0 success (soft per-pair failures included), 1 usage or
configuration error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import features as ft
from .calib import CalibConfig, CameraParams, calibrate, load_observations
from .config import PipelineConfig, load_config
from .errors import ImageIOError, ManifestError, MsFusionError
from .imgcore import load_image, save_image, to_gray8
from .pipeline import dumps, run_batch
from .synth import SynthSpec, make_synthetic

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2

log = logging.getLogger("msfusion")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_calibrate(args) -> int:
    obs = load_observations(args.observations)
    init = CameraParams.from_dict(_read_json(Path(args.init)))
    cfg = CalibConfig(max_iters=args.max_iters)
    _, report = calibrate(init, obs, cfg)
    text = dumps(report.to_dict())
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    log.info("calibration %s after %d iterations, E %.6g -> %.6g", report.termination, report.iterations, report.initial_E, report.final_E)
    return EXIT_OK


def cmd_fuse(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.workers:
        cfg = cfg.model_copy(update={"workers": args.workers})
    calibration = _read_json(Path(args.calibration)) if args.calibration else None
    session = run_batch(args.ir_manifest, args.rgb_manifest, cfg, args.out, calibration)
    log.info(
        "%d pairs, %d composites, %d soft and %d hard failures",
        session.pair_count,
        session.composites_written,
        session.soft_failures,
        session.hard_failures,
    )
    return EXIT_OK


def cmd_match(args) -> int:
    img_1 = load_image(args.img1)
    img_2 = load_image(args.img2)
    g1, g2 = to_gray8(img_1), to_gray8(img_2)
    if args.edge:
        g1, g2 = ft.edge_image(g1, args.edge_sigma), ft.edge_image(g2, args.edge_sigma)
    k1 = ft.detect(g1, args.tau, max_keypoints=args.max_keypoints)
    k2 = ft.detect(g2, args.tau, max_keypoints=args.max_keypoints)
    pattern = ft.make_pattern(args.bits, args.seed)
    d1 = ft.describe_many(ft.smooth(g1, args.smoothing), k1, pattern)
    d2 = ft.describe_many(ft.smooth(g2, args.smoothing), k2, pattern)
    matches = ft.match(d1, d2, args.max_distance, not args.no_cross_check, args.ratio)
    save_image(ft.render_matches(img_1, img_2, k1, k2, matches), args.out)
    if args.dump:
        dump = Path(args.dump)
        _write(dump / "keypoints_1.csv", ft.keypoints_csv(k1))
        _write(dump / "keypoints_2.csv", ft.keypoints_csv(k2))
        _write(dump / "descriptors_1.txt", ft.descriptors_hex(d1))
        _write(dump / "descriptors_2.txt", ft.descriptors_hex(d2))
        rows = ["index_1,index_2,distance"] + [f"{m.index_1},{m.index_2},{m.distance}" for m in matches]
        _write(dump / "matches.csv", "\n".join(rows) + "\n")
    print(f"{len(k1)} and {len(k2)} keypoints, {len(matches)} matches")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(_read_json(Path(args.spec)))
    rgb, thermal, H = make_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(rgb, out / "rgb.png")
    save_image(thermal, out / "thermal.png")
    _write(out / "ground_truth.json", dumps({"H": H.to_list(), "spec": spec.to_dict()}))
    _write(out / "ir_manifest.csv", "ir-0,0.0,thermal.png\n")
    _write(out / "rgb_manifest.csv", "rgb-0,0.0,rgb.png\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msfusion", description="Thermal/RGB registration and fusion toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", parents=[common], help="refine camera parameters from 3-D/2-D observations")
    c.add_argument("--observations", required=True, help="CSV of X,Y,Z,u,v rows")
    c.add_argument("--init", required=True, help="JSON file with the initial camera parameters")
    c.add_argument("--max-iters", type=int, default=100)
    c.add_argument("--out", help="write the report here instead of stdout")
    c.set_defaults(func=cmd_calibrate)

    f = sub.add_parser("fuse", parents=[common], help="synchronize two streams and write composites")
    f.add_argument("--ir-manifest", required=True)
    f.add_argument("--rgb-manifest", required=True)
    f.add_argument("--config", help="pipeline configuration (JSON); defaults apply when omitted")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--calibration", help="calibration report to record in the session summary")
    f.add_argument("--workers", type=int, help="override the configured worker count")
    f.set_defaults(func=cmd_fuse)

    m = sub.add_parser("match", parents=[common], help="draw feature matches between two images")
    m.add_argument("--img1", required=True)
    m.add_argument("--img2", required=True)
    m.add_argument("--tau", type=float, default=ft.DEFAULT_TAU)
    m.add_argument("--out", required=True, help="output image (.png, .ppm)")
    m.add_argument("--edge", action="store_true", help="detect on gradient magnitude (cross-modal pairs)")
    m.add_argument("--edge-sigma", type=float, default=2.0)
    m.add_argument("--smoothing", type=float, default=0.0, help="Gaussian sigma applied before describing")
    m.add_argument("--max-keypoints", type=int)
    m.add_argument("--bits", type=int, default=ft.DEFAULT_BITS)
    m.add_argument("--seed", type=int, default=ft.DEFAULT_SEED)
    m.add_argument("--max-distance", type=int)
    m.add_argument("--ratio", type=float)
    m.add_argument("--no-cross-check", action="store_true")
    m.add_argument("--dump", help="directory for keypoint, descriptor and match dumps")
    m.set_defaults(func=cmd_match)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic pair with known homography")
    s.add_argument("--spec", required=True, help="JSON synth spec")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # --help and --version exit 0; parse errors exit with EXIT_USAGE
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ImageIOError, ManifestError, OSError) as exc:
        print(f"msfusion: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MsFusionError, ValueError, TypeError, KeyError) as exc:
        print(f"msfusion: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
