"""Command-line surface: translate, keyframes, flow, metrics, selftest."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .config import ConfigError, default_config, load_config
from .flow import estimate_flow_block_matching, save_flow
from .frames import FrameIOError, read_frames, read_ppm, write_frames
from .pipeline import pixel_mse, select_keyframes, translate_video
from .selftest import run_selftest
from .tensorio import TensorFormatError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidguide", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_translate = sub.add_parser("translate", help="translate a frame sequence")
    p_translate.add_argument("--in", dest="in_dir", required=True)
    p_translate.add_argument("--out", dest="out_dir", required=True)
    p_translate.add_argument("--config", dest="config_path", required=True)
    p_translate.add_argument("--seed", type=int, default=None)

    p_keyframes = sub.add_parser("keyframes", help="print the keyframe plan")
    p_keyframes.add_argument("--in", dest="in_dir", required=True)
    p_keyframes.add_argument("--smin", type=int, required=True)
    p_keyframes.add_argument("--smax", type=int, required=True)

    p_flow = sub.add_parser("flow", help="estimate flow between two frames")
    p_flow.add_argument("--src", required=True)
    p_flow.add_argument("--dst", required=True)
    p_flow.add_argument("--out", required=True)

    p_metrics = sub.add_parser("metrics", help="flow-aligned consistency metric")
    p_metrics.add_argument("--in", dest="in_dir", required=True)

    sub.add_parser("selftest", help="run built-in numerical checks")
    return parser


def _cmd_translate(args) -> int:
    config = load_config(args.config_path)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    frames = read_frames(args.in_dir)
    started = time.perf_counter()
    result = translate_video(frames, config)
    elapsed = time.perf_counter() - started
    out_dir = Path(args.out_dir)
    write_frames(result.frames, out_dir)
    manifest_text = json.dumps(result.manifest, indent=2, sort_keys=True) + "\n"
    (out_dir / "manifest.json").write_text(manifest_text, encoding="utf-8")
    print(f"translated {len(result.frames)} frames in {elapsed:.1f}s", file=sys.stderr)
    return 0


def _cmd_keyframes(args) -> int:
    frames = read_frames(args.in_dir)
    plan = select_keyframes(frames, args.smin, args.smax)
    print(json.dumps(plan.indices))
    return 0


def _cmd_flow(args) -> int:
    src = read_ppm(args.src)
    dst = read_ppm(args.dst)
    defaults = default_config()
    field = estimate_flow_block_matching(src, dst, defaults.block, defaults.radius)
    save_flow(field, args.out)
    return 0


def _cmd_metrics(args) -> int:
    frames = read_frames(args.in_dir)
    defaults = default_config()
    value = pixel_mse(frames, defaults.block, defaults.radius, defaults.tau)
    print(json.dumps({"pixel_mse": value}))
    return 0


def _cmd_selftest(args) -> int:
    results = run_selftest()
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{status:4s} {r.name} ({r.detail})")
    return 0 if all(r.ok for r in results) else 1


_COMMANDS = {
    "translate": _cmd_translate,
    "keyframes": _cmd_keyframes,
    "flow": _cmd_flow,
    "metrics": _cmd_metrics,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FrameIOError, TensorFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
