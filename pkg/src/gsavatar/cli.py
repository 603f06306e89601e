"""Command-line entry point: fit, train, render, eval, synth.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.
Set ``GSAVATAR_LOG`` (DEBUG, INFO, WARNING, ...) to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bodymodel as bm

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("gsavatar")


def _cmd_synth(args) -> int:
    from .pipeline import make_synthetic_fixture

    make_synthetic_fixture(args.out, seed=args.seed, n_train=args.train_frames, n_test=args.test_frames,
                           size=args.size)
    print(f"wrote synthetic fixture to {args.out}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    from .align import FitConfig, fit_sequence, read_detections
    from .pipeline import write_pose

    asset = bm.load_model(args.model)
    det_dir = Path(args.detections)
    files = sorted(det_dir.glob("*.json"))
    if not files:
        raise ValueError(f"no detection files in {det_dir}")
    result = fit_sequence([read_detections(f) for f in files], asset, FitConfig())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, pose in zip(result.frame_names, result.poses):
        write_pose(out / f"{Path(name).stem}.json", pose)
    report = {"frames": [Path(n).stem for n in result.frame_names], "skipped": result.skipped,
              "stage_status": result.stage_status, "behind_camera": result.behind_camera,
              "missing_terms": result.missing_terms,
              "final_objective": [h[-1] for h in result.stage_histories]}
    (out / "fit_report.json").write_text(json.dumps(report, indent=2))
    print(f"fitted {len(result.poses)} frames ({len(result.skipped)} skipped) -> {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .pipeline import load_config, load_dataset, train

    asset = bm.load_model(args.model)
    overrides = list(args.set or [])
    if args.iterations is not None:
        overrides.append(f"iterations={args.iterations}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    config = load_config(args.config, overrides)
    dataset = load_dataset(args.dataset, "train", asset)
    result = train(dataset, asset, config, args.out)
    print(f"trained {config.iterations} iterations, {len(result.avatar.gaussians)} Gaussians -> {args.out}")
    return EXIT_OK


def _cmd_render(args) -> int:
    from .pipeline import load_avatar, read_pose, render_novel
    from .rasterizer import Camera

    asset = bm.load_model(args.model)
    avatar, _ = load_avatar(args.avatar)
    meta = json.loads(Path(args.camera).read_text())
    camera = Camera.from_dict(meta.get("camera", meta))
    src = Path(args.poses)
    files = sorted(src.glob("*.json")) if src.is_dir() else [src]
    poses = [read_pose(f) for f in files]
    render_novel(avatar, asset, poses, camera, args.out, [f.stem for f in files])
    print(f"rendered {len(poses)} poses -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .pipeline import evaluate, load_avatar, load_dataset

    asset = bm.load_model(args.model)
    avatar, _ = load_avatar(args.avatar)
    dataset = load_dataset(args.dataset, args.split, asset)
    result = evaluate(avatar, asset, dataset)
    result.write_csv(args.out)
    for region, s in result.summary.items():
        print(f"{region:5s} PSNR {s['psnr']:.3f} dB  SSIM {s['ssim']:.4f}  ({s['frames']} frames)")
    if result.skipped:
        print(f"skipped empty regions: {', '.join(result.skipped)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsavatar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic cylinder-arm fixture")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-frames", type=int, default=24)
    s.add_argument("--test-frames", type=int, default=8)
    s.add_argument("--size", type=int, default=128)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("fit", help="fit body-model poses to per-frame detections")
    s.add_argument("detections", help="directory of detection JSON files")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="output directory for pose JSON files")
    s.set_defaults(func=_cmd_fit)

    s = sub.add_parser("train", help="train an avatar on a dataset")
    s.add_argument("dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="flat key = value config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("render", help="render an avatar in new poses")
    s.add_argument("--avatar", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--poses", required=True, help="pose JSON file or directory")
    s.add_argument("--camera", required=True, help="camera JSON (a dataset camera.json works)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM per region on a dataset split")
    s.add_argument("dataset")
    s.add_argument("--avatar", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", default="metrics.csv")
    s.set_defaults(func=_cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    from .densify import DensifyError
    from .pipeline import NumericalError

    level = os.environ.get("GSAVATAR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericalError, DensifyError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
