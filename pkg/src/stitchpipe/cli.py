"""Command-line entry points.

Exit codes: 0 success, 2 configuration problem, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, InvalidInputError, StitchPipeError
from .geometry import FrameSequence
from .arrays import load_frames_dir
from .metrics import compute_metrics, save_report
from .pipeline import Pipeline, PipelineConfig, STAGES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stitchpipe",
        description="Temporally consistent semantic editing of faces in video.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline")
    run.add_argument("--config", required=True, help="pipeline config JSON")

    stage = sub.add_parser("stage", help="run a single pipeline stage")
    stage.add_argument("name", choices=STAGES)
    stage.add_argument("--config", required=True, help="pipeline config JSON")

    met = sub.add_parser(
        "metrics", help="score already-aligned edited crops against originals"
    )
    met.add_argument("--edited", required=True, help="dir of edited aligned crops")
    met.add_argument("--original", required=True, help="dir of original aligned crops")
    met.add_argument("--backend", required=True, help="saved toy backend dir")
    met.add_argument("--out", default=None, help="write the JSON report here")

    abl = sub.add_parser("ablate", help="run the pipeline with one stage disabled")
    abl.add_argument("--mode", required=True, choices=["no-encoder", "no-pti", "no-stitch"])
    abl.add_argument("--config", required=True, help="pipeline config JSON")

    toy = sub.add_parser("toy", help="toy backend management")
    toy_sub = toy.add_subparsers(dest="toy_command", required=True)
    build = toy_sub.add_parser("build", help="build and certify a toy backend")
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--out", required=True)
    return parser


def _cmd_run(args) -> int:
    cfg = PipelineConfig.from_json(args.config)
    frames, report = Pipeline(cfg).run_all()
    print(f"done: {len(frames)} frames")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_stage(args) -> int:
    cfg = PipelineConfig.from_json(args.config)
    art = Pipeline(cfg).run_stage(args.name)
    print(f"stage {art.stage}: {len(art.outputs)} outputs (input hash {art.input_hash[:12]})")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    from .toy import load_toy_backend

    backend = load_toy_backend(args.backend)
    edited, _ = load_frames_dir(args.edited)
    original, _ = load_frames_dir(args.original)
    report = compute_metrics(
        FrameSequence(edited), FrameSequence(original), backend.embed_identity
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        save_report(args.out, report)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = PipelineConfig.from_json(args.config)
    flag = args.mode.replace("-", "_")
    cfg = PipelineConfig.from_dict({**cfg.snapshot(), flag: True})
    frames, report = Pipeline(cfg).run_all()
    print(f"ablation {args.mode} done: {len(frames)} frames")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_toy(args) -> int:
    from .toy import ToyBuildConfig, build_toy_models, save_toy_backend

    if args.toy_command == "build":
        backend = build_toy_models(ToyBuildConfig(seed=args.seed))
        save_toy_backend(backend, args.out)
        bounds = backend.certified_bounds
        print(f"built backend {backend.backend_id} -> {args.out}")
        print(f"  code_error_linf:  {bounds['code_error_linf']:.4f}")
        print(f"  recon_crop_linf:  {bounds['recon_crop_linf']:.4f}")
        print(f"  pixel_frame_linf: {bounds['pixel_frame_linf']:.4f}")
        return EXIT_OK
    raise ConfigError(f"unknown toy command {args.toy_command!r}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "stage": _cmd_stage,
        "metrics": _cmd_metrics,
        "ablate": _cmd_ablate,
        "toy": _cmd_toy,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StitchPipeError as exc:
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
