#!/usr/bin/env python3
"""Run the full pipeline and its three ablations on one clip, side by side.

Prints a small table of TL-ID / TG-ID per variant:

    full        encoder pivots, tuned weights, boundary stitching
    no-encoder  pivots from per-frame latent optimization instead
    no-pti      pretrained weights, no tuning pass
    no-stitch   edited crops pasted back without boundary tuning

All variants share one backend directory so scores are comparable.
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

from stitchpipe.pipeline import PipelineConfig, run_all
from stitchpipe.pti import PtiConfig
from stitchpipe.stitching import StitchConfig
from stitchpipe.toy import ToyBuildConfig, build_toy_models, save_toy_backend

VARIANTS = (
    ("full", {}),
    ("no-encoder", {"no_encoder": True}),
    ("no-pti", {"no_pti": True}),
    ("no-stitch", {"no_stitch": True}),
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="ablation_run", help="output directory")
    ap.add_argument("--seed", type=int, default=3, help="clip seed")
    ap.add_argument("--frames", type=int, default=8, help="number of frames")
    ap.add_argument("--direction", default="smile", help="edit direction name")
    ap.add_argument("--passes", type=int, default=40,
                    help="tuning passes per frame (80 is the full recipe)")
    ap.add_argument("--stitch-iters", type=int, default=60,
                    help="stitching iterations per frame (100 is the full recipe)")
    args = ap.parse_args()

    root = Path(args.workdir)
    backend_dir = root / "backend"
    if not (backend_dir / "backend.json").exists():
        save_toy_backend(build_toy_models(ToyBuildConfig(seed=0)), backend_dir)

    rows = []
    for name, flags in VARIANTS:
        cfg = PipelineConfig(
            workdir=str(root / name),
            backend_dir=str(backend_dir),
            synthetic={"seed": args.seed, "num_frames": args.frames},
            pti=PtiConfig(passes_per_frame=args.passes),
            stitch=StitchConfig(iterations=args.stitch_iters),
            direction_name=args.direction,
            **flags,
        )
        start = time.monotonic()
        _, report = run_all(cfg)
        rows.append((name, report.tl_id, report.tg_id, time.monotonic() - start))
        print(f"  {name}: done in {rows[-1][3]:.1f}s")

    print()
    print(f"{'variant':<12} {'TL-ID':>8} {'TG-ID':>8} {'time':>7}")
    for name, tl, tg, dt in rows:
        print(f"{name:<12} {tl:>8.4f} {tg:>8.4f} {dt:>6.1f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
