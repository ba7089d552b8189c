"""Shared fixtures: a session toy backend (disk-cached between runs) and a
frozen stitching suite derived from it."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(4)

from stitchpipe.arrays import hash_array, save_frames_dir, load_frames_dir
from stitchpipe.geometry import (
    FrameSequence,
    apply_align,
    compute_align_transform,
    smooth_landmarks,
)
from stitchpipe.pti import PivotSet, PtiConfig, invert_frames, run_pti
from stitchpipe.toy import (
    ToyBuildConfig,
    build_toy_models,
    load_toy_backend,
    make_synthetic_video,
    save_toy_backend,
)

CACHE_ROOT = Path(__file__).parent / "_cache"


def _code_fingerprint() -> str:
    """Backend caches must die when the code that built them changes."""
    src = Path(__file__).parent.parent / "src" / "stitchpipe"
    h = hashlib.sha256()
    for name in ("toy/scene.py", "toy/backend.py", "interfaces.py", "editing.py", "arrays.py"):
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def backend():
    """Certified toy backend, seed 0; built once and cached on disk."""
    cache = CACHE_ROOT / f"backend-0-{_code_fingerprint()}"
    if not (cache / "backend.json").exists():
        built = build_toy_models(ToyBuildConfig(seed=0))
        save_toy_backend(built, cache)
    return load_toy_backend(cache)


@pytest.fixture(scope="session")
def backend_dir(backend):
    return str(CACHE_ROOT / f"backend-0-{_code_fingerprint()}")


@pytest.fixture(scope="session")
def weights0(backend):
    return backend.initial_weights()


@pytest.fixture(scope="session")
def aligned_clip(backend):
    """An 8-frame clip with aligned crops and transforms, PNG-quantized the
    same way the pipeline stores them."""
    clip = make_synthetic_video(seed=101, num_frames=8)
    smoothed = smooth_landmarks(clip.landmarks, 3.0)
    size = backend.resolution
    transforms = [
        compute_align_transform(smoothed.points[i], size)
        for i in range(clip.num_frames)
    ]
    crops = np.stack(
        [apply_align(clip.frames.frames[i], t) for i, t in enumerate(transforms)]
    )
    crops = np.rint(np.clip(crops, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0
    return {
        "clip": clip,
        "transforms": transforms,
        "crops": FrameSequence(crops),
    }


@pytest.fixture(scope="session")
def stitch_suite(backend, weights0, aligned_clip, tmp_path_factory):
    """Frozen inputs for stitching: crops, short-PTI weights, edited renders.

    Edited renders pass through 8-bit PNGs, as they do between pipeline
    stages, so edit-preservation losses start at the quantization floor
    rather than exactly zero.
    """
    crops = aligned_clip["crops"]
    pivots = invert_frames(backend, crops)
    cfg = PtiConfig(passes_per_frame=12, seed=0)
    weights, _ = run_pti(backend, weights0, pivots, crops, cfg)
    direction = backend.direction("smile")
    edited = pivots.pivots + np.float32(direction.default_strength) * direction.delta
    with torch.no_grad():
        rendered = backend.generate(torch.from_numpy(edited), weights)
    arr = np.clip(rendered.numpy().transpose(0, 2, 3, 1), 0.0, 1.0)
    tmp = tmp_path_factory.mktemp("stitch_suite")
    save_frames_dir(tmp, arr)
    quantized, _ = load_frames_dir(tmp)
    return {
        "crops": crops,
        "pivots": pivots,
        "weights": weights,
        "edited_codes": edited,
        "edited_frames": quantized,
    }
