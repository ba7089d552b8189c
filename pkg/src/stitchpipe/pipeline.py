"""Stage orchestration: source -> align -> invert -> tune -> edit -> stitch ->
compose -> metrics, with content-addressed caching and ablation switches.

Every stage writes its outputs under the workdir and records an artifact entry
(input hash, output file hashes, backend tag) in manifest.json. A stage reruns
only when its input hash changes; tampered outputs are detected by hash and
reported rather than silently reused.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .arrays import (
    hash_array,
    hash_file,
    hash_json,
    load_array,
    load_array_collection,
    load_frames_dir,
    load_mask_png,
    save_array,
    save_array_collection,
    save_frames_dir,
    save_mask_png,
)
from .editing import apply_direction, load_direction, render_edits, save_direction
from .errors import (
    ConfigError,
    DependencyError,
    DivergenceError,
    InvalidInputError,
    StaleCacheError,
)
from .geometry import (
    FrameSequence,
    apply_align,
    compute_align_transform,
    load_landmarks,
    load_transforms,
    save_landmarks,
    save_transforms,
    smooth_landmarks,
)
from .interfaces import (
    GeneratorWeights,
    ModelBackend,
    SegMask,
    image_to_tensor,
    tensor_to_image,
)
from .metrics import MetricReport, compute_metrics, save_pair_scores, save_report
from .pti import PivotSet, PtiConfig, crops_to_tensor, invert_frames, run_pti
from .stitching import (
    StitchConfig,
    build_mask_set,
    composite,
    naive_paste,
    run_stitch_tuning,
)
from .toy import build_toy_models, load_toy_backend, make_synthetic_video, save_toy_backend

__all__ = [
    "PipelineConfig",
    "StageArtifact",
    "Pipeline",
    "STAGES",
    "invert_by_optimization",
    "run_all",
]

STAGES = ("align", "invert", "tune", "edit", "stitch", "compose", "metrics")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs; see from_dict for the JSON layout."""

    workdir: str
    backend_dir: str | None = None
    backend_seed: int = 0
    frames_dir: str | None = None
    landmarks_file: str | None = None
    synthetic: dict | None = None
    align_sigma: float = 3.0
    pti: PtiConfig = field(default_factory=PtiConfig)
    stitch: StitchConfig = field(default_factory=StitchConfig)
    direction_name: str = "smile"
    direction_file: str | None = None
    edit_strength: float | None = None
    no_encoder: bool = False
    no_pti: bool = False
    no_stitch: bool = False
    optim_steps: int = 60
    optim_learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.align_sigma < 0:
            raise ConfigError("align_sigma must be >= 0")
        if self.optim_steps < 1:
            raise ConfigError("optim_steps must be >= 1")
        if (self.frames_dir is None) != (self.landmarks_file is None):
            raise ConfigError("frames_dir and landmarks_file must be given together")
        if self.frames_dir is None and self.synthetic is None:
            raise ConfigError("provide either frames_dir+landmarks_file or a synthetic source")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {
            "workdir", "backend_dir", "backend_seed", "frames_dir",
            "landmarks_file", "synthetic", "align_sigma", "pti", "stitch",
            "direction_name", "direction_file", "edit_strength", "no_encoder",
            "no_pti", "no_stitch", "optim_steps", "optim_learning_rate", "seed",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "workdir" not in d:
            raise ConfigError("config must set workdir")
        if isinstance(d.get("pti"), dict):
            d["pti"] = PtiConfig(**d["pti"])
        if isinstance(d.get("stitch"), dict):
            d["stitch"] = StitchConfig(**d["stitch"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["pti"] = asdict(self.pti)
        d["stitch"] = asdict(self.stitch)
        return d


@dataclass(frozen=True)
class StageArtifact:
    """Cache record for one stage run."""

    stage: str
    input_hash: str
    outputs: dict[str, str]  # workdir-relative path -> content hash
    backend_version_tag: str
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageArtifact":
        return cls(**d)


def invert_by_optimization(
    backend: ModelBackend,
    crops: FrameSequence,
    weights0: GeneratorWeights,
    steps: int,
    seed: int,
    learning_rate: float = 0.05,
) -> PivotSet:
    """Per-frame latent optimization from the mean code; the encoder-free path.

    Each frame is fitted independently with Adam on perceptual + 10 * MSE
    reconstruction. Deterministic per seed (the seed fixes iteration order;
    the optimization itself has no sampling).
    """
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    torch.manual_seed(seed)
    targets = crops_to_tensor(crops)
    pivots = []
    hashes = []
    for i in range(len(crops)):
        target = targets[i]
        w = backend.mean_code().to_tensor().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=learning_rate)
        for step in range(steps):
            opt.zero_grad()
            img = backend.generate(w, weights0)
            loss = backend.perceptual_distance(img, target) + 10.0 * torch.mean(
                (img - target) ** 2
            )
            if not torch.isfinite(loss):
                raise DivergenceError(step)
            loss.backward()
            opt.step()
        pivots.append(w.detach().numpy().copy())
        hashes.append(hash_array(crops.frames[i]))
    return PivotSet(np.stack(pivots), tuple(hashes))


class Pipeline:
    """Owns the workdir, the backend, and the stage manifest for one config."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.workdir = Path(os.environ.get("STITCHPIPE_WORKDIR") or cfg.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._manifest_path = self.workdir / "manifest.json"
        self._manifest = self._load_manifest()
        self.backend = self._acquire_backend()
        self._weights0 = self.backend.initial_weights()

    # --- manifest bookkeeping ---

    def _load_manifest(self) -> dict:
        if self._manifest_path.exists():
            return json.loads(self._manifest_path.read_text())
        return {"stages": {}, "package_version": __version__}

    def _save_manifest(self) -> None:
        self._manifest["package_version"] = __version__
        self._manifest["config"] = self.cfg.snapshot()
        self._manifest["backend_version_tag"] = self._weights0.version_tag
        self._manifest_path.write_text(
            json.dumps(self._manifest, indent=2, sort_keys=True)
        )

    def _artifact(self, name: str) -> StageArtifact | None:
        raw = self._manifest["stages"].get(name)
        return StageArtifact.from_dict(raw) if raw else None

    def _hash_outputs(self, relpaths: list[str]) -> dict[str, str]:
        return {rel: hash_file(self.workdir / rel) for rel in relpaths}

    def _verify_artifact(self, art: StageArtifact, consumer: str) -> None:
        """An upstream artifact must still match what was recorded."""
        for rel, digest in art.outputs.items():
            path = self.workdir / rel
            if not path.exists():
                raise DependencyError(consumer, f"{art.stage} output {rel}")
            if hash_file(path) != digest:
                raise StaleCacheError(
                    f"output {rel} of stage {art.stage!r} changed on disk; "
                    f"rerun {art.stage!r} before {consumer!r}"
                )

    def _dependencies(self, name: str) -> list[str]:
        deps = {
            "source": [],
            "align": ["source"],
            "invert": ["align"],
            "tune": ["invert", "align"],
            "edit": ["tune", "invert"],
            "stitch": ["edit", "tune", "align"],
            "compose": [("stitch" if not self.cfg.no_stitch else "edit"), "align", "source"],
            "metrics": ["compose", "align", "source"],
        }
        return deps[name]

    def _run_cached(self, name: str, config_key, compute) -> StageArtifact:
        """Shared caching protocol: verify deps, hash inputs, reuse or rerun."""
        upstream = []
        for dep in self._dependencies(name):
            art = self._artifact(dep)
            if art is None:
                raise DependencyError(name, f"stage {dep} has not run")
            self._verify_artifact(art, name)
            upstream.append({"stage": dep, "hash": art.input_hash, "outputs": art.outputs})
        input_hash = hash_json(
            {
                "stage": name,
                "config": config_key,
                "upstream": upstream,
                "backend": self._weights0.version_tag,
                "format": 1,
            }
        )
        cached = self._artifact(name)
        if cached is not None and cached.input_hash == input_hash:
            if all((self.workdir / rel).exists() for rel in cached.outputs) and all(
                hash_file(self.workdir / rel) == digest
                for rel, digest in cached.outputs.items()
            ):
                return cached
        relpaths, extra = compute()
        art = StageArtifact(
            stage=name,
            input_hash=input_hash,
            outputs=self._hash_outputs(relpaths),
            backend_version_tag=self._weights0.version_tag,
            extra=extra,
        )
        self._manifest["stages"][name] = art.to_dict()
        self._save_manifest()
        return art

    # --- backend ---

    def _acquire_backend(self):
        if self.cfg.backend_dir is not None:
            return load_toy_backend(self.cfg.backend_dir)
        local = self.workdir / "backend"
        if (local / "backend.json").exists():
            return load_toy_backend(local)
        backend = build_toy_models(self.cfg.backend_seed)
        save_toy_backend(backend, local)
        return load_toy_backend(local)

    # --- stage bodies ---

    def _stage_source(self) -> StageArtifact:
        cfg = self.cfg

        def compute():
            out = self.workdir / "source"
            frames_dir = out / "frames"
            frames_dir.mkdir(parents=True, exist_ok=True)
            if cfg.synthetic is not None:
                clip = make_synthetic_video(**cfg.synthetic)
                paths = save_frames_dir(frames_dir, clip.frames.frames)
                save_landmarks(out / "landmarks.json", clip.landmarks)
                save_array(out / "params", clip.params.astype(np.float32))
                rel = [str(p.relative_to(self.workdir)) for p in paths]
                rel += ["source/landmarks.json", "source/params.json", "source/params.bin"]
                return rel, {"num_frames": clip.num_frames, "synthetic": True}
            src = Path(cfg.frames_dir)
            lm = Path(cfg.landmarks_file)
            if not src.is_dir():
                raise ConfigError(f"frames_dir does not exist: {src}")
            if not lm.is_file():
                raise ConfigError(f"landmarks_file does not exist: {lm}")
            frames, offset = load_frames_dir(src)
            track = load_landmarks(lm)
            if track.num_frames != frames.shape[0]:
                raise InvalidInputError(
                    f"landmark frames ({track.num_frames}) != video frames ({frames.shape[0]})"
                )
            paths = save_frames_dir(frames_dir, frames, offset)
            save_landmarks(out / "landmarks.json", track)
            rel = [str(p.relative_to(self.workdir)) for p in paths] + ["source/landmarks.json"]
            return rel, {"num_frames": int(frames.shape[0]), "synthetic": False}

        key = (
            {"synthetic": cfg.synthetic}
            if cfg.synthetic is not None
            else {
                "frames": sorted(
                    hash_file(p) for p in Path(cfg.frames_dir).glob("*.png")
                ),
                "landmarks": hash_file(cfg.landmarks_file),
            }
        )
        return self._run_cached("source", key, compute)

    def _load_source(self) -> tuple[FrameSequence, "object"]:
        frames, offset = load_frames_dir(self.workdir / "source" / "frames")
        track = load_landmarks(self.workdir / "source" / "landmarks.json")
        return FrameSequence(frames, offset), track

    def _stage_align(self) -> StageArtifact:
        size = self.backend.resolution

        def compute():
            frames, track = self._load_source()
            smoothed = smooth_landmarks(track, self.cfg.align_sigma)
            transforms = [
                compute_align_transform(smoothed.points[i], size)
                for i in range(len(frames))
            ]
            crops = np.stack(
                [apply_align(frames.frames[i], t) for i, t in enumerate(transforms)]
            )
            out = self.workdir / "align"
            out.mkdir(exist_ok=True)
            save_transforms(out / "transforms.json", transforms)
            paths = save_frames_dir(out / "crops", np.clip(crops, 0.0, 1.0), frames.index_offset)
            rel = [str(p.relative_to(self.workdir)) for p in paths] + ["align/transforms.json"]
            return rel, {"crop_size": size}

        return self._run_cached("align", {"sigma": self.cfg.align_sigma, "crop": size}, compute)

    def _load_crops(self) -> FrameSequence:
        frames, offset = load_frames_dir(self.workdir / "align" / "crops")
        return FrameSequence(frames, offset)

    def _stage_invert(self) -> StageArtifact:
        cfg = self.cfg

        def compute():
            crops = self._load_crops()
            if cfg.no_encoder:
                pivots = invert_by_optimization(
                    self.backend, crops, self._weights0,
                    cfg.optim_steps, cfg.seed, cfg.optim_learning_rate,
                )
            else:
                pivots = invert_frames(self.backend, crops)
            out = self.workdir / "invert"
            out.mkdir(exist_ok=True)
            save_array(out / "pivots", pivots.pivots)
            (out / "crop_hashes.json").write_text(
                json.dumps(list(pivots.source_crop_hashes))
            )
            rel = ["invert/pivots.json", "invert/pivots.bin", "invert/crop_hashes.json"]
            return rel, {"method": "optimizer" if cfg.no_encoder else "encoder"}

        key = {
            "no_encoder": cfg.no_encoder,
            "optim": [cfg.optim_steps, cfg.optim_learning_rate, cfg.seed]
            if cfg.no_encoder
            else None,
        }
        return self._run_cached("invert", key, compute)

    def _load_pivots(self) -> PivotSet:
        pivots = load_array(self.workdir / "invert" / "pivots")
        hashes = json.loads((self.workdir / "invert" / "crop_hashes.json").read_text())
        return PivotSet(pivots, tuple(hashes))

    def _stage_tune(self) -> StageArtifact:
        cfg = self.cfg

        def compute():
            out = self.workdir / "tune"
            out.mkdir(exist_ok=True)
            if cfg.no_pti:
                weights = self._weights0
                trace_rows = []
            else:
                pivots = self._load_pivots()
                crops = self._load_crops()
                weights, trace_rows = run_pti(
                    self.backend, self._weights0, pivots, crops, cfg.pti
                )
            save_array_collection(out / "weights", weights.to_arrays())
            with open(out / "trace.csv", "w") as f:
                f.write("step,recon_lpips,recon_l2,locality,total\n")
                for row in trace_rows:
                    f.write(
                        f"{row['step']},{row['recon_lpips']:.8e},"
                        f"{row['recon_l2']:.8e},{row['locality']:.8e},{row['total']:.8e}\n"
                    )
            rel = ["tune/trace.csv"] + [
                str(p.relative_to(self.workdir))
                for p in sorted((out / "weights").iterdir())
            ]
            return rel, {
                "skipped": cfg.no_pti,
                "weights_version_tag": weights.version_tag,
            }

        key = {"no_pti": cfg.no_pti, "pti": None if cfg.no_pti else asdict(cfg.pti)}
        return self._run_cached("tune", key, compute)

    def _load_tuned_weights(self) -> GeneratorWeights:
        arrays = load_array_collection(self.workdir / "tune" / "weights")
        return GeneratorWeights.from_arrays(arrays, self.backend.backend_id)

    def _edit_direction(self):
        if self.cfg.direction_file is not None:
            return load_direction(self.cfg.direction_file)
        return self.backend.direction(self.cfg.direction_name)

    def _stage_edit(self) -> StageArtifact:
        cfg = self.cfg

        def compute():
            direction = self._edit_direction()
            strength = (
                direction.default_strength
                if cfg.edit_strength is None
                else cfg.edit_strength
            )
            pivots = self._load_pivots()
            weights = self._load_tuned_weights()
            edited = apply_direction(pivots, direction, strength)
            rendered = render_edits(self.backend, weights, edited)
            out = self.workdir / "edit"
            out.mkdir(exist_ok=True)
            save_array(out / "edited_codes", edited.pivots)
            save_direction(out / "direction_used", direction)
            paths = save_frames_dir(out / "frames", rendered.frames)
            rel = [str(p.relative_to(self.workdir)) for p in paths]
            rel += [
                "edit/edited_codes.json", "edit/edited_codes.bin",
                "edit/direction_used.json", "edit/direction_used.bin",
                "edit/direction_used.meta.json",
            ]
            return rel, {"direction": direction.name, "strength": strength}

        if cfg.direction_file is not None:
            # direction_file names a three-file stem, so key on loaded content
            loaded = load_direction(cfg.direction_file)
            direction_key = {"file": str(cfg.direction_file), "delta": hash_array(loaded.delta)}
        else:
            direction_key = {"name": cfg.direction_name}
        key = {"direction": direction_key, "strength": cfg.edit_strength}
        return self._run_cached("edit", key, compute)

    def _frame_masks(self, x_aligned: np.ndarray, e_frame: np.ndarray, radius: int):
        """Mask the union of face pixels before and after the edit, so the
        edit is preserved even when it grows the face."""
        m = self.backend.segment(image_to_tensor(x_aligned)) | self.backend.segment(
            image_to_tensor(e_frame)
        )
        return build_mask_set(m, radius)

    def _stage_stitch(self) -> StageArtifact:
        cfg = self.cfg

        def compute():
            out = self.workdir / "stitch"
            out.mkdir(exist_ok=True)
            if cfg.no_stitch:
                (out / "SKIPPED").write_text("no_stitch ablation\n")
                return ["stitch/SKIPPED"], {"skipped": True}
            crops = self._load_crops()
            edited_frames, offset = load_frames_dir(self.workdir / "edit" / "frames")
            codes = load_array(self.workdir / "edit" / "edited_codes")
            weights = self._load_tuned_weights()
            radius = cfg.stitch.radius_for(self.backend.resolution)
            stitched = np.empty_like(edited_frames)
            (out / "masks").mkdir(exist_ok=True)
            rel = []
            trace_rows = []
            for i in range(len(crops)):
                masks = self._frame_masks(crops.frames[i], edited_frames[i], radius)
                frame_trace: list = []
                _, s_img = run_stitch_tuning(
                    self.backend, weights, codes[i],
                    image_to_tensor(crops.frames[i]).numpy(),
                    image_to_tensor(edited_frames[i]).numpy(),
                    masks, cfg.stitch, trace=frame_trace,
                )
                stitched[i] = tensor_to_image(s_img)
                for step, l_b, l_m in frame_trace:
                    trace_rows.append((i + offset, step, l_b, l_m))
                m_path = out / "masks" / f"m_{i + offset:06d}.png"
                md_path = out / "masks" / f"md_{i + offset:06d}.png"
                save_mask_png(m_path, masks.m.mask)
                save_mask_png(md_path, masks.m_d.mask)
                rel += [str(m_path.relative_to(self.workdir)), str(md_path.relative_to(self.workdir))]
            paths = save_frames_dir(out / "frames", np.clip(stitched, 0.0, 1.0), offset)
            with open(out / "trace.csv", "w") as f:
                f.write("frame,step,L_b,L_m\n")
                for frame, step, l_b, l_m in trace_rows:
                    f.write(f"{frame},{step},{l_b:.8e},{l_m:.8e}\n")
            rel += [str(p.relative_to(self.workdir)) for p in paths] + ["stitch/trace.csv"]
            return rel, {"skipped": False, "dilation_radius": radius}

        key = {"no_stitch": cfg.no_stitch, "stitch": asdict(cfg.stitch)}
        return self._run_cached("stitch", key, compute)

    def _stage_compose(self) -> StageArtifact:
        cfg = self.cfg

        def compute():
            frames, _ = self._load_source()
            transforms = load_transforms(self.workdir / "align" / "transforms.json")
            out = self.workdir / "compose"
            out.mkdir(exist_ok=True)
            final = np.empty_like(frames.frames)
            if cfg.no_stitch:
                crops = self._load_crops()
                edited, offset = load_frames_dir(self.workdir / "edit" / "frames")
                radius = cfg.stitch.radius_for(self.backend.resolution)
                for i in range(len(frames)):
                    masks = self._frame_masks(crops.frames[i], edited[i], radius)
                    final[i] = naive_paste(
                        edited[i], frames.frames[i], transforms[i], masks.m
                    )
            else:
                stitched, offset = load_frames_dir(self.workdir / "stitch" / "frames")
                for i in range(len(frames)):
                    m_d = load_mask_png(
                        self.workdir / "stitch" / "masks" / f"md_{i + offset:06d}.png"
                    )
                    final[i] = composite(
                        stitched[i], frames.frames[i], transforms[i],
                        SegMask(m_d), cfg.stitch.feather_sigma,
                    )
            paths = save_frames_dir(out / "frames", np.clip(final, 0.0, 1.0), frames.index_offset)
            rel = [str(p.relative_to(self.workdir)) for p in paths]
            return rel, {"no_stitch": cfg.no_stitch, "feather_sigma": cfg.stitch.feather_sigma}

        key = {
            "no_stitch": cfg.no_stitch,
            "feather": cfg.stitch.feather_sigma,
            "radius": cfg.stitch.radius_for(self.backend.resolution),
        }
        return self._run_cached("compose", key, compute)

    def _stage_metrics(self) -> StageArtifact:
        def compute():
            final, _ = load_frames_dir(self.workdir / "compose" / "frames")
            originals, _ = self._load_source()
            transforms = load_transforms(self.workdir / "align" / "transforms.json")
            edited_crops = np.stack(
                [apply_align(final[i], t) for i, t in enumerate(transforms)]
            )
            original_crops = self._load_crops()
            report = compute_metrics(
                FrameSequence(np.clip(edited_crops, 0.0, 1.0)),
                original_crops,
                self.backend.embed_identity,
                keep_pair_scores=True,
            )
            out = self.workdir / "metrics"
            out.mkdir(exist_ok=True)
            save_report(out / "report.json", report)
            save_pair_scores(out / "pairs.csv", report)
            return ["metrics/report.json", "metrics/pairs.csv"], report.to_dict()

        return self._run_cached("metrics", {}, compute)

    # --- public surface ---

    def run_stage(self, name: str) -> StageArtifact:
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}; stages: {', '.join(STAGES)}")
        if name == "align":
            self._stage_source()
        bodies = {
            "align": self._stage_align,
            "invert": self._stage_invert,
            "tune": self._stage_tune,
            "edit": self._stage_edit,
            "stitch": self._stage_stitch,
            "compose": self._stage_compose,
            "metrics": self._stage_metrics,
        }
        return bodies[name]()

    def run_all(self) -> tuple[FrameSequence, MetricReport]:
        """Execute every stage in order; returns final frames and the report."""
        self._stage_source()
        for name in STAGES:
            self.run_stage(name)
        frames, offset = load_frames_dir(self.workdir / "compose" / "frames")
        report_dict = self._artifact("metrics").extra
        report = MetricReport(
            tl_id=report_dict["tl_id"],
            tg_id=report_dict["tg_id"],
            num_frames=report_dict["num_frames"],
            skipped_pairs=report_dict["skipped_pairs"],
        )
        return FrameSequence(frames, offset), report


def run_all(cfg: PipelineConfig) -> tuple[FrameSequence, MetricReport]:
    return Pipeline(cfg).run_all()
