"""Temporal identity-consistency scores for edited videos.

Both scores compare identity similarity WITHIN the edited video against the
same pairs within the original video, so an edit is penalized for making
identity flicker over time, not for changing identity per se. The local score
uses adjacent frame pairs; the global score uses all frame pairs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geometry import FrameSequence
from .interfaces import IdentityEmbedding, image_to_tensor

__all__ = [
    "MetricReport",
    "pair_similarity",
    "tl_id",
    "tg_id",
    "compute_metrics",
    "corpus_average",
    "save_report",
    "load_report",
    "save_pair_scores",
]

DENOMINATOR_EPS = 1e-4


@dataclass(frozen=True)
class MetricReport:
    """Identity-consistency summary for one video (or a corpus average)."""

    tl_id: float
    tg_id: float
    num_frames: int
    skipped_pairs: int = 0
    per_pair_scores: tuple[tuple[int, int, float], ...] | None = field(
        default=None, compare=False
    )

    def __post_init__(self):
        if not (np.isfinite(self.tl_id) and np.isfinite(self.tg_id)):
            raise InvalidInputError("metric scores must be finite")

    def to_dict(self) -> dict:
        return {
            "tl_id": self.tl_id,
            "tg_id": self.tg_id,
            "num_frames": self.num_frames,
            "skipped_pairs": self.skipped_pairs,
        }


def pair_similarity(a: IdentityEmbedding, b: IdentityEmbedding) -> float:
    """Cosine similarity; embeddings are unit vectors so this is a dot product."""
    return float(a.vector @ b.vector)


def _embed_all(frames: FrameSequence, embedder) -> list[IdentityEmbedding]:
    return [embedder(image_to_tensor(f)) for f in frames.frames]


def _ratio_mean(
    pairs: list[tuple[int, int]],
    edited: list[IdentityEmbedding],
    original: list[IdentityEmbedding],
) -> tuple[float, int, list[tuple[int, int, float]]]:
    """Mean of edited/original pair-similarity ratios; near-zero denominators
    are skipped and counted rather than blowing up the mean."""
    ratios: list[tuple[int, int, float]] = []
    skipped = 0
    for i, j in pairs:
        denom = pair_similarity(original[i], original[j])
        if abs(denom) < DENOMINATOR_EPS:
            skipped += 1
            continue
        ratios.append((i, j, pair_similarity(edited[i], edited[j]) / denom))
    if not ratios:
        raise InvalidInputError("all frame pairs were skipped; original video has no usable identity signal")
    return float(np.mean([r for _, _, r in ratios])), skipped, ratios


def _check_inputs(edited: FrameSequence, original: FrameSequence) -> int:
    n = len(original)
    if len(edited) != n:
        raise InvalidInputError("edited and original must have equal frame counts")
    if n < 2:
        raise InvalidInputError("need at least 2 frames")
    return n


def tl_id(edited: FrameSequence, original: FrameSequence, embedder) -> float:
    """Adjacent-pair identity consistency, normalized by the original video."""
    n = _check_inputs(edited, original)
    e, o = _embed_all(edited, embedder), _embed_all(original, embedder)
    score, _, _ = _ratio_mean([(i, i + 1) for i in range(n - 1)], e, o)
    return score


def tg_id(edited: FrameSequence, original: FrameSequence, embedder) -> float:
    """All-pairs identity consistency, normalized by the original video."""
    n = _check_inputs(edited, original)
    e, o = _embed_all(edited, embedder), _embed_all(original, embedder)
    score, _, _ = _ratio_mean(
        [(i, j) for i in range(n) for j in range(i + 1, n)], e, o
    )
    return score


def compute_metrics(
    edited: FrameSequence,
    original: FrameSequence,
    embedder,
    keep_pair_scores: bool = False,
) -> MetricReport:
    """Both scores in one pass (embeddings are computed once)."""
    n = _check_inputs(edited, original)
    e, o = _embed_all(edited, embedder), _embed_all(original, embedder)
    local, skipped_l, pairs_l = _ratio_mean(
        [(i, i + 1) for i in range(n - 1)], e, o
    )
    global_, skipped_g, pairs_g = _ratio_mean(
        [(i, j) for i in range(n) for j in range(i + 1, n)], e, o
    )
    return MetricReport(
        tl_id=local,
        tg_id=global_,
        num_frames=n,
        skipped_pairs=skipped_l + skipped_g,
        per_pair_scores=tuple(pairs_l + pairs_g) if keep_pair_scores else None,
    )


def corpus_average(reports: list[MetricReport]) -> MetricReport:
    """Unweighted mean over videos of each score."""
    if not reports:
        raise InvalidInputError("cannot average an empty report list")
    return MetricReport(
        tl_id=float(np.mean([r.tl_id for r in reports])),
        tg_id=float(np.mean([r.tg_id for r in reports])),
        num_frames=int(sum(r.num_frames for r in reports)),
        skipped_pairs=int(sum(r.skipped_pairs for r in reports)),
    )


def save_report(path: str | Path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def load_report(path: str | Path) -> MetricReport:
    return MetricReport(**json.loads(Path(path).read_text()))


def save_pair_scores(path: str | Path, report: MetricReport) -> None:
    if report.per_pair_scores is None:
        raise InvalidInputError("report was computed without per-pair scores")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_i", "frame_j", "ratio"])
        writer.writerows(report.per_pair_scores)
