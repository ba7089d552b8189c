"""Semantic latent editing: shift every pivot along a named direction.

Directions are stored unit-normalized; the magnitude of an edit comes from the
scalar strength (``default_strength`` reproduces the direction author's
intended step). ``layer_mask`` restricts the shift to a subset of code layers;
unlisted layers pass through bitwise untouched.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .arrays import load_array, save_array
from .errors import ContractError, InvalidInputError
from .geometry import FrameSequence
from .interfaces import GeneratorWeights, ModelBackend, tensor_to_image
from .pti import PivotSet

__all__ = [
    "EditDirection",
    "apply_direction",
    "render_edits",
    "save_direction",
    "load_direction",
]


@dataclass(frozen=True)
class EditDirection:
    """A named latent offset with a default step size."""

    name: str
    delta: np.ndarray
    default_strength: float = 1.0
    layer_mask: tuple[int, ...] | None = None

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float32)
        if d.ndim != 2:
            raise InvalidInputError(f"direction delta must be (layers, dim), got {d.shape}")
        if not np.isfinite(d).all():
            raise InvalidInputError("direction delta must be finite")
        if self.layer_mask is not None:
            mask = tuple(sorted(set(int(l) for l in self.layer_mask)))
            if mask and (mask[0] < 0 or mask[-1] >= d.shape[0]):
                raise InvalidInputError(f"layer_mask {mask} out of range for {d.shape[0]} layers")
            object.__setattr__(self, "layer_mask", mask)
        object.__setattr__(self, "delta", d)

    @classmethod
    def from_raw(cls, name: str, raw: np.ndarray, layer_mask=None) -> "EditDirection":
        """Normalize a raw offset; its norm becomes the default strength."""
        raw = np.asarray(raw, dtype=np.float64)
        norm = float(np.linalg.norm(raw))
        if norm <= 1e-12:
            raise InvalidInputError("direction offset is numerically zero")
        return cls(name, (raw / norm).astype(np.float32), norm, layer_mask)

    def layers_applied(self) -> tuple[int, ...]:
        if self.layer_mask is None:
            return tuple(range(self.delta.shape[0]))
        return self.layer_mask


def apply_direction(pivots: PivotSet, d: EditDirection, strength: float) -> PivotSet:
    """Shift all pivots by strength * delta on the direction's layers."""
    if d.delta.shape != pivots.pivots.shape[1:]:
        raise ContractError(
            f"direction shape {d.delta.shape} does not match pivots {pivots.pivots.shape[1:]}"
        )
    edited = pivots.pivots.copy()
    for layer in d.layers_applied():
        edited[:, layer, :] = edited[:, layer, :] + np.float32(strength) * d.delta[layer]
    return PivotSet(edited, pivots.source_crop_hashes)


def render_edits(
    backend: ModelBackend,
    weights: GeneratorWeights,
    edited: PivotSet,
    index_offset: int = 1,
) -> FrameSequence:
    """Render every edited code with the given weights."""
    codes = edited.to_tensor()
    with torch.no_grad():
        imgs = backend.generate(codes, weights)
    frames = np.stack([tensor_to_image(img) for img in imgs])
    return FrameSequence(frames, index_offset=index_offset)


def save_direction(stem: str | Path, d: EditDirection) -> None:
    """Direction file: latent array pair plus a .meta.json descriptor."""
    stem = Path(stem)
    save_array(stem, d.delta, name=d.name)
    meta = {
        "name": d.name,
        "default_strength": d.default_strength,
        "layer_mask": list(d.layer_mask) if d.layer_mask is not None else None,
    }
    (stem.parent / (stem.name + ".meta.json")).write_text(json.dumps(meta, indent=2))


def load_direction(stem: str | Path) -> EditDirection:
    stem = Path(stem)
    delta = load_array(stem)
    meta = json.loads((stem.parent / (stem.name + ".meta.json")).read_text())
    mask = meta.get("layer_mask")
    return EditDirection(
        name=meta["name"],
        delta=delta,
        default_strength=float(meta.get("default_strength", 1.0)),
        layer_mask=tuple(mask) if mask is not None else None,
    )
