"""Contracts between the editing pipeline and a pretrained model family.

The pipeline never touches model internals: it drives a :class:`ModelBackend`
through encode / generate / segment / embed calls. Images at this boundary are
torch float32 tensors shaped (C, H, W) with values in [0, 1]; latent codes are
numpy arrays shaped (layers, dim).
"""
from __future__ import annotations

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, InvalidInputError

__all__ = [
    "LatentCode",
    "GeneratorWeights",
    "IdentityEmbedding",
    "SegMask",
    "ModelBackend",
    "save_backend_manifest",
    "load_backend_manifest",
    "image_to_tensor",
    "tensor_to_image",
]


def image_to_tensor(frame: np.ndarray) -> torch.Tensor:
    """(H, W, C) float [0,1] numpy image -> (C, H, W) float32 tensor."""
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim != 3:
        raise InvalidInputError(f"expected (H, W, C) image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def tensor_to_image(img: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor -> (H, W, C) float32 numpy image."""
    if img.ndim != 3:
        raise InvalidInputError(f"expected (C, H, W) tensor, got shape {tuple(img.shape)}")
    return np.ascontiguousarray(img.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32))


@dataclass(frozen=True)
class LatentCode:
    """Per-layer latent codes, shape (layers, dim) float32."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float32)
        if arr.ndim != 2:
            raise InvalidInputError(f"latent code must be (layers, dim), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise InvalidInputError("latent code must be finite")
        object.__setattr__(self, "array", arr)

    @property
    def layers(self) -> int:
        return self.array.shape[0]

    @property
    def dim(self) -> int:
        return self.array.shape[1]

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.array.copy())


@dataclass(frozen=True)
class IdentityEmbedding:
    """Unit-L2 feature vector describing who is in the image."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        n = float(np.linalg.norm(v))
        if not np.isfinite(v).all():
            raise InvalidInputError("identity embedding must be finite")
        if abs(n - 1.0) > 1e-6:
            raise InvalidInputError(f"identity embedding must be unit norm, got {n}")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class SegMask:
    """Binary face mask at crop resolution, values exactly 0 or 1 (float32)."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float32)
        if m.ndim != 2:
            raise InvalidInputError(f"mask must be 2-d, got shape {m.shape}")
        if not np.isin(m, (0.0, 1.0)).all():
            raise InvalidInputError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "mask", m)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def __and__(self, other: "SegMask") -> "SegMask":
        return SegMask(self.mask * other.mask)

    def __or__(self, other: "SegMask") -> "SegMask":
        return SegMask(np.maximum(self.mask, other.mask))

    def __xor__(self, other: "SegMask") -> "SegMask":
        return SegMask(np.abs(self.mask - other.mask))


def _content_tag(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().numpy().astype(np.float32)
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(t.tobytes())
    return h.hexdigest()[:16]


class GeneratorWeights:
    """Named generator parameters, cloneable and assignable as a unit.

    ``version_tag`` is a content hash, so any change to the parameters yields
    a new tag; caches key on it to tell apart the pretrained weights from
    their tuned variants.
    """

    def __init__(self, tensors: dict[str, torch.Tensor], backend_id: str = "unknown"):
        if not tensors:
            raise InvalidInputError("generator weights mapping is empty")
        self._tensors = dict(tensors)
        self.backend_id = backend_id
        self.version_tag = _content_tag(self._tensors)

    @property
    def tensors(self) -> dict[str, torch.Tensor]:
        return self._tensors

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def clone(self) -> "GeneratorWeights":
        return GeneratorWeights(
            {k: v.detach().clone() for k, v in self._tensors.items()}, self.backend_id
        )

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self._tensors.values())

    def max_abs_delta(self, other: "GeneratorWeights") -> float:
        if self.names() != other.names():
            raise ContractError("weight sets have different parameter names")
        worst = 0.0
        for k, v in self._tensors.items():
            worst = max(worst, float((v.detach() - other._tensors[k].detach()).abs().max()))
        return worst

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in self._tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], backend_id: str = "unknown") -> "GeneratorWeights":
        return cls(
            {k: torch.from_numpy(np.asarray(v, dtype=np.float32).copy()) for k, v in arrays.items()},
            backend_id,
        )


class ModelBackend(ABC):
    """Pretrained model family behind the pipeline: generator, encoder, heads."""

    @property
    @abstractmethod
    def backend_id(self) -> str: ...

    @property
    @abstractmethod
    def latent_layers(self) -> int: ...

    @property
    @abstractmethod
    def latent_dim(self) -> int: ...

    @property
    @abstractmethod
    def resolution(self) -> int: ...

    @property
    @abstractmethod
    def certified_bounds(self) -> dict: ...

    @abstractmethod
    def mean_code(self) -> LatentCode:
        """Latent the generator treats as the canonical (average) face."""

    @abstractmethod
    def initial_weights(self) -> GeneratorWeights:
        """Fresh clone of the pretrained generator weights."""

    @abstractmethod
    def encode(self, image: torch.Tensor) -> LatentCode:
        """Invert an aligned crop into per-layer codes (no gradients)."""

    @abstractmethod
    def generate(self, code: torch.Tensor, weights: GeneratorWeights) -> torch.Tensor:
        """Render codes to an image, differentiable in both arguments.

        Accepts a single (layers, dim) code or a batch (B, layers, dim) and
        returns (3, H, W) or (B, 3, H, W) accordingly.
        """

    @abstractmethod
    def segment(self, image: torch.Tensor) -> SegMask:
        """Binary face-region mask for an aligned crop."""

    @abstractmethod
    def embed_identity(self, image: torch.Tensor) -> IdentityEmbedding:
        """Unit-norm identity feature vector for an aligned crop."""

    @abstractmethod
    def perceptual_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale feature stack for the perceptual loss (differentiable)."""

    @abstractmethod
    def direction(self, name: str): ...

    @abstractmethod
    def direction_names(self) -> list[str]: ...

    def perceptual_distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Mean squared feature distance across scales; zero iff a == b."""
        fa = self.perceptual_features(a)
        fb = self.perceptual_features(b)
        total = None
        for xa, xb in zip(fa, fb):
            term = torch.mean((xa - xb) ** 2)
            total = term if total is None else total + term
        return total / len(fa)

    def sample_code(self, generator: torch.Generator) -> LatentCode:
        """Draw a code from the backend's latent prior (ball around the mean)."""
        mean = self.mean_code().array
        noise = torch.randn(mean.shape, generator=generator, dtype=torch.float32)
        return LatentCode(mean + 0.3 * noise.numpy())

    def generate_image(self, code: LatentCode, weights: GeneratorWeights | None = None) -> torch.Tensor:
        """Convenience: render a LatentCode with no_grad, default weights."""
        if weights is None:
            weights = self.initial_weights()
        with torch.no_grad():
            return self.generate(code.to_tensor(), weights)

    def manifest(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "latent_layers": self.latent_layers,
            "latent_dim": self.latent_dim,
            "resolution": self.resolution,
            "certified_bounds": self.certified_bounds,
        }


def save_backend_manifest(path: str | Path, backend: ModelBackend) -> None:
    Path(path).write_text(json.dumps(backend.manifest(), indent=2, sort_keys=True))


def load_backend_manifest(path: str | Path) -> dict:
    payload = json.loads(Path(path).read_text())
    required = {"backend_id", "latent_layers", "latent_dim", "resolution", "certified_bounds"}
    missing = required - payload.keys()
    if missing:
        raise ContractError(f"backend manifest missing keys: {sorted(missing)}")
    return payload
