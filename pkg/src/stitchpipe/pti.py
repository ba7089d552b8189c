"""Pivot extraction and generator fine-tuning around all pivots at once.

The tuning objective per minibatch is

    mean_i [ perceptual(c_i, G(w_i)) + lambda_l2 * MSE(c_i, G(w_i)) ]
        + lambda_r * locality

where the locality term compares the tuned and original generators at a code
interpolated from a random prior sample toward a random pivot, anchoring the
generator to its pretrained behavior away from the pivots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .arrays import hash_array
from .errors import ContractError, DivergenceError, InvalidInputError
from .geometry import FrameSequence
from .interfaces import GeneratorWeights, LatentCode, ModelBackend, image_to_tensor

__all__ = [
    "PivotSet",
    "PtiConfig",
    "invert_frames",
    "locality_regularizer",
    "pti_objective",
    "pti_objective_terms",
    "run_pti",
]


@dataclass(frozen=True)
class PivotSet:
    """Per-frame pivot codes (N, layers, dim) plus source-crop content hashes."""

    pivots: np.ndarray
    source_crop_hashes: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.asarray(self.pivots, dtype=np.float32)
        if arr.ndim != 3:
            raise InvalidInputError(f"pivots must be (N, layers, dim), got {arr.shape}")
        if arr.shape[0] < 1:
            raise InvalidInputError("pivot set is empty")
        if not np.isfinite(arr).all():
            raise InvalidInputError("pivots must be finite")
        if self.source_crop_hashes and len(self.source_crop_hashes) != arr.shape[0]:
            raise InvalidInputError("one source hash per pivot required")
        object.__setattr__(self, "pivots", arr)
        object.__setattr__(self, "source_crop_hashes", tuple(self.source_crop_hashes))

    def __len__(self) -> int:
        return self.pivots.shape[0]

    def code(self, i: int) -> LatentCode:
        return LatentCode(self.pivots[i])

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.pivots.copy())


@dataclass(frozen=True)
class PtiConfig:
    """Tuning hyperparameters; defaults follow the reference recipe."""

    lambda_l2: float = 10.0
    lambda_r: float = 0.1
    learning_rate: float = 3e-5
    passes_per_frame: int = 80
    batch_size: int = 4
    seed: int = 0
    locality_alpha: float = 30.0

    def __post_init__(self):
        if self.lambda_l2 < 0 or self.lambda_r < 0:
            raise InvalidInputError("loss weights must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.passes_per_frame < 1:
            raise InvalidInputError("passes_per_frame must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")


def invert_frames(backend: ModelBackend, crops: FrameSequence) -> PivotSet:
    """Encode every crop; pivot order follows frame order."""
    codes = []
    hashes = []
    for i in range(len(crops)):
        frame = crops.frames[i]
        codes.append(backend.encode(image_to_tensor(frame)).array)
        hashes.append(hash_array(frame))
    return PivotSet(np.stack(codes), tuple(hashes))


def _weights_tensors(weights) -> dict[str, torch.Tensor]:
    if isinstance(weights, GeneratorWeights):
        return weights.tensors
    return weights


def locality_regularizer(
    backend: ModelBackend,
    weights,
    weights0,
    pivots: PivotSet,
    sampler_seed: int,
    alpha: float = 30.0,
) -> torch.Tensor:
    """Penalty keeping the tuned generator close to the original away from pivots.

    A prior sample is pulled toward a random pivot by ``alpha`` along the
    normalized sample-to-pivot direction (the reference recipe's mixing), and
    the two generators are compared at that code. Zero when weights match.
    The pivot is drawn from a canonically sorted view of the set, so the value
    depends on the pivot set but not on frame ordering.
    """
    g = torch.Generator().manual_seed(sampler_seed)
    w_z = backend.sample_code(g).to_tensor()
    idx = int(torch.randint(0, len(pivots), (1,), generator=g).item())
    flat = pivots.pivots.reshape(len(pivots), -1)
    canonical = np.lexsort(flat.T[::-1])
    w_p = torch.from_numpy(pivots.pivots[canonical[idx]].copy())
    direction = w_p - w_z
    norm = torch.linalg.vector_norm(direction)
    w_r = w_z + alpha * direction / torch.clamp(norm, min=1e-8)
    img_new = backend.generate(w_r, weights)
    with torch.no_grad():
        img_old = backend.generate(w_r, weights0)
    return backend.perceptual_distance(img_new, img_old) + torch.mean((img_new - img_old) ** 2)


def pti_objective_terms(
    backend: ModelBackend,
    weights,
    weights0,
    pivots: PivotSet,
    crop_tensors: torch.Tensor,
    cfg: PtiConfig,
    minibatch,
    sampler_seed: int = 0,
) -> dict[str, torch.Tensor]:
    """Loss pieces for one minibatch: perceptual, l2, locality, total."""
    idx = list(minibatch)
    if not idx:
        raise ContractError("minibatch is empty")
    n = len(pivots)
    if any(i < 0 or i >= n for i in idx):
        raise ContractError(f"minibatch indices out of range 0..{n - 1}")
    if crop_tensors.shape[0] != n:
        raise ContractError("crops and pivots disagree on frame count")

    codes = torch.from_numpy(pivots.pivots[idx].copy())
    targets = crop_tensors[idx]
    recon = backend.generate(codes, weights)
    lpips = backend.perceptual_distance(recon, targets)
    l2 = torch.mean((recon - targets) ** 2)
    loc = locality_regularizer(
        backend, weights, weights0, pivots, sampler_seed, cfg.locality_alpha
    )
    total = lpips + cfg.lambda_l2 * l2 + cfg.lambda_r * loc
    return {"recon_lpips": lpips, "recon_l2": l2, "locality": loc, "total": total}


def pti_objective(
    backend: ModelBackend,
    weights,
    weights0,
    pivots: PivotSet,
    crop_tensors: torch.Tensor,
    cfg: PtiConfig,
    minibatch,
    sampler_seed: int = 0,
) -> torch.Tensor:
    return pti_objective_terms(
        backend, weights, weights0, pivots, crop_tensors, cfg, minibatch, sampler_seed
    )["total"]


def crops_to_tensor(crops: FrameSequence) -> torch.Tensor:
    return torch.from_numpy(
        np.ascontiguousarray(crops.frames.transpose(0, 3, 1, 2).astype(np.float32))
    )


def run_pti(
    backend: ModelBackend,
    weights0: GeneratorWeights,
    pivots: PivotSet,
    crops: FrameSequence,
    cfg: PtiConfig,
) -> tuple[GeneratorWeights, list[dict]]:
    """Tune generator weights around all pivots; returns (tuned weights, trace).

    Runs passes_per_frame * N / batch_size seeded-shuffled minibatch steps of
    Adam from ``weights0``. The trace holds one row per step with the loss
    decomposition; a non-finite loss aborts with the failing step number.
    """
    n = len(pivots)
    if len(crops) != n:
        raise ContractError("crops and pivots disagree on frame count")
    crop_tensors = crops_to_tensor(crops)
    base = {k: v.detach().clone() for k, v in weights0.tensors.items()}
    params = {k: v.detach().clone().requires_grad_(True) for k, v in base.items()}
    opt = torch.optim.Adam(params.values(), lr=cfg.learning_rate)
    total_steps = math.ceil(cfg.passes_per_frame * n / cfg.batch_size)
    order_rng = np.random.default_rng(cfg.seed)

    trace: list[dict] = []
    queue: list[int] = []
    for step in range(total_steps):
        if len(queue) < cfg.batch_size:
            queue.extend(order_rng.permutation(n).tolist())
        minibatch = [queue.pop(0) for _ in range(min(cfg.batch_size, n))]
        opt.zero_grad()
        terms = pti_objective_terms(
            backend, params, base, pivots, crop_tensors, cfg, minibatch,
            sampler_seed=cfg.seed + step,
        )
        loss = terms["total"]
        if not torch.isfinite(loss):
            raise DivergenceError(step)
        loss.backward()
        opt.step()
        trace.append(
            {
                "step": step,
                "recon_lpips": float(terms["recon_lpips"].detach()),
                "recon_l2": float(terms["recon_l2"].detach()),
                "locality": float(terms["locality"].detach()),
                "total": float(loss.detach()),
            }
        )
    tuned = GeneratorWeights(
        {k: v.detach().clone() for k, v in params.items()}, weights0.backend_id
    )
    return tuned, trace
