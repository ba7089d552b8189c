"""Procedural face scenes: a small differentiable renderer and clip sampler.

A scene is a flat 26-float parameter vector describing an ellipse "face"
(position, log radii, mouth curvature), a scalar hue, a 4-dim identity
texture, and four Gaussian background blobs. One renderer draws both full
frames and aligned crops; because all geometry is expressed in log/relative
units the family is exactly closed under translate-and-scale alignment, so a
crop of a rendered frame depicts the same scene with affinely transformed
parameters.

Rotation is deliberately absent from the closure: clip trajectories are
roll-free, and :func:`transform_scene_params` refuses rotating transforms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import InvalidInputError, InvariantViolationError
from ..geometry import AlignTransform, FrameSequence, LandmarkTrack

__all__ = [
    "PARAM_DIM",
    "GEOM",
    "HUE",
    "IDENT",
    "BG",
    "ToySceneParams",
    "canonical_params",
    "render_scene",
    "landmarks_for_params",
    "transform_scene_params",
    "sample_scene_params",
    "SyntheticClip",
    "make_synthetic_video",
]

# Parameter vector layout (26 floats):
#   0:5   geometry  cx, cy, log_rx, log_ry, mouth curvature kappa
#   5:6   hue (warm-cool shift of the face color)
#   6:10  identity texture coefficients (sampled unit-norm)
#   10:26 background: 4 blobs x (amplitude, mu_x, mu_y, log_sigma)
PARAM_DIM = 26
GEOM = slice(0, 5)
HUE = slice(5, 6)
IDENT = slice(6, 10)
BG = slice(10, 26)

# Face proportions in ellipse-relative units (x scaled by rx, y by ry).
EYE_XI = 0.50
EYE_ETA = -0.32
EYE_SIGMA = 0.10
MOUTH_ETA = 0.56
MOUTH_HALF_XI = 0.35
MOUTH_SIGMA = 0.045
# a narrow edge keeps the red-dominant pixel count close to the analytic
# ellipse area while staying smooth enough for finite-difference checks
FACE_EDGE_SHARPNESS = 48.0
MOUTH_EDGE_SHARPNESS = 14.0
TEXTURE_AMP = 1.0

# Palette. The face family is red-dominant and the background is not, which is
# what the parsing head keys on; eye and mouth colors keep red on top so the
# face mask has no holes, and the hue axis never flips the dominance.
FACE_COLOR0 = (0.85, 0.55, 0.45)
HUE_DIR = (0.0, 0.10, -0.08)
EYE_COLOR = (0.28, 0.10, 0.10)
MOUTH_COLOR = (0.52, 0.14, 0.16)
BG_COLOR = (0.30, 0.44, 0.58)
BLOB_COLORS = (
    (0.20, 0.45, 0.75),
    (0.25, 0.60, 0.55),
    (0.45, 0.35, 0.70),
    (0.15, 0.55, 0.65),
)
TEXTURE_CHANNELS = (0.04, 0.10, 0.10)

# Canonical face placement as fractions of the crop side, chosen so that the
# default alignment template (eye line at 0.40, inter-eye gap 0.38, mouth line
# at 0.72) maps this face onto itself:
#   rx = 0.38 / (2*EYE_XI), ry = (0.72-0.40) / (MOUTH_ETA-EYE_ETA),
#   cy = 0.40 - EYE_ETA*ry.
CANON_CX = 0.5
CANON_RX = 0.38 / (2.0 * EYE_XI)
CANON_RY = 0.32 / (MOUTH_ETA - EYE_ETA)
CANON_CY = 0.40 - EYE_ETA * CANON_RY


@dataclass(frozen=True)
class ToySceneParams:
    """Semantic scene coordinates: the ground truth behind every toy image.

    ``background`` holds the realized blob parameters, flattened (amp, mu_x,
    mu_y, log_sigma) x 4; clip samplers derive it from a background seed.
    """

    center: tuple[float, float]
    radii: tuple[float, float]
    hue: float
    mouth_curvature: float
    identity: tuple[float, float, float, float]
    background: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.radii[0] <= 0 or self.radii[1] <= 0:
            raise InvalidInputError("face radii must be positive")
        if len(self.background) != 16:
            raise InvalidInputError("background must hold 4 blobs x 4 values")
        if abs(self.mouth_curvature) > 2.0:
            raise InvalidInputError("mouth curvature outside documented range [-2, 2]")
        if abs(self.hue) > 2.0:
            raise InvalidInputError("hue outside documented range [-2, 2]")

    def as_vector(self) -> np.ndarray:
        p = np.zeros(PARAM_DIM, dtype=np.float64)
        p[0], p[1] = self.center
        p[2], p[3] = math.log(self.radii[0]), math.log(self.radii[1])
        p[4] = self.mouth_curvature
        p[5] = self.hue
        p[IDENT] = self.identity
        p[BG] = self.background
        return p

    @classmethod
    def from_vector(cls, p: np.ndarray) -> "ToySceneParams":
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (PARAM_DIM,):
            raise InvalidInputError(f"expected ({PARAM_DIM},) scene vector, got {p.shape}")
        return cls(
            center=(float(p[0]), float(p[1])),
            radii=(math.exp(float(p[2])), math.exp(float(p[3]))),
            hue=float(p[5]),
            mouth_curvature=float(p[4]),
            identity=tuple(float(v) for v in p[IDENT]),
            background=tuple(float(v) for v in p[BG]),
        )


def canonical_params(size: int) -> np.ndarray:
    """Scene vector the generator associates with the all-zero latent code."""
    s = float(size)
    p = np.zeros(PARAM_DIM, dtype=np.float64)
    p[0] = CANON_CX * s
    p[1] = CANON_CY * s
    p[2] = math.log(CANON_RX * s)
    p[3] = math.log(CANON_RY * s)
    p[4] = 0.0
    p[5] = 0.0
    p[IDENT] = (1.0, 0.0, 0.0, 0.0)
    mus = np.array([(14.0, 12.0), (50.0, 14.0), (12.0, 50.0), (52.0, 48.0)]) * (s / 64.0)
    amps = (0.55, 0.45, 0.50, 0.40)
    sigmas = np.array([9.0, 11.0, 8.0, 10.0]) * (s / 64.0)
    bg = np.stack([amps, mus[:, 0], mus[:, 1], np.log(sigmas)], axis=1)
    p[BG] = bg.reshape(-1)
    return p


def _as_batch(params) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(params)
    if t.dtype not in (torch.float32, torch.float64):
        t = t.to(torch.float32)
    single = t.ndim == 1
    if single:
        t = t[None]
    if t.ndim != 2 or t.shape[1] != PARAM_DIM:
        raise InvalidInputError(f"scene params must be ({PARAM_DIM},) or (B, {PARAM_DIM})")
    return t, single


def render_scene(params, hw: int | tuple[int, int]) -> torch.Tensor:
    """Render scene vectors to images shaped (B, 3, H, W) with values in [0, 1].

    Fully differentiable in ``params``; the final clamp is inactive for
    in-gamut scenes, so gradient checks at nominal parameters see no kinks.
    A single (26,) vector renders to (3, H, W).
    """
    p, single = _as_batch(params)
    if isinstance(hw, int):
        h, w = hw, hw
    else:
        h, w = hw
    dt = p.dtype
    ys = torch.arange(h, dtype=dt)
    xs = torch.arange(w, dtype=dt)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    yy = yy[None]
    xx = xx[None]

    def col(vals):
        return torch.as_tensor(vals, dtype=dt).view(1, 3, 1, 1)

    cx = p[:, 0].view(-1, 1, 1)
    cy = p[:, 1].view(-1, 1, 1)
    rx = torch.exp(p[:, 2]).view(-1, 1, 1)
    ry = torch.exp(p[:, 3]).view(-1, 1, 1)
    kappa = p[:, 4].view(-1, 1, 1)
    hue = p[:, 5].view(-1, 1, 1, 1)
    iota = p[:, IDENT]
    bg = p[:, BG].view(-1, 4, 4)

    xi = (xx - cx) / rx
    eta = (yy - cy) / ry

    # background: flat color plus soft blobs
    pix = col(BG_COLOR).expand(p.shape[0], 3, h, w).clone()
    for b in range(4):
        amp = bg[:, b, 0].view(-1, 1, 1, 1)
        mux = bg[:, b, 1].view(-1, 1, 1)
        muy = bg[:, b, 2].view(-1, 1, 1)
        sig = torch.exp(bg[:, b, 3]).view(-1, 1, 1)
        g = torch.exp(-0.5 * (((xx - mux) ** 2 + (yy - muy) ** 2) / sig**2))
        pix = pix + amp * g[:, None] * (col(BLOB_COLORS[b]) - col(BG_COLOR))

    # face interior: hue-shifted base color modulated by the identity texture
    tex = (
        iota[:, 0].view(-1, 1, 1) * xi
        + iota[:, 1].view(-1, 1, 1) * eta
        + iota[:, 2].view(-1, 1, 1) * (xi**2 - eta**2)
        + iota[:, 3].view(-1, 1, 1) * (xi * eta)
    )
    inner = col(FACE_COLOR0) + hue * col(HUE_DIR) + TEXTURE_AMP * tex[:, None] * col(TEXTURE_CHANNELS)

    for sx in (-EYE_XI, EYE_XI):
        d2 = ((xi - sx) ** 2 + (eta - EYE_ETA) ** 2) / EYE_SIGMA**2
        eye = torch.exp(-0.5 * d2)[:, None]
        inner = inner + eye * (col(EYE_COLOR) - inner)

    mouth_eta = MOUTH_ETA - 0.25 * kappa * ((xi / MOUTH_HALF_XI) ** 2 - 0.5)
    band = torch.exp(-0.5 * ((eta - mouth_eta) / MOUTH_SIGMA) ** 2)
    extent = torch.sigmoid(MOUTH_EDGE_SHARPNESS * (1.0 - (xi / MOUTH_HALF_XI) ** 2))
    mouth = (band * extent)[:, None]
    inner = inner + mouth * (col(MOUTH_COLOR) - inner)

    q = xi**2 + eta**2
    face_m = torch.sigmoid(FACE_EDGE_SHARPNESS * (1.0 - q))[:, None]
    pix = pix + face_m * (inner - pix)
    pix = torch.clamp(pix, 0.0, 1.0)
    return pix[0] if single else pix


def landmarks_for_params(params: np.ndarray) -> np.ndarray:
    """Analytic 5-point landmarks [l-eye, r-eye, nose, l-mouth, r-mouth], (5, 2)."""
    p = np.asarray(params, dtype=np.float64)
    cx, cy = p[0], p[1]
    rx, ry = math.exp(p[2]), math.exp(p[3])
    kappa = p[4]
    # mouth corners sit at xi = +-MOUTH_HALF_XI on the curved mouth line
    corner_eta = MOUTH_ETA - 0.125 * kappa
    return np.array([
        [cx - EYE_XI * rx, cy + EYE_ETA * ry],
        [cx + EYE_XI * rx, cy + EYE_ETA * ry],
        [cx, cy + 0.05 * ry],
        [cx - MOUTH_HALF_XI * rx, cy + corner_eta * ry],
        [cx + MOUTH_HALF_XI * rx, cy + corner_eta * ry],
    ])


def transform_scene_params(params: np.ndarray, t: AlignTransform) -> np.ndarray:
    """Scene vector for the aligned crop of a frame-space scene.

    Exact for translate-and-scale transforms: positions map affinely, log
    sizes shift by log scale, everything dimensionless is unchanged. Rotating
    transforms would leave the family, so they are rejected.
    """
    m = t.matrix
    s = t.scale
    rot = m[:, :2] / s
    if np.abs(rot - np.eye(2)).max() > 1e-6:
        raise InvariantViolationError("scene family is only closed under roll-free alignment")
    p = np.asarray(params, dtype=np.float64).copy()
    log_s = math.log(s)
    p[0:2] = m[:, :2] @ p[0:2] + m[:, 2]
    p[2] += log_s
    p[3] += log_s
    bg = p[BG].reshape(4, 4).copy()
    bg[:, 1:3] = bg[:, 1:3] @ m[:, :2].T + m[:, 2]
    bg[:, 3] += log_s
    p[BG] = bg.reshape(-1)
    return p


def sample_scene_params(
    rng: np.random.Generator,
    size: int,
    jitter: float = 1.0,
) -> np.ndarray:
    """Random in-gamut scene near the canonical crop-space placement."""
    p = canonical_params(size)
    sc = size / 64.0
    p[0] += jitter * rng.uniform(-3.0, 3.0) * sc
    p[1] += jitter * rng.uniform(-3.0, 3.0) * sc
    p[2] += jitter * rng.uniform(-0.15, 0.15)
    p[3] += jitter * rng.uniform(-0.15, 0.15)
    p[4] = jitter * rng.uniform(-0.8, 0.8)
    p[5] = jitter * rng.uniform(-1.0, 1.0)
    iota = rng.normal(size=4)
    p[IDENT] = iota / (np.linalg.norm(iota) + 1e-12)
    bg = p[BG].reshape(4, 4)
    bg[:, 0] = np.clip(bg[:, 0] + jitter * rng.uniform(-0.15, 0.15, size=4), 0.0, 0.8)
    bg[:, 1:3] += jitter * rng.uniform(-6.0, 6.0, size=(4, 2)) * sc
    bg[:, 3] += jitter * rng.uniform(-0.2, 0.2, size=4)
    p[BG] = bg.reshape(-1)
    return p


@dataclass
class SyntheticClip:
    """A rendered clip plus everything the tests need to reason about it."""

    frames: FrameSequence
    landmarks: LandmarkTrack
    params: np.ndarray  # (N, PARAM_DIM) frame-space scene vectors

    @property
    def num_frames(self) -> int:
        return self.params.shape[0]


def make_synthetic_video(
    seed: int,
    num_frames: int = 12,
    height: int = 96,
    width: int = 128,
    frame_rate: float = 30.0,
    motion: float = 1.0,
) -> SyntheticClip:
    """Sample a smooth roll-free head trajectory and render it.

    Identity, hue and the background layout are fixed over the clip (the
    background realization is drawn from the clip seed); position, scale,
    mouth curvature and the blob centers drift sinusoidally so adjacent
    frames are similar but never equal. ``motion=0`` freezes the trajectory.
    """
    if num_frames < 2:
        raise InvalidInputError("a clip needs at least 2 frames")
    rng = np.random.default_rng(seed)
    base = canonical_params(64)
    # place the face off-center in the larger frame
    r_base = rng.uniform(15.0, 19.0)
    scale0 = r_base / math.exp(base[2])
    cx0 = rng.uniform(0.38, 0.62) * width
    cy0 = rng.uniform(0.42, 0.58) * height
    hue = rng.uniform(-0.8, 0.8)
    iota = rng.normal(size=4)
    iota /= np.linalg.norm(iota) + 1e-12

    amp_xy = motion * rng.uniform(2.0, 5.0, size=2)
    amp_scale = motion * rng.uniform(0.03, 0.07)
    amp_kappa = motion * rng.uniform(0.3, 0.6)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=4)
    freqs = rng.uniform(0.8, 1.6, size=4)

    bg0 = base[BG].reshape(4, 4).copy()
    bg0[:, 1] *= width / 64.0
    bg0[:, 2] *= height / 64.0
    bg0[:, 3] += math.log(scale0 * 1.6)
    bg_drift = motion * rng.uniform(-4.0, 4.0, size=(4, 2))

    params = np.zeros((num_frames, PARAM_DIM), dtype=np.float64)
    marks = np.zeros((num_frames, 5, 2), dtype=np.float64)
    for i in range(num_frames):
        u = i / (num_frames - 1)
        p = np.zeros(PARAM_DIM, dtype=np.float64)
        p[0] = cx0 + amp_xy[0] * math.sin(2.0 * math.pi * freqs[0] * u + phases[0])
        p[1] = cy0 + amp_xy[1] * math.sin(2.0 * math.pi * freqs[1] * u + phases[1])
        wob = amp_scale * math.sin(2.0 * math.pi * freqs[2] * u + phases[2])
        p[2] = base[2] + math.log(scale0) + wob
        p[3] = base[3] + math.log(scale0) + wob
        p[4] = amp_kappa * math.sin(2.0 * math.pi * freqs[3] * u + phases[3])
        p[5] = hue
        p[IDENT] = iota
        bg = bg0.copy()
        bg[:, 1:3] += bg_drift * math.sin(2.0 * math.pi * 0.7 * u)
        p[BG] = bg.reshape(-1)
        params[i] = p
        marks[i] = landmarks_for_params(p)

    with torch.no_grad():
        imgs = render_scene(params.astype(np.float32), (height, width))
    frames = np.ascontiguousarray(imgs.numpy().transpose(0, 2, 3, 1))
    return SyntheticClip(
        frames=FrameSequence(frames, index_offset=1),
        landmarks=LandmarkTrack(marks, frame_rate),
        params=params,
    )
