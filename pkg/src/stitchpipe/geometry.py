"""Temporally consistent crop-and-align of faces and the exact inverse warp.

Coordinates are continuous pixel positions, origin at the top-left, x along
columns. An :class:`AlignTransform` maps full-frame coordinates to aligned-crop
coordinates; its linear part is restricted to similarity (uniform scale times
rotation), which preserves face aspect ratio.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .errors import DegenerateGeometryError, InvalidInputError

__all__ = [
    "LandmarkTrack",
    "LandmarkScheme",
    "AlignTemplate",
    "AlignTransform",
    "FrameSequence",
    "FIVE_POINT_SCHEME",
    "smooth_landmarks",
    "compute_align_transform",
    "fit_similarity",
    "apply_align",
    "invert_align",
    "save_landmarks",
    "load_landmarks",
    "save_transforms",
    "load_transforms",
]


@dataclass(frozen=True)
class LandmarkTrack:
    """Per-frame facial landmarks: ``points`` is (N, K, 2) in pixels."""

    points: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise InvalidInputError(f"landmark points must be (N, K, 2), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidInputError("need at least one frame of landmarks")
        if pts.shape[1] < 5:
            raise InvalidInputError("need at least 5 landmarks (eyes and mouth)")
        if not np.isfinite(pts).all():
            raise InvalidInputError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def num_frames(self) -> int:
        return self.points.shape[0]

    @property
    def num_landmarks(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class LandmarkScheme:
    """Which landmark indices form the eye centers and the mouth center."""

    left_eye: tuple[int, ...]
    right_eye: tuple[int, ...]
    mouth: tuple[int, ...]

    def anchors(self, landmarks: np.ndarray) -> np.ndarray:
        """Return the (3, 2) array [left-eye-center, right-eye-center, mouth-center]."""
        lm = np.asarray(landmarks, dtype=np.float64)
        k = lm.shape[0]
        for idx in (*self.left_eye, *self.right_eye, *self.mouth):
            if not 0 <= idx < k:
                raise InvalidInputError(f"landmark index {idx} out of range for K={k}")
        return np.stack([
            lm[list(self.left_eye)].mean(axis=0),
            lm[list(self.right_eye)].mean(axis=0),
            lm[list(self.mouth)].mean(axis=0),
        ])


# 5-point convention: [left eye, right eye, nose, left mouth corner, right mouth corner]
FIVE_POINT_SCHEME = LandmarkScheme(left_eye=(0,), right_eye=(1,), mouth=(3, 4))


@dataclass(frozen=True)
class AlignTemplate:
    """Canonical anchor positions as fractions of the crop side.

    Eye centers sit on a horizontal line, symmetric about the vertical midline.
    """

    eye_y: float = 0.40
    inter_eye: float = 0.38
    mouth_y: float = 0.72

    def anchor_points(self, crop_size: int) -> np.ndarray:
        s = float(crop_size)
        half = 0.5 * self.inter_eye
        return np.array([
            [(0.5 - half) * s, self.eye_y * s],
            [(0.5 + half) * s, self.eye_y * s],
            [0.5 * s, self.mouth_y * s],
        ])


@dataclass(frozen=True)
class AlignTransform:
    """2x3 similarity warp mapping full-frame coordinates to crop coordinates."""

    matrix: np.ndarray
    crop_size: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise InvalidInputError(f"transform matrix must be 2x3, got {m.shape}")
        a = m[:, :2]
        det = float(np.linalg.det(a))
        if det <= 0:
            raise DegenerateGeometryError("linear part must have positive determinant")
        s = math.sqrt(det)
        if np.abs(a @ a.T / (s * s) - np.eye(2)).max() > 1e-6:
            raise DegenerateGeometryError("linear part is not a uniform-scale rotation")
        object.__setattr__(self, "matrix", m)

    @property
    def scale(self) -> float:
        return math.sqrt(float(np.linalg.det(self.matrix[:, :2])))

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse_matrix(self) -> np.ndarray:
        a = self.matrix[:, :2]
        if math.sqrt(abs(float(np.linalg.det(a)))) <= 1e-9:
            raise DegenerateGeometryError("transform scale too small to invert")
        a_inv = np.linalg.inv(a)
        return np.concatenate([a_inv, -a_inv @ self.matrix[:, 2:3]], axis=1)

    def to_flat(self) -> list[float]:
        return [float(v) for v in self.matrix.reshape(-1)]

    @classmethod
    def from_flat(cls, values, crop_size: int) -> "AlignTransform":
        return cls(np.asarray(values, dtype=np.float64).reshape(2, 3), crop_size)


@dataclass
class FrameSequence:
    """Ordered frames (N, H, W, C) with values in [0, 1]."""

    frames: np.ndarray
    index_offset: int = 1

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 4:
            raise InvalidInputError(f"frames must be (N, H, W, C), got {arr.shape}")
        if arr.shape[0] < 1:
            raise InvalidInputError("need at least one frame")
        if not np.isfinite(arr).all():
            raise InvalidInputError("frame values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidInputError("frame values must lie in [0, 1]")
        self.frames = arr

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


# --- landmark smoothing ---


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized Gaussian kernel of std ``sigma``, truncated at radius ceil(3*sigma)."""
    radius = math.ceil(3.0 * sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def smooth_landmarks(track: LandmarkTrack, sigma: float) -> LandmarkTrack:
    """Convolve each landmark coordinate along time with a normalized Gaussian.

    Uses reflect padding at the sequence ends so short clips do not droop
    toward zero. ``sigma`` is measured in frames; ``sigma == 0`` is the
    identity.
    """
    if sigma < 0:
        raise InvalidInputError("sigma must be >= 0")
    if sigma == 0:
        return LandmarkTrack(track.points.copy(), track.frame_rate)
    kernel = gaussian_kernel(sigma)
    smoothed = convolve1d(track.points, kernel, axis=0, mode="reflect")
    return LandmarkTrack(smoothed, track.frame_rate)


# --- similarity fit ---


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Closed-form least-squares similarity (s*R | t) mapping src -> dst.

    Umeyama solution restricted to a proper rotation (det +1). Returns the
    2x3 matrix. Degenerate source clouds (all points coincident) raise.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or src.shape[0] < 2:
        raise InvalidInputError("need matching (N>=2, 2) point arrays")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    x = src - mu_s
    y = dst - mu_d
    var_s = float((x * x).sum())
    if var_s <= 1e-18:
        raise DegenerateGeometryError("source points are coincident")
    cov = x.T @ y
    u, sv, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(vt.T @ u.T) < 0:
        d[-1] = -1.0
    rot = vt.T @ np.diag(d) @ u.T
    scale = float((sv * d).sum()) / var_s
    if scale <= 1e-12:
        raise DegenerateGeometryError("similarity fit collapsed to zero scale")
    t = mu_d - scale * rot @ mu_s
    m = np.zeros((2, 3))
    m[:, :2] = scale * rot
    m[:, 2] = t
    return m


def compute_align_transform(
    landmarks_one_frame: np.ndarray,
    crop_size: int,
    scheme: LandmarkScheme = FIVE_POINT_SCHEME,
    template: AlignTemplate = AlignTemplate(),
) -> AlignTransform:
    """Fit the similarity mapping eye/mouth anchors to the canonical template."""
    anchors = scheme.anchors(landmarks_one_frame)
    if not np.isfinite(anchors).all():
        raise InvalidInputError("landmark anchors must be finite")
    if np.linalg.norm(anchors[0] - anchors[1]) < 1e-9:
        raise DegenerateGeometryError("eye centers are coincident")
    matrix = fit_similarity(anchors, template.anchor_points(crop_size))
    return AlignTransform(matrix, crop_size)


# --- warps ---


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``image`` at continuous (xs, ys), replicating edge pixels."""
    h, w = image.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0).astype(image.dtype)
    wy = (ys - y0).astype(image.dtype)
    if image.ndim == 3:
        wx = wx[..., None]
        wy = wy[..., None]
    top = image[y0, x0] * (1 - wx) + image[y0, x1] * wx
    bot = image[y1, x0] * (1 - wx) + image[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def apply_align(frame: np.ndarray, t: AlignTransform) -> np.ndarray:
    """Warp a full frame into the aligned crop by bilinear inverse sampling."""
    frame = np.asarray(frame, dtype=np.float32)
    size = t.crop_size
    inv = t.inverse_matrix()
    us, vs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    xs = inv[0, 0] * us + inv[0, 1] * vs + inv[0, 2]
    ys = inv[1, 0] * us + inv[1, 1] * vs + inv[1, 2]
    return _bilinear_sample(frame, xs, ys)


def invert_align(
    crop: np.ndarray,
    t: AlignTransform,
    frame_hw: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Warp an aligned crop back to full-frame coordinates.

    Returns ``(image, coverage)`` where coverage is 1 on pixels whose centers
    fall inside the crop's sampleable square [0, crop_size-1]^2 and 0
    elsewhere. Outside coverage the image holds edge-replicated values; callers
    mask with coverage before compositing.
    """
    crop = np.asarray(crop, dtype=np.float32)
    h, w = frame_hw
    m = t.matrix  # frame -> crop is the forward direction for this warp
    if t.scale <= 1e-9:
        raise DegenerateGeometryError("transform scale too small to invert")
    xs_f, ys_f = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    us = m[0, 0] * xs_f + m[0, 1] * ys_f + m[0, 2]
    vs = m[1, 0] * xs_f + m[1, 1] * ys_f + m[1, 2]
    size = t.crop_size
    coverage = (
        (us >= 0.0) & (us <= size - 1.0) & (vs >= 0.0) & (vs <= size - 1.0)
    ).astype(np.float32)
    image = _bilinear_sample(crop, us, vs)
    return image, coverage


# --- file formats ---


def save_landmarks(path: str | Path, track: LandmarkTrack) -> None:
    payload = {
        "num_frames": track.num_frames,
        "num_landmarks": track.num_landmarks,
        "frame_rate": track.frame_rate,
        "points": track.points.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_landmarks(path: str | Path) -> LandmarkTrack:
    payload = json.loads(Path(path).read_text())
    pts = np.asarray(payload["points"], dtype=np.float64)
    if pts.shape[:2] != (payload["num_frames"], payload["num_landmarks"]):
        raise InvalidInputError("landmark file header disagrees with point array shape")
    return LandmarkTrack(pts, float(payload.get("frame_rate", 30.0)))


def save_transforms(path: str | Path, transforms: list[AlignTransform]) -> None:
    """Write per-frame 2x3 matrices (row-major, 6 floats each) plus crop size."""
    if not transforms:
        raise InvalidInputError("no transforms to save")
    sizes = {t.crop_size for t in transforms}
    if len(sizes) != 1:
        raise InvalidInputError("all transforms in one file must share crop_size")
    payload = {
        "crop_size": transforms[0].crop_size,
        "matrices": [t.to_flat() for t in transforms],
    }
    Path(path).write_text(json.dumps(payload))


def load_transforms(path: str | Path) -> list[AlignTransform]:
    payload = json.loads(Path(path).read_text())
    size = int(payload["crop_size"])
    return [AlignTransform.from_flat(row, size) for row in payload["matrices"]]
