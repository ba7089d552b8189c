"""Portable array, image, and hashing utilities.

Array files are a pair ``<stem>.json`` + ``<stem>.bin``: the sidecar records
``{"name", "shape", "dtype": "f32le", "layout": "row-major"}`` and the binary
holds the raw little-endian float32 payload. Collections (weight blobs) are a
directory of such pairs plus an ``index.json`` listing name -> shape.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

_DTYPE_TAG = "f32le"


def _pair_paths(stem: Path | str) -> tuple[Path, Path]:
    # append, never substitute: array names may contain dots ("features.0.weight")
    stem = Path(stem)
    return stem.parent / (stem.name + ".json"), stem.parent / (stem.name + ".bin")


def save_array(stem: Path | str, arr: np.ndarray, name: str | None = None) -> Path:
    """Write ``arr`` as a sidecar+binary pair; returns the sidecar path."""
    sidecar_path, binary_path = _pair_paths(stem)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    sidecar = {
        "name": name or Path(stem).name,
        "shape": list(arr.shape),
        "dtype": _DTYPE_TAG,
        "layout": "row-major",
    }
    sidecar_path.parent.mkdir(parents=True, exist_ok=True)
    binary_path.write_bytes(arr.tobytes())
    sidecar_path.write_text(json.dumps(sidecar, indent=2))
    return sidecar_path


def load_array(stem: Path | str) -> np.ndarray:
    sidecar_path, binary_path = _pair_paths(stem)
    meta = json.loads(sidecar_path.read_text())
    if meta.get("dtype") != _DTYPE_TAG:
        raise ValueError(f"unsupported dtype tag {meta.get('dtype')!r} in {stem}")
    raw = binary_path.read_bytes()
    arr = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"])
    return arr.astype(np.float32, copy=True)


def save_array_collection(directory: Path | str, arrays: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in arrays.items():
        save_array(directory / name, arr, name=name)
        index[name] = list(np.asarray(arr).shape)
    (directory / "index.json").write_text(json.dumps(index, indent=2))


def load_array_collection(directory: Path | str) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return {name: load_array(directory / name) for name in index}


# --- image I/O (frames as numbered PNGs, masks as 0/255 single-channel) ---


def frame_filename(index: int) -> str:
    return f"{index:06d}.png"


def save_frame_png(path: Path | str, frame: np.ndarray) -> None:
    """Save a float [0,1] HxWxC (or HxW) image as 8-bit PNG."""
    arr = np.asarray(frame, dtype=np.float64)
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path)


def load_frame_png(path: Path | str) -> np.ndarray:
    """Load a PNG as float32 in [0,1], HxWxC."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr


def save_mask_png(path: Path | str, mask: np.ndarray) -> None:
    m = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(m, mode="L").save(path)


def load_mask_png(path: Path | str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def save_frames_dir(directory: Path | str, frames: np.ndarray, index_offset: int = 1) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = directory / frame_filename(index_offset + i)
        save_frame_png(path, frame)
        paths.append(path)
    return paths


def load_frames_dir(directory: Path | str) -> tuple[np.ndarray, int]:
    """Load all numbered PNGs in a directory; returns (frames, index_offset)."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = np.stack([load_frame_png(p) for p in paths])
    offset = int(paths[0].stem)
    return frames, offset


# --- content hashing ---


def hash_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def hash_array(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    header = f"{arr.dtype.str}|{arr.shape}".encode()
    return hash_bytes(header, arr.tobytes())


def hash_file(path: Path | str) -> str:
    return hash_bytes(Path(path).read_bytes())


def hash_json(obj) -> str:
    return hash_bytes(json.dumps(obj, sort_keys=True, default=str).encode())
