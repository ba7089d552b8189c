"""Desk-scale model family over procedural scenes, with certified behavior.

The generator decodes per-layer codes into scene parameters through small
linear heads (adapters + decode matrices, initialized to an exact inverse of
the canonical code mapping) and renders them with the shared scene renderer;
a zero-initialized residual canvas gives tuning stages per-pixel capacity.
The encoder is a small conv net fitted by short seeded training, so inversion
is genuinely approximate. Certification freezes empirical bounds (code error,
Lipschitz estimates, identity separation, monotone edit effect) that the rest
of the test suite asserts against.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import maximum_filter
from torch import nn

from ..arrays import (
    hash_bytes,
    load_array_collection,
    save_array_collection,
    save_frame_png,
)
from ..editing import EditDirection, load_direction, save_direction
from ..errors import CertificationError, ContractError, InvalidInputError
from ..geometry import (
    AlignTransform,
    apply_align,
    compute_align_transform,
    invert_align,
    smooth_landmarks,
)
from ..interfaces import (
    GeneratorWeights,
    IdentityEmbedding,
    LatentCode,
    ModelBackend,
    SegMask,
    image_to_tensor,
    tensor_to_image,
)
from . import scene
from .scene import (
    BG,
    GEOM,
    HUE,
    IDENT,
    canonical_params,
    make_synthetic_video,
    render_scene,
    sample_scene_params,
    transform_scene_params,
)

__all__ = [
    "ToyBuildConfig",
    "ToyCertificate",
    "ToyMapping",
    "ToyEncoder",
    "PerceptualPyramid",
    "ToyBackend",
    "build_toy_models",
    "save_toy_backend",
    "load_toy_backend",
]

LAYER_SLICES = (GEOM, HUE, IDENT, BG)
LAYER_SCALES = (
    np.array([6.0, 6.0, 0.12, 0.12, 0.5]),
    np.array([0.6]),
    np.array([0.5, 0.5, 0.5, 0.5]),
    np.tile([0.25, 8.0, 8.0, 0.2], 4),
)
SEG_THRESHOLD = 0.0
EMBED_WINDOW_RHO = 0.30


@dataclass(frozen=True)
class ToyBuildConfig:
    seed: int = 0
    resolution: int = 64
    latent_layers: int = 4
    latent_dim: int = 32
    encoder_steps: int = 1500
    encoder_batch: int = 48
    encoder_lr: float = 2e-3
    cert_samples: int = 500
    lipschitz_pairs: int = 200
    identity_pairs: int = 40
    monotone_scenes: int = 50
    blend_pairs: int = 100

    def __post_init__(self):
        if self.latent_layers != len(LAYER_SLICES):
            raise InvalidInputError("layer count is fixed by the scene block structure")
        if self.latent_dim < max(s.stop - s.start for s in LAYER_SLICES):
            raise InvalidInputError("latent_dim must be at least the widest scene block")


@dataclass(frozen=True)
class ToyCertificate:
    """Frozen empirical bounds from the certification run."""

    code_error_linf: float
    recon_crop_linf: float
    roundtrip_warp_linf: float
    pixel_frame_linf: float
    lipschitz_generator: float
    lipschitz_encoder: float
    pivot_smoothness_gain: float
    identity_same_min: float
    identity_diff_max: float
    identity_threshold: float
    monotone_direction: str
    monotone_pass_rate: float
    monotone_ok: bool
    blend_violation_rate: float
    blend_ok: bool
    golden_image_sha256: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyCertificate":
        return cls(**d)


class ToyMapping:
    """Canonical affine map between scene parameters and per-layer codes.

    Each layer owns one scene block: codes enter through a fixed orthonormal
    embedding E_l (k_l x D), so code_for_params(params_for_code(w)) recovers
    the block-subspace component of w exactly, and round-tripping parameters
    is exact.
    """

    def __init__(self, seed: int, resolution: int, latent_dim: int):
        self.resolution = resolution
        self.latent_dim = latent_dim
        self.p0 = canonical_params(resolution)
        rng = np.random.default_rng(seed)
        self.embeddings: list[np.ndarray] = []
        for sl in LAYER_SLICES:
            k = sl.stop - sl.start
            a = rng.normal(size=(latent_dim, k))
            q, _ = np.linalg.qr(a)
            self.embeddings.append(np.ascontiguousarray(q.T))  # (k, D), orthonormal rows

    @property
    def layers(self) -> int:
        return len(LAYER_SLICES)

    def code_for_params(self, params: np.ndarray) -> np.ndarray:
        p = np.asarray(params, dtype=np.float64)
        single = p.ndim == 1
        if single:
            p = p[None]
        w = np.zeros((p.shape[0], self.layers, self.latent_dim))
        for l, (sl, sc) in enumerate(zip(LAYER_SLICES, LAYER_SCALES)):
            y = (p[:, sl] - self.p0[sl]) / sc
            w[:, l] = y @ self.embeddings[l]
        w = w.astype(np.float32)
        return w[0] if single else w

    def params_for_code(self, code: np.ndarray) -> np.ndarray:
        w = np.asarray(code, dtype=np.float64)
        single = w.ndim == 2
        if single:
            w = w[None]
        p = np.tile(self.p0, (w.shape[0], 1))
        for l, (sl, sc) in enumerate(zip(LAYER_SLICES, LAYER_SCALES)):
            p[:, sl] = self.p0[sl] + sc * (w[:, l] @ self.embeddings[l].T)
        return p[0] if single else p

    def initial_weight_tensors(self, resolution: int) -> dict[str, torch.Tensor]:
        """Generator parameters whose initial decode reproduces this mapping."""
        d = self.latent_dim
        tensors: dict[str, torch.Tensor] = {}
        for l, sl in enumerate(LAYER_SLICES):
            k = sl.stop - sl.start
            tensors[f"adapter_P_{l}"] = torch.eye(d)
            tensors[f"adapter_q_{l}"] = torch.zeros(d)
            tensors[f"decode_W_{l}"] = torch.from_numpy(
                self.embeddings[l].astype(np.float32).copy()
            )
            tensors[f"decode_b_{l}"] = torch.zeros(k)
        n_pix = 3 * resolution * resolution
        tensors["residual_W"] = torch.zeros(n_pix, self.layers * d)
        tensors["residual_b"] = torch.zeros(n_pix)
        return tensors

    def torch_consts(self, dtype: torch.dtype) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        p0 = [torch.as_tensor(self.p0[sl], dtype=dtype) for sl in LAYER_SLICES]
        sc = [torch.as_tensor(s, dtype=dtype) for s in LAYER_SCALES]
        return p0, sc


class ToyEncoder(nn.Module):
    """Small conv regressor from aligned crops to per-layer codes."""

    def __init__(self, layers: int, dim: int, resolution: int):
        super().__init__()
        self.layers = layers
        self.dim = dim
        self.resolution = resolution
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.GELU(),
        )
        feat = 64 * (resolution // 16) ** 2
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(feat, 256), nn.GELU(), nn.Linear(256, layers * dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = (x - 0.5) * 2.0
        out = self.head(self.features(z))
        return out.view(x.shape[0], self.layers, self.dim)


class PerceptualPyramid(nn.Module):
    """Frozen random-conv feature stack used as the perceptual distance.

    Scale 0 is the raw (centered) image, so the induced distance is zero only
    for identical inputs; deeper scales are seeded random 3x3 convs with tanh,
    computed in float64 so finite-difference gradient checks are stable.
    """

    def __init__(self, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = [3, 8, 12, 16]
        convs = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1, dtype=torch.float64)
            std = 1.2 / math.sqrt(cin * 9)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g, dtype=torch.float64) * std)
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        single = image.ndim == 3
        x = image[None] if single else image
        in_dtype = x.dtype
        z = (x.to(torch.float64) - 0.5) * 2.0
        feats = [z]
        h = z
        for conv in self.convs:
            h = torch.tanh(conv(h))
            feats.append(h)
        if in_dtype != torch.float64:
            feats = [f.to(in_dtype) for f in feats]
        if single:
            feats = [f[0] for f in feats]
        return feats


def toy_generate(
    code: torch.Tensor,
    weights: dict[str, torch.Tensor],
    mapping: ToyMapping,
    resolution: int,
) -> torch.Tensor:
    """Differentiable decode-and-render; accepts (L, D) or (B, L, D) codes."""
    single = code.ndim == 2
    c = code[None] if single else code
    if c.ndim != 3 or c.shape[1] != mapping.layers or c.shape[2] != mapping.latent_dim:
        raise ContractError(
            f"code shape {tuple(code.shape)} does not match backend "
            f"({mapping.layers} x {mapping.latent_dim})"
        )
    p0s, scales = mapping.torch_consts(c.dtype)
    blocks = []
    for l in range(mapping.layers):
        wl = c[:, l]
        wt = wl @ weights[f"adapter_P_{l}"].T + weights[f"adapter_q_{l}"]
        y = wt @ weights[f"decode_W_{l}"].T + weights[f"decode_b_{l}"]
        blocks.append(p0s[l] + scales[l] * y)
    params = torch.cat(blocks, dim=1)
    img = render_scene(params, resolution)
    flat = c.reshape(c.shape[0], -1)
    res = flat @ weights["residual_W"].T + weights["residual_b"]
    img = torch.clamp(img + res.view(-1, 3, resolution, resolution), 0.0, 1.0)
    return img[0] if single else img


def _build_probes(resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Windowed polynomial probes over the canonical inner face disk.

    Six basis fields are probed: a constant, a radial term, and the four
    texture harmonics. Inverting the 6x6 probe-response matrix and dropping
    the first two components projects out brightness/hue and radial edge
    effects, leaving calibrated texture coefficients whose cosine tracks the
    underlying identity vector.
    """
    s = float(resolution)
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    xi = (xs - scene.CANON_CX * s) / (scene.CANON_RX * s)
    eta = (ys - scene.CANON_CY * s) / (scene.CANON_RY * s)
    rho2 = (xi**2 + eta**2) / EMBED_WINDOW_RHO**2
    win = np.where(rho2 < 1.0, (1.0 - rho2) ** 2, 0.0)
    fields = np.stack(
        [np.ones_like(xi), xi**2 + eta**2, xi, eta, xi**2 - eta**2, xi * eta]
    )
    probes = win[None] * fields
    response = np.einsum("jhw,khw->jk", probes, fields)
    channel_mix = np.array([-1.0, 0.5, 0.5])
    return probes, np.linalg.inv(response), channel_mix


class ToyBackend(ModelBackend):
    """Concrete model family over the procedural scene renderer."""

    def __init__(
        self,
        config: ToyBuildConfig,
        mapping: ToyMapping,
        weights0: GeneratorWeights,
        encoder: ToyEncoder,
        perceptual: PerceptualPyramid,
        directions: dict[str, EditDirection],
        certificate: ToyCertificate | None = None,
        build_stats: dict | None = None,
    ):
        self.config = config
        self.mapping = mapping
        self._weights0 = weights0
        self.encoder = encoder
        self.perceptual = perceptual
        self._directions = dict(directions)
        self._certificate = certificate
        self.build_stats = dict(build_stats or {})
        self._probes, self._response_inv, self._channel_mix = _build_probes(
            config.resolution
        )

    # --- identity / metadata ---

    @property
    def backend_id(self) -> str:
        return f"toy-{self.config.seed}"

    @property
    def latent_layers(self) -> int:
        return self.config.latent_layers

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def resolution(self) -> int:
        return self.config.resolution

    @property
    def certificate(self) -> ToyCertificate:
        if self._certificate is None:
            raise CertificationError("backend has not been certified")
        return self._certificate

    @property
    def certified_bounds(self) -> dict:
        return self.certificate.to_dict()

    # --- core contracts ---

    def mean_code(self) -> LatentCode:
        return LatentCode(np.zeros((self.latent_layers, self.latent_dim), dtype=np.float32))

    def initial_weights(self) -> GeneratorWeights:
        return self._weights0.clone()

    def generate(self, code: torch.Tensor, weights) -> torch.Tensor:
        tensors = weights.tensors if isinstance(weights, GeneratorWeights) else weights
        return toy_generate(code, tensors, self.mapping, self.resolution)

    def _check_resolution(self, image: torch.Tensor) -> None:
        s = self.resolution
        if image.shape[-2:] != (s, s) or image.shape[-3] != 3:
            raise ContractError(
                f"expected (3, {s}, {s}) image, got {tuple(image.shape)}"
            )

    def encode(self, image: torch.Tensor) -> LatentCode:
        self._check_resolution(image)
        if image.ndim != 3:
            raise ContractError("encode takes a single (C, H, W) image")
        with torch.no_grad():
            out = self.encoder(image.to(torch.float32)[None])[0]
        return LatentCode(out.numpy())

    def encode_batch(self, images: torch.Tensor) -> np.ndarray:
        self._check_resolution(images)
        with torch.no_grad():
            return self.encoder(images.to(torch.float32)).numpy()

    def segment(self, image: torch.Tensor) -> SegMask:
        self._check_resolution(image)
        arr = image.detach().cpu().numpy()
        red_excess = arr[0] - np.maximum(arr[1], arr[2])
        return SegMask((red_excess > SEG_THRESHOLD).astype(np.float32))

    def embed_identity(self, image: torch.Tensor) -> IdentityEmbedding:
        self._check_resolution(image)
        arr = image.detach().cpu().numpy().astype(np.float64)
        combo = np.tensordot(self._channel_mix, arr, axes=1)
        responses = np.tensordot(self._probes, combo, axes=2)
        f = (self._response_inv @ responses)[2:6]  # drop brightness/radial parts
        norm = float(np.linalg.norm(f))
        if norm < 1e-8:
            f = np.array([1.0, 0.0, 0.0, 0.0])
            norm = 1.0
        return IdentityEmbedding(f / norm)

    def perceptual_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.perceptual(image)

    def direction(self, name: str) -> EditDirection:
        if name not in self._directions:
            raise InvalidInputError(
                f"unknown direction {name!r}; available: {sorted(self._directions)}"
            )
        return self._directions[name]

    def direction_names(self) -> list[str]:
        return sorted(self._directions)

    # --- toy-specific helpers used by tests and certification ---

    def code_for_params(self, params: np.ndarray) -> np.ndarray:
        return self.mapping.code_for_params(params)

    def params_for_code(self, code: np.ndarray) -> np.ndarray:
        return self.mapping.params_for_code(code)

    def golden_image(self) -> torch.Tensor:
        with torch.no_grad():
            return self.generate(self.mean_code().to_tensor(), self._weights0)


def _golden_hash(image: torch.Tensor) -> str:
    u8 = np.clip(np.rint(image.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)
    return hash_bytes(u8.tobytes())


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0)


def _random_align(rng: np.random.Generator, size: int) -> AlignTransform:
    s = rng.uniform(0.85, 1.2)
    tx, ty = rng.uniform(-4.0, 4.0, size=2)
    return AlignTransform(np.array([[s, 0.0, tx], [0.0, s, ty]]), size)


def _warp_path_sample(
    rng: np.random.Generator, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Render a frame-space scene and align it back: (crop HWC, crop params)."""
    p_crop = sample_scene_params(rng, size)
    t = _random_align(rng, size)
    t_inv = AlignTransform(t.inverse_matrix(), size)
    p_frame = transform_scene_params(p_crop, t_inv)
    with torch.no_grad():
        frame = render_scene(p_frame.astype(np.float32), size)
    frame_np = _quantize(tensor_to_image(frame))
    crop = _quantize(apply_align(frame_np, t))
    return crop, p_crop


def _make_directions(mapping: ToyMapping) -> dict[str, EditDirection]:
    """Analytic directions; every edit deliberately leaks into the background.

    The leak (small blob amplitude / position shifts) gives the stitching
    stage real boundary mismatch to repair, mirroring how real latent edits
    disturb generated backgrounds.
    """
    d = mapping.latent_dim
    L = mapping.layers

    def assemble(geom=None, hue=None, bg=None) -> np.ndarray:
        raw = np.zeros((L, d))
        for l, y in enumerate((geom, hue, None, bg)):
            if y is not None:
                raw[l] = np.asarray(y, dtype=np.float64) @ mapping.embeddings[l]
        return raw

    bg_leak_enlarge = np.zeros(16)
    bg_leak_enlarge[[0, 4, 8, 12]] = [0.16, -0.12, 0.08, -0.08]  # blob amplitudes
    bg_leak_enlarge[[1, 5]] = [0.25, -0.25]  # blob x positions

    bg_leak_smile = np.zeros(16)
    bg_leak_smile[[0, 4, 8, 12]] = [-0.12, 0.16, -0.08, 0.08]
    bg_leak_smile[[2, 6]] = [0.25, -0.25]  # blob y positions

    bg_leak_warm = np.zeros(16)
    bg_leak_warm[[0, 4, 8, 12]] = [0.08, 0.08, -0.08, -0.08]
    bg_leak_warm[[3, 7]] = [0.15, -0.15]  # blob log sizes

    raws = {
        "enlarge": assemble(geom=[0.0, 0.0, 1.0, 1.0, 0.0], bg=bg_leak_enlarge),
        "smile": assemble(geom=[0.0, 0.0, 0.0, 0.0, 1.2], bg=bg_leak_smile),
        "warm": assemble(hue=[0.833], bg=bg_leak_warm),
    }
    return {name: EditDirection.from_raw(name, raw) for name, raw in raws.items()}


def _train_encoder(
    mapping: ToyMapping, cfg: ToyBuildConfig, rng: np.random.Generator
) -> tuple[ToyEncoder, dict]:
    torch.manual_seed(cfg.seed + 7)
    enc = ToyEncoder(cfg.latent_layers, cfg.latent_dim, cfg.resolution)
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.encoder_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.encoder_steps, eta_min=cfg.encoder_lr * 0.05
    )
    size = cfg.resolution
    b = cfg.encoder_batch
    last_losses = []
    for step in range(cfg.encoder_steps):
        p_batch = np.stack([sample_scene_params(rng, size) for _ in range(b)])
        targets = mapping.code_for_params(p_batch)
        half = b // 2
        with torch.no_grad():
            direct = render_scene(p_batch[:half].astype(np.float32), size)
        imgs = np.empty((b, size, size, 3), dtype=np.float32)
        imgs[:half] = direct.numpy().transpose(0, 2, 3, 1)
        for j in range(half, b):
            t = _random_align(rng, size)
            t_inv = AlignTransform(t.inverse_matrix(), size)
            p_frame = transform_scene_params(p_batch[j], t_inv)
            with torch.no_grad():
                frame = render_scene(p_frame.astype(np.float32), size)
            imgs[j] = apply_align(tensor_to_image(frame), t)
        noise_sel = rng.random(b) < 0.5
        imgs[noise_sel] = np.clip(
            imgs[noise_sel] + rng.normal(0.0, 0.008, imgs[noise_sel].shape), 0.0, 1.0
        ).astype(np.float32)
        quant_sel = rng.random(b) < 0.5
        imgs[quant_sel] = _quantize(imgs[quant_sel])

        x = torch.from_numpy(imgs.transpose(0, 3, 1, 2).copy())
        y = torch.from_numpy(targets)
        opt.zero_grad()
        loss = torch.mean((enc(x) - y) ** 2)
        loss.backward()
        opt.step()
        sched.step()
        if step >= cfg.encoder_steps - 20:
            last_losses.append(float(loss.detach()))
    enc.eval()
    for p in enc.parameters():
        p.requires_grad_(False)
    return enc, {"encoder_final_loss": float(np.mean(last_losses))}


def _certify(backend: ToyBackend, cfg: ToyBuildConfig) -> ToyCertificate:
    rng = np.random.default_rng(cfg.seed + 1000)
    size = cfg.resolution
    weights0 = backend._weights0

    # encoder code error and crop reconstruction, through the warp path
    code_err = 0.0
    recon_err = 0.0
    rmse_acc = []
    for _ in range(cfg.cert_samples):
        crop, p_crop = _warp_path_sample(rng, size)
        w_true = backend.code_for_params(p_crop)
        w_hat = backend.encode(image_to_tensor(crop)).array
        code_err = max(code_err, float(np.abs(w_hat - w_true).max()))
        rmse_acc.append(float(np.sqrt(np.mean((w_hat - w_true) ** 2))))
        with torch.no_grad():
            recon = backend.generate(torch.from_numpy(w_hat), weights0)
        recon_err = max(
            recon_err, float(np.abs(tensor_to_image(recon) - crop).max())
        )

    # generator Lipschitz (image Frobenius norm per unit code l2)
    gen_ratio = 0.0
    for i in range(cfg.lipschitz_pairs):
        p = sample_scene_params(rng, size)
        w = backend.code_for_params(p)
        sigma = (0.01, 0.05, 0.2)[i % 3]
        delta = rng.normal(0.0, sigma, w.shape).astype(np.float32)
        with torch.no_grad():
            a = backend.generate(torch.from_numpy(w), weights0)
            b = backend.generate(torch.from_numpy(w + delta), weights0)
        num = float(torch.linalg.vector_norm(a - b))
        den = float(np.linalg.norm(delta))
        gen_ratio = max(gen_ratio, num / max(den, 1e-12))

    # encoder Lipschitz (code l2 per unit image Frobenius norm)
    enc_ratio = 0.0
    for i in range(cfg.lipschitz_pairs):
        p = sample_scene_params(rng, size)
        with torch.no_grad():
            img = render_scene(p.astype(np.float32), size)
        base = tensor_to_image(img)
        eps = (0.002, 0.01)[i % 2]
        noisy = np.clip(base + rng.normal(0.0, eps, base.shape).astype(np.float32), 0.0, 1.0)
        wa = backend.encode(image_to_tensor(base)).array
        wb = backend.encode(image_to_tensor(noisy)).array
        num = float(np.linalg.norm(wa - wb))
        den = float(np.linalg.norm(noisy - base))
        enc_ratio = max(enc_ratio, num / max(den, 1e-12))

    # identity separation on alignment-realistic jitter
    def embed_of(p):
        with torch.no_grad():
            img = render_scene(p.astype(np.float32), size)
        return backend.embed_identity(img).vector

    def jittered(iota):
        p = sample_scene_params(rng, size)
        p[0] = canonical_params(size)[0] + rng.uniform(-1.5, 1.5)
        p[1] = canonical_params(size)[1] + rng.uniform(-1.5, 1.5)
        p[2:4] = canonical_params(size)[2:4] + rng.uniform(-0.05, 0.05, 2)
        p[IDENT] = iota
        return p

    same_min, diff_max = 1.0, -1.0
    for _ in range(cfg.identity_pairs):
        iota = rng.normal(size=4)
        iota /= np.linalg.norm(iota)
        ea, eb = embed_of(jittered(iota)), embed_of(jittered(iota))
        same_min = min(same_min, float(ea @ eb))
        for _ in range(100):
            ia = rng.normal(size=4)
            ia /= np.linalg.norm(ia)
            ib = rng.normal(size=4)
            ib /= np.linalg.norm(ib)
            if float(ia @ ib) <= 0.7:
                break
        ea, eb = embed_of(jittered(ia)), embed_of(jittered(ib))
        diff_max = max(diff_max, float(ea @ eb))
    if same_min <= diff_max:
        raise CertificationError(
            f"identity embedder failed to separate: same_min={same_min:.4f} "
            f"<= diff_max={diff_max:.4f}"
        )
    threshold = 0.5 * (same_min + diff_max)

    # monotone geometric effect of the certified direction
    direction = backend.direction("enlarge")
    strengths = (-1.0, -0.5, 0.0, 0.5, 1.0)
    ok_scenes = 0
    for _ in range(cfg.monotone_scenes):
        p = sample_scene_params(rng, size)
        w = backend.code_for_params(p)
        areas = []
        for s in strengths:
            ws = w + np.float32(s) * direction.delta
            with torch.no_grad():
                img = backend.generate(torch.from_numpy(ws), weights0)
            areas.append(backend.segment(img).area)
        if all(b > a for a, b in zip(areas, areas[1:])):
            ok_scenes += 1
    monotone_rate = ok_scenes / cfg.monotone_scenes
    if monotone_rate < 0.9:
        raise CertificationError(
            f"monotone direction check failed: rate {monotone_rate:.2f} < 0.9"
        )

    # perceptual distance grows along pixel-space blends
    violations = 0
    checks = 0
    for _ in range(cfg.blend_pairs):
        pa = sample_scene_params(rng, size)
        pb = sample_scene_params(rng, size)
        with torch.no_grad():
            a = render_scene(pa.astype(np.float32), size)
            b = render_scene(pb.astype(np.float32), size)
        prev = -1.0
        for t in (0.0, 0.25, 0.5, 1.0):
            mix = a + t * (b - a)
            d = float(backend.perceptual_distance(a, mix))
            checks += 1
            if d < prev - 1e-9:
                violations += 1
            prev = d
    blend_rate = violations / checks
    if blend_rate >= 0.01:
        raise CertificationError(f"blend monotonicity violation rate {blend_rate:.3f}")

    # alignment roundtrip error on rendered clips, inside the dilated face mask
    roundtrip = 0.0
    for k in range(3):
        clip = make_synthetic_video(cfg.seed + 50 + k, num_frames=6)
        smoothed = smooth_landmarks(clip.landmarks, 3.0)
        h, w = clip.frames.hw
        for i in range(clip.num_frames):
            t = compute_align_transform(smoothed.points[i], size)
            crop = apply_align(clip.frames.frames[i], t)
            mask = backend.segment(image_to_tensor(crop)).mask
            m_d = maximum_filter(mask, size=2 * 2 + 1)
            back, cov = invert_align(crop, t, (h, w))
            m_back, _ = invert_align(m_d.astype(np.float32), t, (h, w))
            region = (cov > 0) & (m_back > 0.5)
            diff = np.abs(back - clip.frames.frames[i]).max(axis=2)
            roundtrip = max(roundtrip, float(diff[region].max()))

    golden = backend.golden_image()

    margins = {"bound": 1.25, "lipschitz": 1.5}
    return ToyCertificate(
        code_error_linf=code_err * margins["bound"],
        recon_crop_linf=recon_err * margins["bound"],
        roundtrip_warp_linf=roundtrip * margins["bound"],
        pixel_frame_linf=(recon_err + roundtrip) * margins["bound"],
        lipschitz_generator=gen_ratio * margins["lipschitz"],
        lipschitz_encoder=enc_ratio * margins["lipschitz"],
        pivot_smoothness_gain=gen_ratio * enc_ratio * margins["lipschitz"] ** 2,
        identity_same_min=same_min,
        identity_diff_max=diff_max,
        identity_threshold=threshold,
        monotone_direction="enlarge",
        monotone_pass_rate=monotone_rate,
        monotone_ok=True,
        blend_violation_rate=blend_rate,
        blend_ok=True,
        golden_image_sha256=_golden_hash(golden),
        details={
            "measured_code_error_linf": code_err,
            "measured_recon_crop_linf": recon_err,
            "measured_roundtrip_warp_linf": roundtrip,
            "measured_lipschitz_generator": gen_ratio,
            "measured_lipschitz_encoder": enc_ratio,
            "encoder_code_rmse_mean": float(np.mean(rmse_acc)),
            "identity_pair_max_prior_cos": 0.7,
            "margins": margins,
        },
    )


def build_toy_models(config: ToyBuildConfig | int = 0) -> ToyBackend:
    """Construct, fit, and certify the full toy model family.

    Deterministic per seed. Raises CertificationError when any certification
    check fails rather than shipping an uncertified backend.
    """
    cfg = ToyBuildConfig(seed=config) if isinstance(config, int) else config
    torch.manual_seed(cfg.seed)
    mapping = ToyMapping(cfg.seed, cfg.resolution, cfg.latent_dim)
    weights0 = GeneratorWeights(
        mapping.initial_weight_tensors(cfg.resolution), backend_id=f"toy-{cfg.seed}"
    )
    perceptual = PerceptualPyramid(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)
    encoder, stats = _train_encoder(mapping, cfg, rng)
    directions = _make_directions(mapping)
    backend = ToyBackend(
        cfg, mapping, weights0, encoder, perceptual, directions, None, stats
    )
    backend._certificate = _certify(backend, cfg)
    return backend


def save_toy_backend(backend: ToyBackend, out_dir: str | Path) -> None:
    """Persist a certified backend: manifest, weights, encoder, directions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = backend.manifest()
    manifest.update(
        {
            "format_version": 1,
            "config": asdict(backend.config),
            "build_stats": backend.build_stats,
            "weights0_version_tag": backend._weights0.version_tag,
            "directions": backend.direction_names(),
        }
    )
    (out / "backend.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    save_array_collection(out / "weights0", backend._weights0.to_arrays())
    save_array_collection(
        out / "encoder",
        {k: v.detach().cpu().numpy() for k, v in backend.encoder.state_dict().items()},
    )
    ddir = out / "directions"
    ddir.mkdir(exist_ok=True)
    for name in backend.direction_names():
        save_direction(ddir / name, backend.direction(name))
    save_frame_png(out / "golden.png", tensor_to_image(backend.golden_image()))


def load_toy_backend(path: str | Path) -> ToyBackend:
    """Load a saved backend and re-verify its golden image hash.

    Weight tampering or a renderer drift both surface as a
    CertificationError here instead of as silent metric skew later.
    """
    root = Path(path)
    manifest = json.loads((root / "backend.json").read_text())
    cfg = ToyBuildConfig(**manifest["config"])
    mapping = ToyMapping(cfg.seed, cfg.resolution, cfg.latent_dim)
    weights0 = GeneratorWeights.from_arrays(
        load_array_collection(root / "weights0"), manifest["backend_id"]
    )
    if weights0.version_tag != manifest["weights0_version_tag"]:
        raise CertificationError("stored generator weights do not match their manifest tag")
    torch.manual_seed(cfg.seed + 7)  # reproduce the module construction order
    encoder = ToyEncoder(cfg.latent_layers, cfg.latent_dim, cfg.resolution)
    state = {
        k: torch.from_numpy(v.copy())
        for k, v in load_array_collection(root / "encoder").items()
    }
    encoder.load_state_dict(state)
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    perceptual = PerceptualPyramid(cfg.seed + 1)
    directions = {
        name: load_direction(root / "directions" / name)
        for name in manifest["directions"]
    }
    cert = ToyCertificate.from_dict(manifest["certified_bounds"])
    backend = ToyBackend(
        cfg, mapping, weights0, encoder, perceptual, directions, cert,
        manifest.get("build_stats"),
    )
    if _golden_hash(backend.golden_image()) != cert.golden_image_sha256:
        raise CertificationError("golden image hash mismatch; backend state is corrupt")
    return backend
