"""Boundary stitching: mask algebra, loss arithmetic, tuning, compositing."""
from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from stitchpipe.errors import (
    ConfigError,
    ContractError,
    InvariantViolationError,
)
from stitchpipe.geometry import AlignTransform
from stitchpipe.interfaces import SegMask
from stitchpipe.stitching import (
    MaskSet,
    StitchConfig,
    boundary_mask,
    build_mask_set,
    composite,
    default_dilation_radius,
    dilate_mask,
    naive_paste,
    run_stitch_tuning,
    stitch_losses,
)

IDENTITY_16 = AlignTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), 16)


def _dilate_oracle(mask: np.ndarray, radius: int) -> np.ndarray:
    """Set-definition dilation: output pixel is 1 iff any input pixel within
    Chebyshev distance radius is 1."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - radius), min(h, y + radius + 1)
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            out[y, x] = mask[y0:y1, x0:x1].max()
    return out


# --- config ---


def test_config_defaults_and_validation():
    cfg = StitchConfig()
    assert cfg.lambda_m == 0.01
    assert cfg.learning_rate == 3e-4
    assert cfg.iterations == 100
    assert cfg.dilation_radius is None and cfg.feather_sigma == 0.0
    assert default_dilation_radius(64) == 2
    assert cfg.radius_for(64) == 2
    assert StitchConfig(dilation_radius=5).radius_for(64) == 5
    for bad in (
        dict(lambda_m=-0.1),
        dict(learning_rate=0.0),
        dict(iterations=0),
        dict(dilation_radius=0),
        dict(feather_sigma=-1.0),
    ):
        with pytest.raises(ConfigError):
            StitchConfig(**bad)


# --- dilation ---


def test_dilate_radius_zero_is_identity():
    rng = np.random.default_rng(0)
    m = SegMask((rng.random((9, 9)) > 0.6).astype(np.float32))
    out = dilate_mask(m, 0)
    assert np.array_equal(out.mask, m.mask)


def test_dilate_full_mask_stays_full():
    m = SegMask(np.ones((9, 9), dtype=np.float32))
    assert np.array_equal(dilate_mask(m, 2).mask, m.mask)


def test_dilate_single_pixel_center():
    m = np.zeros((9, 9), dtype=np.float32)
    m[4, 4] = 1.0
    out = dilate_mask(SegMask(m), 1).mask
    expect = np.zeros((9, 9), dtype=np.float32)
    expect[3:6, 3:6] = 1.0
    assert np.array_equal(out, expect)


def test_dilate_single_pixel_exhaustive_9x9():
    for y in range(9):
        for x in range(9):
            for radius in (1, 2):
                m = np.zeros((9, 9), dtype=np.float32)
                m[y, x] = 1.0
                out = dilate_mask(SegMask(m), radius).mask
                assert np.array_equal(out, _dilate_oracle(m, radius)), (y, x, radius)


def test_dilate_random_masks_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = (rng.random((16, 16)) > rng.uniform(0.3, 0.9)).astype(np.float32)
        radius = int(rng.integers(1, 4))
        out = dilate_mask(SegMask(m), radius).mask
        assert np.array_equal(out, _dilate_oracle(m, radius))


def test_dilate_negative_radius_rejected():
    with pytest.raises(ContractError):
        dilate_mask(SegMask(np.zeros((4, 4))), -1)


# --- boundary and mask set ---


def test_boundary_trivial_cases():
    rng = np.random.default_rng(2)
    m = SegMask((rng.random((9, 9)) > 0.5).astype(np.float32))
    assert boundary_mask(m, m).area == 0
    zeros = SegMask(np.zeros((9, 9), dtype=np.float32))
    assert np.array_equal(boundary_mask(zeros, m).mask, m.mask)


def test_boundary_single_pixel_ring():
    m = np.zeros((9, 9), dtype=np.float32)
    m[4, 4] = 1.0
    mask = SegMask(m)
    ring = boundary_mask(mask, dilate_mask(mask, 1))
    assert ring.area == 8
    assert ring.mask[4, 4] == 0.0
    assert ring.mask[3:6, 3:6].sum() == 8.0


def test_boundary_rejects_non_superset():
    m = SegMask(np.ones((4, 4), dtype=np.float32))
    sub = SegMask(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(InvariantViolationError):
        boundary_mask(m, sub)


def test_mask_set_algebra_random():
    rng = np.random.default_rng(3)
    for _ in range(300):
        m = SegMask((rng.random((12, 12)) > rng.uniform(0.2, 0.95)).astype(np.float32))
        ms = build_mask_set(m, int(rng.integers(1, 4)))
        assert (ms.b & ms.m).area == 0
        assert np.array_equal((ms.b | ms.m).mask, ms.m_d.mask)
        assert np.all(ms.m.mask <= ms.m_d.mask)


def test_mask_set_validation():
    m = SegMask(np.zeros((4, 4), dtype=np.float32))
    other = SegMask(np.zeros((5, 5), dtype=np.float32))
    with pytest.raises(InvariantViolationError):
        MaskSet(m=m, m_d=other, b=other)
    ones = SegMask(np.ones((4, 4), dtype=np.float32))
    with pytest.raises(InvariantViolationError):
        MaskSet(m=m, m_d=ones, b=m)  # boundary is not the xor


# --- losses ---


def _hand_case():
    s = np.array(
        [
            [[0.1, 0.2], [0.3, 0.4]],
            [[0.5, 0.6], [0.7, 0.8]],
            [[0.9, 1.0], [0.0, 0.1]],
        ]
    )
    x = np.array(
        [
            [[0.0, 0.0], [0.1, 0.2]],
            [[0.2, 0.3], [0.4, 0.5]],
            [[0.6, 0.7], [0.8, 0.9]],
        ]
    )
    e = np.array(
        [
            [[1.0, 0.9], [0.8, 0.7]],
            [[0.6, 0.5], [0.4, 0.3]],
            [[0.2, 0.1], [0.0, 1.0]],
        ]
    )
    m = SegMask(np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32))
    masks = build_mask_set(m, 1)  # dilation covers all four pixels
    return s, x, e, masks


def test_losses_trivial_zeros():
    s, x, e, masks = _hand_case()
    l_b, l_m = stitch_losses(s, s, e, masks)
    assert float(l_b) == 0.0
    l_b, l_m = stitch_losses(e, x, e, masks)
    assert float(l_m) == 0.0


def test_losses_match_hand_computation():
    s, x, e, masks = _hand_case()
    assert np.array_equal(masks.b.mask, np.array([[0.0, 1.0], [1.0, 1.0]]))
    l_b, l_m = stitch_losses(s, x, e, masks)
    # boundary pixels (0,1),(1,0),(1,1), summed per channel by hand:
    #   ch0: 0.2+0.2+0.2  ch1: 0.3+0.3+0.3  ch2: 0.3+0.8+0.8  -> 3.4
    assert abs(float(l_b) - 3.4 / 9.0) < 1e-12
    # mask pixel (0,0): ch0 0.9, ch1 0.1, ch2 0.7 -> 1.7
    assert abs(float(l_m) - 1.7 / 3.0) < 1e-12


def test_losses_empty_masks_are_zero():
    zeros = SegMask(np.zeros((2, 2), dtype=np.float32))
    masks = MaskSet(m=zeros, m_d=zeros, b=zeros)
    s, x, e, _ = _hand_case()
    l_b, l_m = stitch_losses(s, x, e, masks)
    assert float(l_b) == 0.0 and float(l_m) == 0.0


def test_losses_shape_mismatch_rejected():
    s, x, e, masks = _hand_case()
    with pytest.raises(ContractError):
        stitch_losses(np.zeros((3, 4, 4)), x, e, masks)
    with pytest.raises(ContractError):
        stitch_losses(np.zeros((2, 2, 3)), x, e, masks)  # HWC layout rejected


def test_losses_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    m = SegMask((rng.random((6, 6)) > 0.5).astype(np.float32))
    masks = build_mask_set(m, 1)
    x = rng.random((3, 6, 6))
    e = rng.random((3, 6, 6))
    s0 = rng.random((3, 6, 6))
    lam = 0.01

    def objective(arr: torch.Tensor) -> torch.Tensor:
        l_b, l_m = stitch_losses(arr, x, e, masks)
        return l_b + lam * l_m

    s = torch.tensor(s0, dtype=torch.float64, requires_grad=True)
    objective(s).backward()
    grad = s.grad.numpy()
    h = 1e-4
    for _ in range(12):
        c, i, j = rng.integers(0, 3), rng.integers(0, 6), rng.integers(0, 6)
        sp, sm = s0.copy(), s0.copy()
        sp[c, i, j] += h
        sm[c, i, j] -= h
        fd = (
            float(objective(torch.tensor(sp))) - float(objective(torch.tensor(sm)))
        ) / (2 * h)
        denom = max(abs(fd), abs(grad[c, i, j]), 1e-8)
        assert abs(fd - grad[c, i, j]) / denom < 1e-3


# --- compositing ---


def test_composite_zero_mask_passthrough_bitwise():
    rng = np.random.default_rng(5)
    frame = rng.random((32, 32, 3)).astype(np.float32)
    crop = rng.random((16, 16, 3)).astype(np.float32)
    out = composite(crop, frame, IDENTITY_16, SegMask(np.zeros((16, 16))), 0.0)
    assert np.array_equal(out, frame)


def test_composite_full_mask_identity_transform():
    rng = np.random.default_rng(6)
    frame = rng.random((32, 32, 3)).astype(np.float32)
    crop = rng.random((16, 16, 3)).astype(np.float32)
    out = composite(crop, frame, IDENTITY_16, SegMask(np.ones((16, 16))), 0.0)
    assert np.array_equal(out[:16, :16], crop)
    outside = np.ones((32, 32), dtype=bool)
    outside[:16, :16] = False
    assert np.array_equal(out[outside], frame[outside])


def test_composite_feather_step_matches_1d_blur_oracle():
    size = 32
    t = AlignTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), size)
    mask = np.zeros((size, size), dtype=np.float32)
    mask[:, :16] = 1.0
    frame = np.zeros((size, size, 3), dtype=np.float32)
    crop = np.ones((size, size, 3), dtype=np.float32)
    sigma = 2.0
    out = composite(crop, frame, t, SegMask(mask), sigma)
    # 1-d oracle: blur the step with a truncated normalized gaussian, zero padding
    radius = math.ceil(3 * sigma)
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    step = np.zeros(size)
    step[:16] = 1.0
    expect = np.convolve(step, k, mode="same")
    row = out[size // 2, :, 0]
    assert np.max(np.abs(row - expect)) < 1e-4


def test_composite_passthrough_outside_feather_support():
    rng = np.random.default_rng(7)
    size = 32
    t = AlignTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), size)
    mask = np.zeros((size, size), dtype=np.float32)
    mask[:, :16] = 1.0
    frame = rng.random((size, size, 3)).astype(np.float32)
    crop = rng.random((size, size, 3)).astype(np.float32)
    out = composite(crop, frame, t, SegMask(mask), 2.0)
    # mask support ends at column 15; feather radius ceil(3*2) = 6
    assert np.array_equal(out[:, 22:], frame[:, 22:])


def test_composite_is_convex_combination():
    rng = np.random.default_rng(8)
    frame = rng.random((48, 48, 3)).astype(np.float32)
    crop = rng.random((16, 16, 3)).astype(np.float32)
    angle, scale = 0.3, 1.1
    c, s = scale * math.cos(angle), scale * math.sin(angle)
    t = AlignTransform(np.array([[c, -s, 20.0], [s, c, 2.0]]), 16)
    m = (rng.random((16, 16)) > 0.4).astype(np.float32)
    from stitchpipe.geometry import invert_align

    warped_s, _ = invert_align(crop, t, (48, 48))
    for sigma in (0.0, 1.5):
        out = composite(crop, frame, t, SegMask(m), sigma)
        lo = np.minimum(frame, warped_s) - 1e-6
        hi = np.maximum(frame, warped_s) + 1e-6
        assert np.all(out >= lo) and np.all(out <= hi)


def test_composite_shape_errors():
    frame = np.zeros((32, 32, 3), dtype=np.float32)
    with pytest.raises(ContractError):
        composite(np.zeros((8, 8, 3)), frame, IDENTITY_16, SegMask(np.zeros((16, 16))))
    with pytest.raises(ContractError):
        composite(np.zeros((16, 16, 3)), np.zeros((32, 32)), IDENTITY_16, SegMask(np.zeros((16, 16))))


def test_naive_paste_empty_mask_and_equivalence():
    rng = np.random.default_rng(9)
    frame = rng.random((32, 32, 3)).astype(np.float32)
    crop = rng.random((16, 16, 3)).astype(np.float32)
    empty = SegMask(np.zeros((16, 16)))
    assert np.array_equal(naive_paste(crop, frame, IDENTITY_16, empty), frame)
    m = SegMask((rng.random((16, 16)) > 0.5).astype(np.float32))
    a = naive_paste(crop, frame, IDENTITY_16, m)
    b = composite(crop, frame, IDENTITY_16, m, feather_sigma=0.0)
    assert np.array_equal(a, b)


# --- tuning against the certified backend ---


def _frame_setup(backend, weights0, seed=21):
    gen = torch.Generator().manual_seed(seed)
    code = backend.sample_code(gen)
    with torch.no_grad():
        e = backend.generate(torch.from_numpy(code.array), weights0)
    e_np = e.numpy()
    m = backend.segment(e)
    masks = build_mask_set(m, 2)
    return code, e_np, masks


def test_tuning_near_optimum_has_tiny_drift(backend, weights0):
    code, e_np, masks = _frame_setup(backend, weights0)
    # x agrees with e on the boundary, so the total loss starts at the
    # lambda_m term only -- which is also zero because s starts equal to e
    x = e_np.copy()
    x[:, masks.m.mask > 0.5] = 0.5
    cfg = StitchConfig(iterations=10)
    tuned, s_final = run_stitch_tuning(
        backend, weights0, code.array, x, e_np, masks, cfg
    )
    drift = max(
        float((tuned.tensors[k] - weights0.tensors[k]).abs().max())
        for k in weights0.tensors
    )
    assert drift < 1e-3
    l_b, _ = stitch_losses(s_final, x, e_np, masks)
    assert float(l_b) < 1e-6


def test_tuning_single_iteration_contract(backend, weights0):
    code, e_np, masks = _frame_setup(backend, weights0, seed=22)
    rng = np.random.default_rng(0)
    x = np.clip(e_np + rng.normal(0, 0.05, e_np.shape), 0, 1).astype(np.float32)
    trace: list = []
    cfg = StitchConfig(iterations=1)
    tuned, s_final = run_stitch_tuning(
        backend, weights0, code.array, x, e_np, masks, cfg, trace=trace
    )
    assert set(tuned.tensors) == set(weights0.tensors)
    assert s_final.shape == torch.Size([3, backend.resolution, backend.resolution])
    assert [row[0] for row in trace] == [0, 1]


def test_tuning_rejects_stale_edit_reference(backend, weights0):
    code, e_np, masks = _frame_setup(backend, weights0, seed=23)
    bad_ref = np.clip(e_np + 0.1, 0.0, 1.0)
    with pytest.raises(ContractError):
        run_stitch_tuning(
            backend, weights0, code.array, e_np, bad_ref, masks, StitchConfig(iterations=1)
        )


def test_tuning_is_deterministic(backend, weights0):
    code, e_np, masks = _frame_setup(backend, weights0, seed=24)
    rng = np.random.default_rng(1)
    x = np.clip(e_np + rng.normal(0, 0.05, e_np.shape), 0, 1).astype(np.float32)
    cfg = StitchConfig(iterations=8)
    a_w, a_s = run_stitch_tuning(backend, weights0, code.array, x, e_np, masks, cfg)
    b_w, b_s = run_stitch_tuning(backend, weights0, code.array, x, e_np, masks, cfg)
    assert a_w.version_tag == b_w.version_tag
    assert torch.equal(a_s, b_s)


def test_tuning_never_regresses_boundary(backend, weights0):
    code, e_np, masks = _frame_setup(backend, weights0, seed=25)
    rng = np.random.default_rng(2)
    x = np.clip(e_np + rng.normal(0, 0.08, e_np.shape), 0, 1).astype(np.float32)
    trace: list = []
    cfg = StitchConfig(iterations=25)
    _, s_final = run_stitch_tuning(
        backend, weights0, code.array, x, e_np, masks, cfg, trace=trace
    )
    assert len(trace) == 26
    initial_l_b, final_l_b = trace[0][1], trace[-1][1]
    assert final_l_b <= initial_l_b
