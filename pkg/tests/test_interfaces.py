"""Shared data types: codes, embeddings, masks, weights, backend surface."""
from __future__ import annotations

import numpy as np
import pytest
import torch

from stitchpipe.errors import ContractError, InvalidInputError
from stitchpipe.interfaces import (
    GeneratorWeights,
    IdentityEmbedding,
    LatentCode,
    SegMask,
    image_to_tensor,
    load_backend_manifest,
    save_backend_manifest,
    tensor_to_image,
)


def test_image_tensor_roundtrip():
    rng = np.random.default_rng(0)
    frame = rng.random((5, 7, 3), dtype=np.float32)
    t = image_to_tensor(frame)
    assert t.shape == (3, 5, 7)
    assert t.dtype == torch.float32
    back = tensor_to_image(t)
    assert np.array_equal(back, frame)
    with pytest.raises(InvalidInputError):
        image_to_tensor(frame[..., 0])
    with pytest.raises(InvalidInputError):
        tensor_to_image(torch.zeros(3, 4))


def test_latent_code_validation():
    code = LatentCode(np.zeros((4, 32)))
    assert code.layers == 4 and code.dim == 32
    assert code.array.dtype == np.float32
    with pytest.raises(InvalidInputError):
        LatentCode(np.zeros(32))
    bad = np.zeros((4, 32))
    bad[0, 0] = np.nan
    with pytest.raises(InvalidInputError):
        LatentCode(bad)


def test_latent_code_to_tensor_is_a_copy():
    code = LatentCode(np.ones((2, 3), dtype=np.float32))
    t = code.to_tensor()
    t[0, 0] = 99.0
    assert code.array[0, 0] == 1.0


def test_identity_embedding_validation():
    v = np.array([[3.0, 4.0]]) / 5.0
    emb = IdentityEmbedding(v)
    assert emb.vector.shape == (2,)  # flattened
    assert emb.vector.dtype == np.float64
    with pytest.raises(InvalidInputError):
        IdentityEmbedding(np.array([1.0, 1.0]))
    with pytest.raises(InvalidInputError):
        IdentityEmbedding(np.array([np.inf, 0.0]))


def test_segmask_validation_and_area():
    m = SegMask(np.array([[0.0, 1.0], [1.0, 1.0]], dtype=np.float32))
    assert m.area == 3
    with pytest.raises(InvalidInputError):
        SegMask(np.array([[0.5, 1.0], [0.0, 0.0]]))
    with pytest.raises(InvalidInputError):
        SegMask(np.zeros((2, 2, 1)))


def test_segmask_algebra_matches_boolean_sets():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a_bits = rng.integers(0, 2, size=(9, 9)).astype(bool)
        b_bits = rng.integers(0, 2, size=(9, 9)).astype(bool)
        a = SegMask(a_bits.astype(np.float32))
        b = SegMask(b_bits.astype(np.float32))
        assert np.array_equal((a & b).mask, (a_bits & b_bits).astype(np.float32))
        assert np.array_equal((a | b).mask, (a_bits | b_bits).astype(np.float32))
        assert np.array_equal((a ^ b).mask, (a_bits ^ b_bits).astype(np.float32))


def _toy_weights() -> GeneratorWeights:
    return GeneratorWeights(
        {"a.weight": torch.arange(6, dtype=torch.float32).reshape(2, 3),
         "a.bias": torch.zeros(2)},
        backend_id="unit",
    )


def test_weights_validation_and_tags():
    with pytest.raises(InvalidInputError):
        GeneratorWeights({})
    w = _toy_weights()
    assert w.names() == ["a.bias", "a.weight"]
    assert w.num_parameters() == 8
    same = _toy_weights()
    assert w.version_tag == same.version_tag
    bumped = _toy_weights()
    bumped.tensors["a.bias"] += 0.25
    assert GeneratorWeights(bumped.tensors, "unit").version_tag != w.version_tag


def test_weights_clone_is_independent():
    w = _toy_weights()
    c = w.clone()
    c.tensors["a.weight"][0, 0] = 50.0
    assert float(w.tensors["a.weight"][0, 0]) == 0.0
    assert w.version_tag == _toy_weights().version_tag


def test_weights_max_abs_delta():
    w = _toy_weights()
    c = w.clone()
    c.tensors["a.weight"][1, 2] += 0.125
    c.tensors["a.bias"][0] -= 0.5
    assert GeneratorWeights(c.tensors, "unit").max_abs_delta(w) == 0.5
    other = GeneratorWeights({"b": torch.zeros(1)})
    with pytest.raises(ContractError):
        w.max_abs_delta(other)


def test_weights_array_roundtrip_preserves_tag():
    w = _toy_weights()
    back = GeneratorWeights.from_arrays(w.to_arrays(), backend_id="unit")
    assert back.version_tag == w.version_tag
    assert back.backend_id == "unit"
    for k in w.names():
        assert torch.equal(back.tensors[k], w.tensors[k])


def test_perceptual_distance_axioms(backend):
    g = torch.Generator().manual_seed(3)
    a = backend.generate_image(backend.sample_code(g))
    b = backend.generate_image(backend.sample_code(g))
    assert float(backend.perceptual_distance(a, a)) == 0.0
    dab = float(backend.perceptual_distance(a, b))
    dba = float(backend.perceptual_distance(b, a))
    assert dab > 0.0
    assert abs(dab - dba) < 1e-12


def test_sample_code_seeded_determinism(backend):
    a = backend.sample_code(torch.Generator().manual_seed(11))
    b = backend.sample_code(torch.Generator().manual_seed(11))
    c = backend.sample_code(torch.Generator().manual_seed(12))
    assert np.array_equal(a.array, b.array)
    assert not np.array_equal(a.array, c.array)


def test_manifest_roundtrip(tmp_path, backend):
    path = tmp_path / "manifest.json"
    save_backend_manifest(path, backend)
    payload = load_backend_manifest(path)
    assert payload["backend_id"] == backend.backend_id
    assert payload["resolution"] == backend.resolution
    assert payload["certified_bounds"] == backend.certified_bounds
    path.write_text('{"backend_id": "x"}')
    with pytest.raises(ContractError):
        load_backend_manifest(path)
