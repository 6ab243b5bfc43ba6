import numpy as np
import pytest
import torch

from selfprompt.errors import ConfigError, InputError
from selfprompt.lora import attach_adapters
from selfprompt.model import (MaskPrediction, ModelConfig, PromptSpec, PromptableSegmenter, build_model,
                              image_digest)

from helpers import finite_difference_check, relative_error


@pytest.mark.parametrize("kwargs", [
    {"image_size": 30, "patch_size": 4},
    {"embed_dim": 30, "num_heads": 4},
    {"encoder_depth": 0},
    {"patch_size": 6, "image_size": 36},
    {"in_chans": 2},
])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_zero_image_default_model_is_finite():
    model = build_model(ModelConfig(), seed=0)
    emb = model.encode_image(np.zeros((64, 64), np.float32))
    assert emb.grid.shape == (1, 16 * 16, 128)
    assert emb.grid_side == 16
    assert torch.isfinite(emb.grid).all()


def test_encode_image_deterministic(tiny_model, rng):
    img = rng.random((16, 16)).astype(np.float32)
    a = tiny_model.encode_image(img)
    b = tiny_model.encode_image(img)
    assert torch.equal(a.grid, b.grid)
    assert a.source_hash == b.source_hash == image_digest(tiny_model.prepare_images(img))


def test_encode_image_errors(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model.encode_image(np.zeros((20, 20)))
    bad = np.zeros((16, 16))
    bad[3, 3] = np.nan
    with pytest.raises(InputError):
        tiny_model.encode_image(bad)


def test_rgb_and_layouts_accepted(tiny_model, rng):
    gray = rng.random((16, 16)).astype(np.float32)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    a = tiny_model.encode_image(gray).grid
    b = tiny_model.encode_image(rgb).grid
    c = tiny_model.encode_image(gray[None]).grid
    assert torch.allclose(a, b, atol=1e-6) and torch.equal(a, c)


def test_zero_b_adapters_leave_embedding_unchanged(tiny_model, rng):
    img = rng.random((16, 16)).astype(np.float32)
    before = tiny_model.encode_image(img).grid
    attach_adapters(tiny_model, r=2)
    after = tiny_model.encode_image(img).grid
    assert (before - after).abs().max() < 1e-6


def test_encode_prompt_variants(tiny_model):
    pe = tiny_model.prompt_encoder
    none = tiny_model.encode_prompt(PromptSpec.none())
    assert none is pe.no_prompt_embed
    box = tiny_model.encode_prompt(PromptSpec.at_box(0, 0, 15, 15))
    assert box.shape == (2, 16)
    p1 = tiny_model.encode_prompt(PromptSpec.at_point(8, 8))
    p2 = tiny_model.encode_prompt(PromptSpec.at_point(8, 8))
    assert p1.shape == (1, 16) and torch.equal(p1, p2)
    neg = tiny_model.encode_prompt(PromptSpec.at_point(8, 8, label=0))
    assert not torch.equal(p1, neg)


def test_default_model_box_gives_two_tokens():
    model = build_model(ModelConfig(), seed=0)
    assert model.encode_prompt(PromptSpec.at_box(0, 0, 63, 63)).shape == (2, 128)


@pytest.mark.parametrize("prompt", [
    PromptSpec.at_point(16, 0),
    PromptSpec.at_point(-1, 3),
    PromptSpec.at_box(5, 5, 4, 9),
    PromptSpec.at_box(0, 0, 3, 16),
    PromptSpec("circle"),
])
def test_encode_prompt_rejects_invalid(tiny_model, prompt):
    with pytest.raises(InputError):
        tiny_model.encode_prompt(prompt)


def test_decode_mask_range_and_determinism(tiny_model, rng):
    emb = tiny_model.encode_image(rng.random((3, 16, 16)).astype(np.float32))
    toks = tiny_model.encode_prompt(PromptSpec.at_box(2, 3, 10, 12))
    a = tiny_model.decode_mask(emb, toks)
    b = tiny_model.decode_mask(emb, toks)
    assert a.prob_map.shape == (3, 16, 16)
    assert float(a.prob_map.min().detach()) >= 0 and float(a.prob_map.max().detach()) <= 1
    assert torch.equal(a.logits, b.logits)


def test_mask_prediction_invariants(rng):
    logits = torch.as_tensor(rng.normal(0, 3, (8, 8)))
    pred = MaskPrediction(logits, 0.3)
    assert torch.allclose(pred.prob_map, torch.sigmoid(logits), atol=1e-6)
    assert torch.equal(pred.binary_mask.bool(), pred.prob_map >= 0.3)
    with pytest.raises(ConfigError):
        MaskPrediction(logits, 1.0)


def test_decode_mask_config_mismatch(tiny_model, rng):
    other = build_model(ModelConfig(image_size=32, patch_size=4, embed_dim=16, encoder_depth=1,
                                    num_heads=2, decoder_depth=1))
    emb = other.encode_image(rng.random((32, 32)).astype(np.float32))
    with pytest.raises(ConfigError):
        tiny_model.decode_mask(emb, tiny_model.encode_prompt(PromptSpec.none()))


def test_forward_no_prompt_is_composition(tiny_model, rng):
    img = rng.random((16, 16)).astype(np.float32)
    direct = tiny_model.forward_no_prompt(img)
    emb = tiny_model.encode_image(img)
    composed = tiny_model.decode_mask(emb, tiny_model.encode_prompt(PromptSpec.none()))
    assert direct.logits.shape == (16, 16)
    assert torch.equal(direct.logits, composed.logits[0])
    assert torch.equal(direct.logits, tiny_model.forward_no_prompt(img).logits)


@pytest.mark.parametrize("size,patch", [(16, 2), (16, 4), (32, 8), (64, 4)])
def test_output_resolution_matches_input(size, patch):
    cfg = ModelConfig(image_size=size, patch_size=patch, embed_dim=32, encoder_depth=1, num_heads=2,
                      decoder_depth=1)
    model = PromptableSegmenter(cfg)
    out = model.forward_no_prompt(np.zeros((size, size), np.float32))
    assert out.prob_map.shape == (size, size)


def test_no_prompt_path_ignores_corner_embeddings(tiny_model, rng):
    img = rng.random((16, 16)).astype(np.float32)
    a = tiny_model.forward_no_prompt(img).logits
    with torch.no_grad():
        tiny_model.prompt_encoder.corner_embed.add_(5.0)
    assert torch.equal(a, tiny_model.forward_no_prompt(img).logits)


def test_seeded_builds_identical(rng):
    img = rng.random((16, 16)).astype(np.float32)
    from conftest import TINY
    a = build_model(TINY, seed=4).forward_no_prompt(img).logits
    b = build_model(TINY, seed=4).forward_no_prompt(img).logits
    assert torch.equal(a, b)


def test_forward_no_prompt_gradient_matches_finite_differences(rng):
    from conftest import TINY

    model = build_model(TINY, seed=1, dtype=torch.float64)
    img = rng.random((16, 16))
    weights = torch.as_tensor(rng.normal(size=(16, 16)))

    def loss():
        return (model.forward_no_prompt(img).logits * weights).sum()

    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.mask_decoder.parameters():
        p.requires_grad_(True)
    checks = finite_difference_check(model, loss, loss, n_params=20, step=1e-3, seed=2)
    for name, idx, analytic, numeric in checks:
        assert relative_error(analytic, numeric) < 1e-4, (name, idx, analytic, numeric)
