import numpy as np
import pytest
import torch

from selfprompt.data import CorpusSpec, generate_corpus
from selfprompt.model import ModelConfig, build_model

TINY = ModelConfig(image_size=16, patch_size=4, embed_dim=16, encoder_depth=2, num_heads=2,
                   decoder_depth=1)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=0)


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = CorpusSpec(n_train=12, n_test=6, image_size=16, min_radius=2, max_radius=5, seed=3)
    return generate_corpus(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_adapters(model, std=0.05, seed=0):
    from selfprompt.lora import adapters_of

    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for a in adapters_of(model):
            a.B.copy_(torch.randn(a.B.shape, generator=gen, dtype=torch.float64).to(a.B.dtype) * std)
