import numpy as np
import pytest

from dlqat.data import corpus_from_bytes, synthetic_text
from dlqat.model import TinyLMConfig
from dlqat.quant import QuantSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return corpus_from_bytes(synthetic_text(20_000, seed=3), 0.9)


@pytest.fixture
def toy_config():
    """Two layers, d_model 32: big enough to exercise every path, small enough to be quick."""
    return TinyLMConfig(
        d_model=32, n_layers=2, n_heads=4, ffn_hidden=64, context_length=16,
        quant=QuantSpec(4, None), rank=4,
    )
