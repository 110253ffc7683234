"""Shared fixtures for cauvis-lab tests."""

import pytest

from cauvis_lab.adapter import AdapterConfig
from cauvis_lab.biasbench import BiasSpec
from cauvis_lab.optim import TrainConfig
from cauvis_lab.seeding import make_rng
from cauvis_lab.settings import settings


@pytest.fixture
def rng():
    """A fixed generator for test inputs, independent of every library stream."""
    return make_rng(1234, 99)


@pytest.fixture
def small_adapter():
    """A 4x4 grid of 8-channel tokens attending to 4 prompts."""
    return AdapterConfig(embed_dim=8, prompt_len=4, rank_k=2, cutoff=0.25, h=4, w=4)


@pytest.fixture
def small_spec():
    """A small biased dataset on an 8x8 grid."""
    return BiasSpec(p_bias=0.9, n_train=32, n_test=16, h=8, w=8, seed=3)


@pytest.fixture
def small_model_config():
    """Adapter matching `small_spec`."""
    return AdapterConfig(embed_dim=8, prompt_len=4, rank_k=2, cutoff=0.25, h=8, w=8)


@pytest.fixture
def fast_train():
    """A couple of cheap epochs."""
    return TrainConfig(learning_rate=1e-2, epochs=2, batch_size=8, num_probes=2, lambda_causal=1e-3, seed=5)


@pytest.fixture
def matrix_backend(monkeypatch):
    """Route every transform through the DFT-matrix path."""
    monkeypatch.setattr(settings, 'fft_backend', 'matrix')
    yield
