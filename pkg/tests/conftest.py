"""Shared fixtures for the slow end-to-end checks.

The trained model is expensive (about a minute of CPU), so it is built
once per session and reused by every test that needs a good encoder.
"""

import pytest

from e5kit.datapipe import SyntheticSpec, gen_synthetic
from e5kit.encoder import TokenizerConfig, init_params
from e5kit.pretrain import PretrainConfig, pretrain


@pytest.fixture(scope="session")
def clean_corpus():
    """50 topics x 200 pairs, no label noise."""
    return gen_synthetic(SyntheticSpec(topics=50, pairs_per_topic=200, noise_fraction=0.0, seed=0))


@pytest.fixture(scope="session")
def untrained_params():
    return init_params(dim=64, tokenizer=TokenizerConfig(), seed=0)


@pytest.fixture(scope="session")
def trained_params(clean_corpus):
    params = init_params(dim=64, tokenizer=TokenizerConfig(), seed=0)
    cfg = PretrainConfig(batch_size=256, total_steps=2000, peak_lr=2e-3, warmup_steps=100, seed=0)
    params, _log = pretrain(clean_corpus.pairs, cfg, params)
    return params
