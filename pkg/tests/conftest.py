import numpy as np
import pytest

from stylediff.engine.denoiser import Denoiser
from stylediff.engine.motion import FeatureStats
from stylediff.engine.toy import generate_toy_dataset, prompt_words, split_by_style
from stylediff.schemas.config import DataConfig, DiffusionConfig, ModelConfig
from stylediff.utils.vocab import Vocabulary

# J=5 skeleton -> 59 features per frame
TINY_DATA = DataConfig(n_joints=5, n_actions=2, n_styles=2, clips_per_cell=3, frames=16, seed=0)


@pytest.fixture(scope="session")
def data_config():
    return TINY_DATA


@pytest.fixture(scope="session")
def toy_clips():
    return generate_toy_dataset(TINY_DATA)


@pytest.fixture(scope="session")
def neutral_clips(toy_clips):
    return split_by_style(toy_clips)[0]


@pytest.fixture(scope="session")
def styled_clips(toy_clips):
    return split_by_style(toy_clips)[1]


@pytest.fixture
def tiny_config():
    return ModelConfig(
        d_model=16, n_layers=2, n_heads=2, ffn_dim=32,
        max_frames=64, max_prompt_len=16, style_slots=4, seed=0
    )


@pytest.fixture
def tiny_vocab():
    return Vocabulary.build(prompt_words(), style_slots=4)


@pytest.fixture
def tiny_model(tiny_config, tiny_vocab, neutral_clips):
    return Denoiser(
        tiny_config,
        tiny_vocab,
        neutral_clips[0].motion.n_features,
        stats=FeatureStats.fit(neutral_clips),
        base_steps=100,
        diffusion=DiffusionConfig(sample_steps=10),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
