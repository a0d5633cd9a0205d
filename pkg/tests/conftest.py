import numpy as np
import pytest

from maskedmotion.motiondata import DataConfig, synth_dataset
from maskedmotion.tokenizer import (
    TokenizerConfig,
    TokenizerTrainConfig,
    train_tokenizer,
)
from maskedmotion.transformer import (
    TransformerConfig,
    TransformerTrainConfig,
    train_masked,
)
from maskedmotion.generate import GenerationPipeline, SamplingStrategy, ScheduleConfig
from maskedmotion.editing import UpperTrainConfig, train_upper


# Small shared corpus/models: enough training to be non-degenerate,
# cheap enough to build once per session. Quality-sensitive assertions
# live in tests/test_acceptance.py with their own budgets.

TINY_DATA_CFG = DataConfig(min_len=40, max_len=96)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_dataset(150, seed=11, cfg=TINY_DATA_CFG)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_dataset):
    cfg = TokenizerConfig(K=64, d_lookup=8, d_model=48)
    tok, _ = train_tokenizer(
        tiny_dataset, cfg, seed=5,
        train_cfg=TokenizerTrainConfig(steps=400, batch_size=16, log_every=400),
    )
    return tok


@pytest.fixture(scope="session")
def tiny_transformer(tiny_dataset, tiny_tokenizer):
    cfg = TransformerConfig(layers=3, heads=4, d_model=64, max_tokens=24)
    model, _ = train_masked(
        tiny_dataset, tiny_tokenizer, cfg, seed=3,
        train_cfg=TransformerTrainConfig(steps=300, batch_size=16,
                                         eval_every=300, eval_sequences=8),
    )
    return model


@pytest.fixture(scope="session")
def tiny_pipeline(tiny_tokenizer, tiny_transformer):
    return GenerationPipeline(
        tiny_tokenizer, tiny_transformer,
        ScheduleConfig(M=tiny_transformer.cfg.max_tokens), SamplingStrategy(),
    )


@pytest.fixture(scope="session")
def tiny_bundle(tiny_dataset):
    vq_cfg = TokenizerConfig(K=48, d_lookup=4, d_model=40)
    tf_cfg = TransformerConfig(layers=2, heads=4, d_model=64, max_tokens=24)
    train_cfg = UpperTrainConfig(
        vq_train=TokenizerTrainConfig(steps=250, batch_size=16, log_every=250),
        tf_train=TransformerTrainConfig(steps=150, batch_size=16,
                                        eval_every=150, eval_sequences=8),
    )
    bundle, _ = train_upper(tiny_dataset, vq_cfg, tf_cfg, seed=21,
                            train_cfg=train_cfg)
    return bundle


@pytest.fixture()
def rng_values():
    return np.random.default_rng(0)
