import json

import numpy as np
import pytest
from click.testing import CliRunner

from core.config import ModelConfig, MoEConfig, TrainConfig
from core.models.backbone import ModelState
from core.training.corpus import synthesize_corpus
from core.training.data import encode_text
from tests import run_config


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=256, d_model=16, n_layers=4, n_heads=2, head_dim=8, mlp_hidden=32,
                       max_seq_len=32)


@pytest.fixture
def tiny_state(tiny_config):
    return ModelState.init(tiny_config, seed=0)


@pytest.fixture
def moe_config():
    return ModelConfig(vocab_size=256, d_model=16, n_layers=4, n_heads=2, head_dim=8, mlp_hidden=32,
                       max_seq_len=32, moe=MoEConfig(n_experts=4, top_k=2, expert_hidden=16))


@pytest.fixture
def moe_state(moe_config):
    return ModelState.init(moe_config, seed=0)


@pytest.fixture
def tokens():
    return np.random.default_rng(7).integers(0, 256, size=12)


@pytest.fixture
def toy_dataset():
    return encode_text(synthesize_corpus(60, seed=0), 8)


@pytest.fixture
def train_config():
    return TrainConfig(learning_rate=1e-2, lam=0.1, target_capacity=0.5, steps=3, batch_size=2, seq_len=8)


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(run_config()))
    return str(path)


@pytest.fixture
def moe_config_file(tmp_path):
    path = tmp_path / 'moe_config.json'
    path.write_text(json.dumps(run_config(model={'moe': {'n_experts': 4, 'top_k': 2, 'expert_hidden': 16}})))
    return str(path)
