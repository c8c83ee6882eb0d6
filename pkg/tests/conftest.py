"""
Общие фикстуры тестов Diverse Self-Talk
"""
import shutil
import tempfile
from pathlib import Path
from typing import Generator

import pytest

from diverse_selftalk.agents import DialogBatch, init_agent_params
from diverse_selftalk.corpus import generate_corpus
from diverse_selftalk.models import AgentRole, ModelConfig, TrainConfig, WorldConfig

from .factories import tiny_world_dict


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Создает временную директорию для тестов"""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    shutil.rmtree(temp_path, ignore_errors=True)


@pytest.fixture(scope="session")
def tiny_world() -> WorldConfig:
    return WorldConfig(**tiny_world_dict())


@pytest.fixture(scope="session")
def tiny_corpus(tiny_world):
    return generate_corpus(tiny_world, seed=3)


@pytest.fixture(scope="session")
def tiny_model() -> ModelConfig:
    return ModelConfig(embed_dim=8, hidden_dim=8, num_layers=2, init_scale=0.3)


@pytest.fixture(scope="session")
def qbot(tiny_corpus, tiny_model):
    return init_agent_params(AgentRole.QBOT, tiny_model, len(tiny_corpus.vocab),
                             tiny_corpus.world.feature_dim, seed=5)


@pytest.fixture(scope="session")
def abot(tiny_corpus, tiny_model):
    return init_agent_params(AgentRole.ABOT, tiny_model, len(tiny_corpus.vocab),
                             tiny_corpus.world.feature_dim, seed=5)


@pytest.fixture
def corpus_batch(tiny_corpus):
    """Пакет из трех эталонных диалогов обучающей выборки"""
    ids = tiny_corpus.splits["train"][:3]
    return DialogBatch.from_dialogs(
        [tiny_corpus.dialogs[i] for i in ids], [tiny_corpus.images[i] for i in ids], tiny_corpus.vocab
    )


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(penalty_coefficient=0.1, regression_weight=1.0, dropout_sl=0.0)

