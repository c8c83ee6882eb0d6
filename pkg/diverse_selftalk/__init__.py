"""
Diverse Self-Talk - кооперативная игра в угадывание изображения между Q-bot и A-bot
со штрафом за повторяемость состояний диалога
"""

__version__ = "1.0.0"
__author__ = "Diverse Self-Talk Team"
__description__ = "Обучение и оценка агентов визуального диалога с поощрением разнообразия вопросов"

from .models import (
    DecodeConfig,
    DiversityReport,
    MetricsReport,
    RetrievalReport,
    TrainConfig,
    WorldConfig
)

from .config import ConfigManager, RunConfig
from .corpus import Corpus, generate_corpus, load_corpus, save_corpus
from .agents import AgentParameters, init_agent_params
from .training import pretrain, finetune, train, run_selftalk_episode, reinforce_update
from .evalmetrics import evaluate_selftalk

__all__ = [
    "DecodeConfig",
    "DiversityReport",
    "MetricsReport",
    "RetrievalReport",
    "TrainConfig",
    "WorldConfig",
    "ConfigManager",
    "RunConfig",
    "Corpus",
    "generate_corpus",
    "load_corpus",
    "save_corpus",
    "AgentParameters",
    "init_agent_params",
    "pretrain",
    "finetune",
    "train",
    "run_selftalk_episode",
    "reinforce_update",
    "evaluate_selftalk",
]
