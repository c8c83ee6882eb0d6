"""
Построители тестовых данных: крошечный мир, конфигурации запуска, эпизоды и отчеты
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from diverse_selftalk.corpus import STOP
from diverse_selftalk.models import (
    DecodeMode, DiagnosticsReport, DiversityReport, MetricsReport, RetrievalReport
)
from diverse_selftalk.training import DialogTranscript

TINY_ATTRIBUTES = {
    "object": ["cube", "sphere", "cone", "torus"],
    "color": ["red", "blue", "green", "yellow"],
    "size": ["small", "medium", "large"],
    "scene": ["kitchen", "park", "beach"],
}


def tiny_world_dict(**overrides) -> Dict[str, Any]:
    world = {
        "attributes": {k: list(v) for k, v in TINY_ATTRIBUTES.items()},
        "caption_attributes": ["scene"],
        "image_count": 60,
        "train_fraction": 0.6,
        "val_fraction": 0.2,
        "feature_dim": 16,
        "noise_scale": 0.05,
        "rounds": 10,
    }
    world.update(overrides)
    return world


def tiny_run_dict(output_dir: Path, **overrides) -> Dict[str, Any]:
    """Конфигурация запуска, которую конвейер проходит за секунды"""
    config = {
        "run_id": "tiny",
        "seed": 7,
        "output_dir": str(output_dir),
        "world": tiny_world_dict(),
        "model": {"embed_dim": 8, "hidden_dim": 8, "num_layers": 2, "init_scale": 0.1},
        "train": {
            "sl_epochs": 2,
            "rl_epochs": 2,
            "batch_size": 12,
            "learning_rate": 0.01,
            "lr_floor": 0.001,
            "penalty_coefficient": 0.01,
            "dropout_sl": 0.1,
            "rl_max_len": 10,
            "selection_items": 10,
        },
        "eval": {
            "image_pool_size": 8,
            "image_pool_nearest": 2,
            "candidate_pool_size": 6,
            "beam_size": 2,
            "max_len": 10,
            "episodes": 6,
            "retrieval_items": 20,
            "threads": 2,
        },
        "logging": {"level": "INFO", "console_output": False},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key] = {**config[key], **value}
        else:
            config[key] = value
    return config


def write_config(path: Path, config: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path


def make_transcript(qbot_states: List[List[float]], predictions: Optional[List[List[float]]] = None,
                    questions: Optional[List[List[int]]] = None, image_id: int = 0,
                    y_gt: Optional[List[float]] = None) -> DialogTranscript:
    """Запись эпизода с заданной траекторией состояний Q-bot"""
    rounds = len(qbot_states) - 1
    dim = len(qbot_states[0])
    y_gt = y_gt if y_gt is not None else [0.0] * dim
    predictions = predictions if predictions is not None else [[0.0] * dim for _ in range(rounds + 1)]
    questions = questions if questions is not None else [[4 + t, STOP] for t in range(rounds)]
    rewards = [
        float(np.sum((np.array(y_gt) - np.array(predictions[t])) ** 2)
              - np.sum((np.array(y_gt) - np.array(predictions[t + 1])) ** 2))
        for t in range(rounds)
    ]
    return DialogTranscript(
        image_id=image_id, image_features=y_gt, caption=[4],
        questions=questions, answers=[[5, STOP] for _ in range(rounds)],
        question_log_probs=[[-1.0] * len(q) for q in questions],
        answer_log_probs=[[-1.0, -1.0] for _ in range(rounds)],
        qbot_states=qbot_states, abot_states=[[0.0] * dim for _ in range(rounds)],
        predictions=predictions, rewards=rewards, decode_mode=DecodeMode.SAMPLE,
    )


def make_report(run_id: str = "run", label: str = "label", rounds: int = 4, shift: float = 0.0) -> MetricsReport:
    """Отчет с предсказуемыми значениями для тестов хранения"""
    return MetricsReport(
        run_id=run_id, label=label, seed=1, config_hash="0" * 64, episode_count=3,
        nll=2.5 + shift,
        diversity=DiversityReport(
            novel_question_count=2, unique_questions_mean=3.0 + shift, unique_questions_stderr=0.1,
            mutual_overlap_mean=0.4, mutual_overlap_stderr=0.05, ent1=2.0, ent2=2.5,
            dist1=0.3, dist2=0.5,
        ),
        retrieval=RetrievalReport(
            ndcg=0.8, mrr=0.6, r_at_1=0.5, r_at_5=0.9, r_at_10=1.0, mean_rank=2.0, item_count=10,
        ),
        diagnostics=DiagnosticsReport(
            state_cosine_curve=[0.9 - 0.1 * t for t in range(rounds)],
            alternating_repetition_rate=0.2,
            percentile_rank_curve=[0.5 + 0.05 * t for t in range(rounds + 1)],
        ),
    )
