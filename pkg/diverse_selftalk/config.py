"""
Управление конфигурацией Diverse Self-Talk
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field, ValidationError

from .exceptions import ConfigurationError
from .models import (
    EvalConfig, ExperimentVariant, LoggingConfig, ModelConfig, ReportConfig,
    TrainConfig, WorldConfig
)

logger = logging.getLogger(__name__)


VARIANT_OVERRIDES: Dict[ExperimentVariant, Dict[str, Any]] = {
    ExperimentVariant.SL_BASELINE: {
        "penalty_coefficient": 0.0, "rl_epochs": 0, "penalize_abot": False
    },
    ExperimentVariant.SL_DIVERSE: {"rl_epochs": 0, "penalize_abot": False},
    ExperimentVariant.RL_BASELINE: {"penalty_coefficient": 0.0, "penalize_abot": False},
    ExperimentVariant.RL_DIVERSE: {"penalize_abot": False},
    ExperimentVariant.DIVERSE_ABOT: {"rl_epochs": 0, "penalize_abot": True},
}


class RunConfig(BaseModel):
    """Основная конфигурация запуска"""
    version: str = Field(default="1.0.0")
    run_id: str = Field(default="default", pattern=r'^[A-Za-z0-9_.-]+$')
    seed: int = Field(default=0, ge=0)
    output_dir: str = Field(default="runs/default")
    variant: Optional[ExperimentVariant] = None

    world: WorldConfig = Field(default_factory=WorldConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)


def config_hash(config: RunConfig) -> str:
    """SHA-256 канонического JSON конфигурации.

    Не учитываются output_dir, logging и eval.threads: они не влияют на результаты.
    """
    data = config.model_dump(mode="json")
    data.pop("output_dir", None)
    data.pop("logging", None)
    data["eval"].pop("threads", None)
    payload = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ConfigManager:
    """Менеджер конфигурации"""

    def __init__(self, config_path: Optional[Path] = None):
        self.config_path = config_path
        self._config: Optional[RunConfig] = None

    def load_config(self, config_path: Optional[Path] = None) -> RunConfig:
        """Загрузка конфигурации из файла"""
        path = config_path or self.config_path

        if not path:
            raise ConfigurationError("Не указан путь к файлу конфигурации")

        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Файл конфигурации не найден: {path}")

        try:
            with open(path, 'r', encoding='utf-8') as f:
                config_data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Ошибка парсинга JSON в файле {path}: {e}")
        except OSError as e:
            raise ConfigurationError(f"Ошибка чтения конфигурации {path}: {e}")

        # Подстановка переменных окружения
        config_data = self._substitute_env_vars(config_data)
        self._config = self.from_dict(config_data)

        logger.info(f"Конфигурация успешно загружена из {path}")
        return self._config

    def _substitute_env_vars(self, data: Any) -> Any:
        """Подстановка переменных окружения в конфигурации"""
        if isinstance(data, dict):
            return {key: self._substitute_env_vars(value) for key, value in data.items()}
        elif isinstance(data, list):
            return [self._substitute_env_vars(item) for item in data]
        elif isinstance(data, str) and data.startswith('${') and data.endswith('}'):
            env_value = os.getenv(data[2:-1])
            return env_value if env_value is not None else data
        return data

    def save_config(self, config: RunConfig, config_path: Optional[Path] = None) -> None:
        """Сохранение конфигурации в файл"""
        path = config_path or self.config_path

        if not path:
            raise ConfigurationError("Не указан путь для сохранения конфигурации")

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(config.model_dump(mode="json"), f, indent=2, ensure_ascii=False)
            f.write("\n")

        logger.info(f"Конфигурация сохранена в {path}")

    def get_config(self) -> Optional[RunConfig]:
        """Получение текущей конфигурации"""
        return self._config

    def create_default_config(self) -> RunConfig:
        """Создание конфигурации по умолчанию"""
        return RunConfig()

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> RunConfig:
        """Создание конфигурации из словаря с учетом варианта эксперимента"""
        variant = config_dict.get("variant")
        if variant is not None:
            try:
                overrides = VARIANT_OVERRIDES[ExperimentVariant(variant)]
            except ValueError:
                raise ConfigurationError(f"Неизвестный вариант эксперимента: {variant}")
            config_dict = cls._deep_merge(config_dict, {"train": overrides})
        try:
            return RunConfig(**config_dict)
        except ValidationError as e:
            raise ConfigurationError(f"Некорректная конфигурация: {e}")

    def merge_configs(self, base_config: RunConfig, override_config: Dict[str, Any]) -> RunConfig:
        """Слияние конфигураций"""
        merged = self._deep_merge(base_config.model_dump(mode="json"), override_config)
        return self.from_dict(merged)

    @staticmethod
    def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """Глубокое слияние словарей"""
        result = dict(base)
        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = ConfigManager._deep_merge(result[key], value)
            else:
                result[key] = value
        return result

    def update_config_from_env(self) -> None:
        """Обновление конфигурации из переменных окружения"""
        if not self._config:
            return

        log_level = os.getenv('SELFTALK_LOG_LEVEL')
        if log_level:
            self._config.logging.level = log_level.upper()

        threads = os.getenv('SELFTALK_THREADS')
        if threads:
            try:
                value = int(threads)
                if value <= 0:
                    raise ValueError(threads)
                self._config.eval.threads = value
            except ValueError:
                logger.warning(f"Некорректное значение SELFTALK_THREADS: {threads}")
