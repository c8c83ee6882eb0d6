"""
Модели данных для Diverse Self-Talk
"""
from enum import Enum, IntEnum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


DEFAULT_ATTRIBUTES: Dict[str, List[str]] = {
    "object": ["cube", "sphere", "cone", "cylinder", "pyramid", "torus"],
    "color": ["red", "blue", "green", "yellow", "purple", "orange"],
    "count": ["one", "two", "three", "four", "five"],
    "size": ["small", "medium", "large"],
    "material": ["metal", "wood", "glass", "plastic", "stone"],
    "scene": ["kitchen", "park", "beach", "street", "office", "garden"],
}


class AgentRole(str, Enum):
    """Роли агентов"""
    QBOT = "qbot"
    ABOT = "abot"


class DecodeMode(str, Enum):
    """Режимы декодирования"""
    GREEDY = "greedy"
    SAMPLE = "sample"
    BEAM = "beam"


class PenaltyKind(str, Enum):
    """Виды штрафа на близость состояний диалога"""
    SMOOTH_L1 = "smooth_l1"
    COSINE = "cosine"


class ExperimentVariant(str, Enum):
    """Именованные варианты эксперимента"""
    SL_BASELINE = "sl_baseline"
    SL_DIVERSE = "sl_diverse"
    RL_BASELINE = "rl_baseline"
    RL_DIVERSE = "rl_diverse"
    DIVERSE_ABOT = "diverse_abot"


class ExitStatus(IntEnum):
    """Коды завершения командной строки"""
    SUCCESS = 0
    USAGE = 1
    CONFIG = 2
    DATA = 3
    NUMERIC = 4


class WorldConfig(BaseModel):
    """Настройки синтетического мира"""
    attributes: Dict[str, List[str]] = Field(
        default_factory=lambda: {k: list(v) for k, v in DEFAULT_ATTRIBUTES.items()}
    )
    caption_attributes: List[str] = Field(default_factory=lambda: ["scene"])
    image_count: int = Field(default=1250, gt=0)
    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    feature_dim: int = Field(default=32, gt=0)
    feature_scale: float = Field(default=1.0, gt=0)
    noise_scale: float = Field(default=0.05, ge=0)
    feature_norm_bound: float = Field(default=4.0, gt=0)
    rounds: int = Field(default=10, ge=1)

    @field_validator('attributes')
    @classmethod
    def validate_attributes(cls, v):
        if not v:
            raise ValueError('Должен быть указан хотя бы один атрибут')
        seen = set()
        for name, values in v.items():
            if not values:
                raise ValueError(f'Атрибут {name} не имеет значений')
            for value in values:
                if not value or ' ' in value or value != value.lower():
                    raise ValueError(f'Некорректное значение атрибута {name}: {value!r}')
                if value in seen:
                    raise ValueError(f'Значение {value!r} встречается в нескольких атрибутах')
                seen.add(value)
        return v

    @model_validator(mode='after')
    def validate_layout(self):
        unknown = [a for a in self.caption_attributes if a not in self.attributes]
        if unknown:
            raise ValueError(f'Неизвестные атрибуты подписи: {unknown}')
        if len(self.caption_attributes) >= len(self.attributes):
            raise ValueError('Подпись не может раскрывать все атрибуты')
        if self.train_fraction + self.val_fraction >= 1.0:
            raise ValueError('train_fraction + val_fraction должны быть меньше 1')
        return self

    @property
    def hidden_attributes(self) -> List[str]:
        """Атрибуты, о которых Q-bot может узнать только из диалога"""
        return [a for a in self.attributes if a not in self.caption_attributes]

    @property
    def alphabet_size(self) -> int:
        """Суммарный размер алфавитов атрибутов"""
        return sum(len(values) for values in self.attributes.values())

    @property
    def combination_count(self) -> int:
        """Количество различных наборов атрибутов"""
        total = 1
        for values in self.attributes.values():
            total *= len(values)
        return total


class ModelConfig(BaseModel):
    """Размерности агентов"""
    embed_dim: int = Field(default=32, gt=0)
    hidden_dim: int = Field(default=64, gt=0)
    num_layers: int = Field(default=2, ge=1)
    init_scale: float = Field(default=0.08, gt=0)


class DecodeConfig(BaseModel):
    """Настройки декодирования"""
    mode: DecodeMode = Field(default=DecodeMode.GREEDY)
    beam_size: int = Field(default=5, ge=1)
    max_len: int = Field(default=16, ge=1)
    temperature: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)


class TrainConfig(BaseModel):
    """Настройки обучения"""
    penalty_coefficient: float = Field(default=1e-4, ge=0)
    penalty_kind: PenaltyKind = Field(default=PenaltyKind.SMOOTH_L1)
    regression_weight: float = Field(default=1.0, ge=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    lr_decay: float = Field(default=0.75, gt=0, le=1)
    lr_floor: float = Field(default=5e-5, gt=0)
    dropout_sl: float = Field(default=0.5, ge=0, lt=1)
    dropout_rl: float = Field(default=0.0, ge=0, lt=1)
    sl_epochs: int = Field(default=15, ge=0)
    rl_epochs: int = Field(default=12, ge=0)
    epochs_per_stage: int = Field(default=1, ge=1)
    batch_size: int = Field(default=32, gt=0)
    rl_max_len: int = Field(default=16, ge=1)
    penalize_qbot: bool = Field(default=True)
    penalize_abot: bool = Field(default=False)
    reward_baseline: bool = Field(default=False)
    baseline_momentum: float = Field(default=0.9, ge=0, lt=1)
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    selection_items: int = Field(default=100, ge=0)

    @model_validator(mode='after')
    def floor_not_above_initial(self):
        if self.lr_floor > self.learning_rate:
            raise ValueError('lr_floor не может превышать learning_rate')
        return self


class EvalConfig(BaseModel):
    """Настройки оценки"""
    image_pool_size: int = Field(default=16, ge=2)
    image_pool_nearest: int = Field(default=5, ge=0)
    candidate_pool_size: int = Field(default=20, ge=2)
    beam_size: int = Field(default=5, ge=1)
    max_len: int = Field(default=16, ge=1)
    episodes: Optional[int] = Field(default=None, gt=0)
    retrieval_items: Optional[int] = Field(default=None, gt=0)
    threads: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode='after')
    def nearest_fits_pool(self):
        if self.image_pool_nearest >= self.image_pool_size:
            raise ValueError('image_pool_nearest должен быть меньше image_pool_size')
        return self


class LoggingConfig(BaseModel):
    """Настройки логирования"""
    level: str = Field(default="INFO")
    format: str = Field(default="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    file: Optional[str] = Field(default="selftalk.log")
    console_output: bool = Field(default=True)


class ReportConfig(BaseModel):
    """Настройки отчетов"""
    formats: List[str] = Field(default_factory=lambda: ["json", "csv", "svg"])
    compare_with: List[str] = Field(default_factory=list)

    @field_validator('formats')
    @classmethod
    def validate_formats(cls, v):
        unknown = [f for f in v if f not in ("json", "csv", "svg")]
        if unknown:
            raise ValueError(f'Неподдерживаемые форматы отчета: {unknown}')
        if "json" not in v:
            v = ["json"] + list(v)
        return v


class GradCheckReport(BaseModel):
    """Результат проверки градиента конечными разностями"""
    max_relative_error: float = Field(..., ge=0)
    worst_coordinate: int = Field(..., ge=0)
    probe_count: int = Field(..., gt=0)


class CurriculumState(BaseModel):
    """Стадия учебного плана RL"""
    stage: int = Field(..., ge=0)
    supervised_rounds: int = Field(..., ge=4, le=9)

    @model_validator(mode='after')
    def rounds_match_stage(self):
        if self.supervised_rounds != 9 - (self.stage % 6):
            raise ValueError('supervised_rounds должно равняться 9 - (stage mod 6)')
        return self

    @classmethod
    def for_stage(cls, stage: int) -> "CurriculumState":
        return cls(stage=stage, supervised_rounds=9 - (stage % 6))


class TrainingCurveRow(BaseModel):
    """Строка кривой обучения"""
    phase: str
    stage: int = Field(ge=0)
    epoch: int = Field(ge=0)
    sl_loss: float
    penalty_term: float
    mean_reward: Optional[float] = None
    mean_state_cosine: float
    lr: float = Field(gt=0)


class DialogDiversity(BaseModel):
    """Разнообразие одного диалога"""
    image_id: int
    unique_questions: int = Field(ge=1)
    mutual_overlap: float = Field(ge=0, le=1)


class DiversityReport(BaseModel):
    """Метрики разнообразия и релевантности вопросов"""
    novel_question_count: int = Field(ge=0)
    unique_questions_mean: float = Field(ge=1)
    unique_questions_stderr: float = Field(ge=0)
    mutual_overlap_mean: float = Field(ge=0, le=1)
    mutual_overlap_stderr: float = Field(ge=0)
    ent1: float = Field(ge=0)
    ent2: float = Field(ge=0)
    dist1: float = Field(gt=0, le=1)
    dist2: float = Field(ge=0, le=1)
    per_dialog: List[DialogDiversity] = Field(default_factory=list)


class RetrievalReport(BaseModel):
    """Метрики ранжирования ответов"""
    ndcg: float = Field(ge=0, le=1)
    mrr: float = Field(ge=0, le=1)
    r_at_1: float = Field(ge=0, le=1)
    r_at_5: float = Field(ge=0, le=1)
    r_at_10: float = Field(ge=0, le=1)
    mean_rank: float = Field(ge=1)
    item_count: int = Field(gt=0)

    @model_validator(mode='after')
    def recall_monotone(self):
        if not (self.r_at_1 <= self.r_at_5 <= self.r_at_10):
            raise ValueError('Должно выполняться r_at_1 <= r_at_5 <= r_at_10')
        return self


class DiagnosticsReport(BaseModel):
    """Диагностика состояний и угадывания"""
    state_cosine_curve: List[float]
    alternating_repetition_rate: float = Field(ge=0, le=1)
    percentile_rank_curve: List[float]


class MetricsReport(BaseModel):
    """Полный отчет по метрикам"""
    schema_version: int = Field(default=1)
    run_id: str
    label: str
    seed: int
    config_hash: str
    episode_count: int = Field(gt=0)
    nll: float = Field(ge=0)
    diversity: DiversityReport
    retrieval: RetrievalReport
    diagnostics: DiagnosticsReport


class ResourceUsage(BaseModel):
    """Использование ресурсов за время наблюдения"""
    initial_memory_mb: float = Field(ge=0)
    peak_memory_mb: float = Field(ge=0)
    average_memory_mb: float = Field(ge=0)
    peak_cpu_percent: float = Field(ge=0)
    average_cpu_percent: float = Field(ge=0)
    duration_seconds: float = Field(ge=0)
