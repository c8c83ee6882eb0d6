"""
Сохранение и загрузка артефактов: чекпоинты агентов, эпизоды самоигры,
отчеты по метрикам, кривые обучения, манифест и блокировка каталога запуска
"""
import base64
import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import pandas as pd

from .agents import AgentParameters
from .exceptions import CheckpointError, RunLockedError, StorageError
from .models import AgentRole, MetricsReport, ModelConfig, TrainingCurveRow
from .numcore import GATE_ORDER

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = "diverse-selftalk-checkpoint"
MANIFEST_NAME = "manifest.json"
LOCK_NAME = "run.lock"
CURVE_COLUMNS = ["phase", "stage", "epoch", "sl_loss", "penalty_term", "mean_reward", "mean_state_cosine", "lr"]


def _render_float(value: float) -> str:
    if not math.isfinite(value):
        raise StorageError(f"Нечисловое значение не может быть записано в JSON: {value}")
    text = format(value, ".17g")
    if "." not in text and "e" not in text and "n" not in text:
        text += ".0"
    return text


def render_json(value: Any, indent: Optional[int] = 2, _level: int = 0) -> str:
    """JSON с отсортированными ключами и числами в 17 значащих цифрах"""
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _render_float(float(value))
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)

    if indent is None:
        open_sep, item_sep, key_sep, close_sep = "", ",", ":", ""
    else:
        pad = " " * (indent * (_level + 1))
        open_sep, item_sep, key_sep = "\n" + pad, ",\n" + pad, ": "
        close_sep = "\n" + " " * (indent * _level)

    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            json.dumps(str(key), ensure_ascii=False) + key_sep + render_json(value[key], indent, _level + 1)
            for key in sorted(value)
        ]
        return "{" + open_sep + item_sep.join(items) + close_sep + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [render_json(item, indent, _level + 1) for item in value]
        return "[" + open_sep + item_sep.join(items) + close_sep + "]"
    raise StorageError(f"Тип {type(value).__name__} не поддерживается при записи JSON")


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise StorageError(f"Ошибка записи {path}: {e}")
    return path


# --- чекпоинты ---

def save_checkpoint(params: AgentParameters, path: Path, config_hash: str, seed: int) -> Path:
    """Версионированный JSON: метаданные и тензоры как little-endian float64 в base64"""
    tensors = {}
    for name in params.names:
        tensor = params.tensors[name]
        tensors[name] = {
            "shape": list(tensor.shape),
            "dtype": "<f8",
            "data": base64.b64encode(np.ascontiguousarray(tensor, dtype="<f8").tobytes()).decode("ascii"),
        }
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "format": CHECKPOINT_FORMAT,
        "role": params.role.value,
        "config_hash": config_hash,
        "seed": seed,
        "vocab_size": params.vocab_size,
        "feature_dim": params.feature_dim,
        "model": params.model.model_dump(mode="json"),
        "gate_order": list(GATE_ORDER),
        "tensors": tensors,
    }
    try:
        write_text(path, render_json(payload) + "\n")
    except StorageError as e:
        raise CheckpointError(str(e))
    logger.info(f"Чекпоинт {params.role.value} сохранен в {path}")
    return Path(path)


def load_checkpoint(path: Path, role: Optional[AgentRole] = None) -> Tuple[AgentParameters, Dict[str, Any]]:
    """Загрузка чекпоинта; возвращает параметры и метаданные (без тензоров)"""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"Чекпоинт не найден: {path}")
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Ошибка чтения чекпоинта {path}: {e}")

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: неизвестный формат {payload.get('format')!r}")
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: версия схемы {payload.get('schema_version')}, ожидается {CHECKPOINT_SCHEMA_VERSION}"
        )
    if payload.get("gate_order") != list(GATE_ORDER):
        raise CheckpointError(f"{path}: порядок гейтов {payload.get('gate_order')} не поддерживается")
    if role is not None and payload.get("role") != AgentRole(role).value:
        raise CheckpointError(f"{path}: ожидается роль {AgentRole(role).value}, найдено {payload.get('role')}")

    try:
        tensors = {}
        for name, entry in payload["tensors"].items():
            if entry["dtype"] != "<f8":
                raise CheckpointError(f"{path}: тензор {name} имеет тип {entry['dtype']}")
            data = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
            tensors[name] = data.astype(np.float64).reshape(tuple(entry["shape"]))
        params = AgentParameters(
            AgentRole(payload["role"]), tensors, payload["vocab_size"], payload["feature_dim"],
            ModelConfig(**payload["model"])
        )
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"{path}: поврежденный чекпоинт: {e}")

    meta = {k: v for k, v in payload.items() if k != "tensors"}
    return params, meta


class CheckpointStore:
    """Запись пар чекпоинтов по тегам: {role}_{tag}.json"""

    def __init__(self, directory: Path, config_hash: str, seed: int):
        self.directory = Path(directory)
        self.config_hash = config_hash
        self.seed = seed

    def path(self, role: AgentRole, tag: str) -> Path:
        return self.directory / f"{AgentRole(role).value}_{tag}.json"

    def __call__(self, tag: str, qbot: AgentParameters, abot: AgentParameters) -> None:
        save_checkpoint(qbot, self.path(AgentRole.QBOT, tag), self.config_hash, self.seed)
        save_checkpoint(abot, self.path(AgentRole.ABOT, tag), self.config_hash, self.seed)

    def load(self, tag: str) -> Tuple[AgentParameters, AgentParameters]:
        qbot, _ = load_checkpoint(self.path(AgentRole.QBOT, tag), AgentRole.QBOT)
        abot, _ = load_checkpoint(self.path(AgentRole.ABOT, tag), AgentRole.ABOT)
        return qbot, abot


# --- эпизоды ---

def save_transcripts(transcripts, path: Path) -> Path:
    """Эпизоды в JSONL, по одному объекту в строке"""
    lines = [render_json(t.model_dump(mode="json"), indent=None) for t in transcripts]
    return write_text(path, "".join(line + "\n" for line in lines))


def load_transcripts(path: Path):
    from .training import DialogTranscript

    path = Path(path)
    transcripts = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                if line.strip():
                    transcripts.append(DialogTranscript(**json.loads(line)))
    except FileNotFoundError:
        raise StorageError(f"Файл эпизодов не найден: {path}")
    except Exception as e:
        raise StorageError(f"Ошибка чтения эпизодов {path}: {e}")
    return transcripts


# --- отчеты ---

def report_schema() -> Dict[str, Any]:
    return MetricsReport.model_json_schema()


def _flatten(prefix: str, value: Any, rows: List[Tuple[str, Any]]) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else key, value[key], rows)
    elif isinstance(value, list):
        for i, item in enumerate(value):
            _flatten(f"{prefix}.{i}", item, rows)
    else:
        rows.append((prefix, value))


def flatten_report(report: MetricsReport) -> List[Tuple[str, Any]]:
    """Плоские пары (метрика, значение) без поэпизодной разбивки"""
    data = report.model_dump(mode="json")
    data["diversity"].pop("per_dialog", None)
    rows: List[Tuple[str, Any]] = []
    _flatten("", data, rows)
    return rows


class ResultsExporter:
    """Экспорт отчетов и кривых в JSON, CSV и SVG"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"Каталог отчетов недоступен: {self.output_dir}: {e}")

    def export_report(self, report: MetricsReport, formats: Sequence[str], name: str = "metrics") -> List[Path]:
        """JSON пишется всегда, CSV и SVG - по запросу"""
        paths = [self._export_json(report, f"{name}.json")]
        if "csv" in formats:
            paths.append(self._export_csv(report, f"{name}.csv"))
        if "svg" in formats:
            from .plotting import plot_diagnostics
            paths.extend(plot_diagnostics(report, self.output_dir, name))
        logger.info(f"Отчет {report.label} записан: {', '.join(p.name for p in paths)}")
        return paths

    def _export_json(self, report: MetricsReport, filename: str) -> Path:
        data = report.model_dump(mode="json")
        text = render_json(data) + "\n"
        try:
            jsonschema.validate(json.loads(text), report_schema())
        except jsonschema.ValidationError as e:
            raise StorageError(f"Отчет не соответствует схеме: {e.message}")
        return write_text(self.output_dir / filename, text)

    def _export_csv(self, report: MetricsReport, filename: str) -> Path:
        df = pd.DataFrame(flatten_report(report), columns=["metric", "value"])
        return self._write_frame(df, filename)

    def export_curves(self, rows: Sequence[TrainingCurveRow], filename: str = "training_curves.csv") -> Path:
        df = pd.DataFrame([row.model_dump(mode="json") for row in rows], columns=CURVE_COLUMNS)
        return self._write_frame(df, filename)

    def export_comparison(self, reports: Sequence[MetricsReport], filename: str = "comparison.csv") -> Path:
        """Сравнение запусков: значение метрики по каждому запуску и знаковая разность последнего с первым"""
        if len(reports) < 2:
            raise StorageError("Для сравнения нужны хотя бы два отчета")
        columns = []
        for report in reports:
            column = report.run_id
            if column in columns:
                column = f"{report.run_id}:{report.label}"
            columns.append(column)

        flat = [dict(flatten_report(report)) for report in reports]
        metrics = [m for m, value in flatten_report(reports[0])
                   if isinstance(value, (int, float)) and not isinstance(value, bool) and m != "schema_version"]
        records = []
        for metric in metrics:
            record = {"metric": metric}
            values = [f.get(metric) for f in flat]
            for column, value in zip(columns, values):
                record[column] = value
            numeric = all(isinstance(v, (int, float)) for v in values)
            record["delta"] = values[-1] - values[0] if numeric else None
            records.append(record)
        df = pd.DataFrame(records, columns=["metric"] + columns + ["delta"])
        return self._write_frame(df, filename)

    def _write_frame(self, df: pd.DataFrame, filename: str) -> Path:
        path = self.output_dir / filename
        try:
            df.to_csv(path, index=False, encoding="utf-8", float_format="%.17g", lineterminator="\n")
        except OSError as e:
            raise StorageError(f"Ошибка записи {path}: {e}")
        return path


def load_report(path: Path) -> MetricsReport:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"Отчет не найден: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        jsonschema.validate(data, report_schema())
        return MetricsReport(**data)
    except Exception as e:
        raise StorageError(f"Ошибка загрузки отчета {path}: {e}")


# --- манифест и блокировка ---

def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _artifacts(out_dir: Path) -> List[Path]:
    return sorted(
        p for p in out_dir.rglob("*")
        if p.is_file() and p.name not in (MANIFEST_NAME, LOCK_NAME) and p.suffix != ".log"
    )


def write_manifest(out_dir: Path, config_hash: str, seed: int) -> Path:
    """Манифест: хэш конфигурации, seed и SHA-256 всех артефактов каталога"""
    out_dir = Path(out_dir)
    checksums = {p.relative_to(out_dir).as_posix(): _sha256(p) for p in _artifacts(out_dir)}
    payload = {"config_hash": config_hash, "seed": seed, "artifacts": checksums}
    return write_text(out_dir / MANIFEST_NAME, render_json(payload) + "\n")


def verify_manifest(out_dir: Path) -> List[str]:
    """Список расхождений с манифестом; пустой, если каталог согласован"""
    out_dir = Path(out_dir)
    try:
        payload = json.loads((out_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"Манифест недоступен в {out_dir}: {e}")
    problems = []
    recorded = payload.get("artifacts", {})
    present = {p.relative_to(out_dir).as_posix(): p for p in _artifacts(out_dir)}
    for name, checksum in sorted(recorded.items()):
        if name not in present:
            problems.append(f"отсутствует {name}")
        elif _sha256(present[name]) != checksum:
            problems.append(f"изменен {name}")
    for name in sorted(set(present) - set(recorded)):
        problems.append(f"не учтен {name}")
    return problems


class RunLock:
    """Эксклюзивное владение каталогом запуска через run.lock"""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / LOCK_NAME
        self._held = False

    def acquire(self) -> None:
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "x", encoding="utf-8") as f:
                f.write(str(os.getpid()))
        except FileExistsError:
            raise RunLockedError(f"Каталог запуска занят: {self.path}")
        except OSError as e:
            raise StorageError(f"Не удалось создать {self.path}: {e}")
        self._held = True

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> "RunLock":
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()
