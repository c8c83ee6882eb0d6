"""
Конфигурация для интеграционных тестов Diverse Self-Talk
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List

import pytest

from diverse_selftalk.main import COMMANDS, run_command
from diverse_selftalk.models import ExitStatus

from tests.factories import tiny_run_dict, write_config


def run_commands(config_path: Path, out_dir: Path, commands: Iterable[str] = COMMANDS) -> List[ExitStatus]:
    """Последовательный запуск подкоманд; обработчики корневого логгера восстанавливаются"""
    root_logger = logging.getLogger()
    handlers, level = list(root_logger.handlers), root_logger.level
    try:
        return [run_command([command, "--config", str(config_path), "--out", str(out_dir)])
                for command in commands]
    finally:
        for handler in root_logger.handlers[:]:
            if handler not in handlers:
                root_logger.removeHandler(handler)
                handler.close()
        for handler in handlers:
            if handler not in root_logger.handlers:
                root_logger.addHandler(handler)
        root_logger.setLevel(level)


def artifact_bytes(out_dir: Path) -> Dict[str, bytes]:
    """Содержимое артефактов каталога запуска без журнала"""
    return {
        p.relative_to(out_dir).as_posix(): p.read_bytes()
        for p in sorted(out_dir.rglob("*")) if p.is_file() and p.suffix != ".log"
    }


@pytest.fixture
def tiny_config_path(temp_dir) -> Path:
    return write_config(temp_dir / "config.json", tiny_run_dict(temp_dir / "out"))


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    """Полный прогон всех подкоманд на крошечном мире"""
    base = tmp_path_factory.mktemp("finished_run")
    config_path = write_config(base / "config.json", tiny_run_dict(base / "out"))
    out_dir = base / "run"
    statuses = run_commands(config_path, out_dir)
    return config_path, out_dir, statuses
