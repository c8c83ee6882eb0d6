"""
Основной модуль Diverse Self-Talk: конвейер запуска и командная строка
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .agents import AgentParameters, init_agent_params
from .config import ConfigManager, RunConfig, config_hash
from .corpus import Corpus, generate_corpus, load_corpus, save_corpus
from .error_handling import ErrorClassifier, safe_execute
from .evalmetrics import evaluate_selftalk, parallel_map
from .exceptions import CheckpointError, StorageError, UsageError
from .models import AgentRole, DecodeConfig, DecodeMode, ExitStatus, LoggingConfig, TrainingCurveRow
from .performance import PerformanceMonitor, ResourceMonitor
from .plotting import plot_diagnostics, plot_training_curves
from .storage import (
    CheckpointStore, ResultsExporter, RunLock, load_report, load_transcripts,
    save_transcripts, write_manifest
)
from .training import finetune, pretrain, run_selftalk_episode

logger = logging.getLogger(__name__)

COMMANDS = ("generate", "pretrain", "finetune", "selftalk", "evaluate", "report")
TRANSCRIPTS_FILE = "selftalk.jsonl"
REPORT_NAME = "metrics"


class SelfTalkPipeline:
    """Стадии эксперимента над одним каталогом запуска"""

    def __init__(self, config: RunConfig, out_dir: Optional[Path] = None):
        self.config = config
        self.out_dir = Path(out_dir or config.output_dir)
        self.config_hash = config_hash(config)
        self.performance_monitor = PerformanceMonitor()

        self.corpus_dir = self.out_dir / "corpus"
        self.checkpoints_dir = self.out_dir / "checkpoints"
        self.curves_dir = self.out_dir / "curves"
        self.transcripts_dir = self.out_dir / "transcripts"
        self.reports_dir = self.out_dir / "reports"
        self.diagnostics_dir = self.out_dir / "diagnostics"

        self.checkpoints = CheckpointStore(self.checkpoints_dir, self.config_hash, config.seed)

    @property
    def label(self) -> str:
        return self.config.variant.value if self.config.variant else self.config.run_id

    def run(self, command: str) -> None:
        handler = getattr(self, command)
        with self.performance_monitor.measure_operation(command):
            handler()
        write_manifest(self.out_dir, self.config_hash, self.config.seed)
        self.performance_monitor.log_summary()

    def _corpus(self) -> Corpus:
        return load_corpus(self.corpus_dir)

    def generate(self) -> None:
        corpus = generate_corpus(self.config.world, self.config.seed)
        save_corpus(corpus, self.corpus_dir)

    def _initial_agents(self, corpus: Corpus) -> Tuple[AgentParameters, AgentParameters]:
        vocab_size = len(corpus.vocab)
        feature_dim = corpus.world.feature_dim
        return (
            init_agent_params(AgentRole.QBOT, self.config.model, vocab_size, feature_dim, self.config.seed),
            init_agent_params(AgentRole.ABOT, self.config.model, vocab_size, feature_dim, self.config.seed),
        )

    def pretrain(self) -> None:
        corpus = self._corpus()
        qbot, abot = self._initial_agents(corpus)
        outcome, _, _ = pretrain(corpus, self.config, qbot, abot, self.checkpoints, self.diagnostics_dir)
        ResultsExporter(self.curves_dir).export_curves(outcome.curves, "sl_curves.csv")

    def finetune(self) -> None:
        corpus = self._corpus()
        qbot, abot = self.checkpoints.load("sl_best")
        outcome = finetune(corpus, self.config, qbot, abot, self.checkpoints, self.diagnostics_dir)
        ResultsExporter(self.curves_dir).export_curves(outcome.curves, "rl_curves.csv")

    def _final_agents(self) -> Tuple[AgentParameters, AgentParameters]:
        """RL-чекпоинты, если дообучение было, иначе лучшие SL"""
        if self.checkpoints.path(AgentRole.QBOT, "rl").exists():
            return self.checkpoints.load("rl")
        if not self.checkpoints.path(AgentRole.QBOT, "sl_best").exists():
            raise CheckpointError(f"В {self.checkpoints_dir} нет чекпоинтов; выполните pretrain")
        return self.checkpoints.load("sl_best")

    def selftalk(self) -> None:
        corpus = self._corpus()
        qbot, abot = self._final_agents()
        eval_config = self.config.eval
        decode_config = DecodeConfig(mode=DecodeMode.BEAM, beam_size=eval_config.beam_size,
                                     max_len=eval_config.max_len, seed=self.config.seed)
        image_ids = corpus.splits["test"][:eval_config.episodes]

        def episode(image_id: int):
            transcript, _ = run_selftalk_episode(
                qbot, abot, corpus.images[image_id], corpus.vocab.encode(corpus.dialogs[image_id].caption),
                corpus.world.rounds, decode_config,
                rng=np.random.default_rng([self.config.seed, 30, image_id]),
            )
            return transcript

        transcripts = parallel_map(episode, image_ids, eval_config.threads)
        save_transcripts(transcripts, self.transcripts_dir / TRANSCRIPTS_FILE)
        logger.info(f"Самоигра: {len(transcripts)} эпизодов записано в {self.transcripts_dir}")

    def evaluate(self) -> None:
        corpus = self._corpus()
        qbot, abot = self._final_agents()
        transcripts = load_transcripts(self.transcripts_dir / TRANSCRIPTS_FILE)
        report = evaluate_selftalk(transcripts, corpus, qbot, abot, self.config, self.label, self.config_hash)
        ResultsExporter(self.reports_dir).export_report(report, self.config.report.formats, REPORT_NAME)

    def report(self) -> None:
        report = load_report(self.reports_dir / f"{REPORT_NAME}.json")
        exporter = ResultsExporter(self.reports_dir)
        exporter.export_report(report, self.config.report.formats, REPORT_NAME)

        curve_rows = []
        for name in ("sl_curves.csv", "rl_curves.csv"):
            path = self.curves_dir / name
            if path.exists():
                curve_rows.extend(_read_curves(path))
        if curve_rows and "svg" in self.config.report.formats:
            plot_training_curves(curve_rows, self.reports_dir / "training_curves.svg")

        if self.config.report.compare_with:
            others = [load_report(Path(d) / "reports" / f"{REPORT_NAME}.json") for d in self.config.report.compare_with]
            reports = others + [report]
            exporter.export_comparison(reports)
            if "svg" in self.config.report.formats:
                plot_diagnostics(reports, self.reports_dir, "comparison")


def _read_curves(path: Path) -> List[TrainingCurveRow]:
    try:
        df = pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise StorageError(f"Ошибка чтения кривых {path}: {e}")
    records = json.loads(df.to_json(orient="records", double_precision=15))
    return [TrainingCurveRow(**record) for record in records]


def _setup_logging(logging_config: LoggingConfig, out_dir: Optional[Path] = None) -> None:
    """Настройка логирования; файл журнала всегда внутри каталога запуска"""
    level = getattr(logging, logging_config.level.upper(), logging.INFO)
    formatter = logging.Formatter(logging_config.format)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    if logging_config.console_output:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)

    if logging_config.file and out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(out_dir / Path(logging_config.file).name, encoding="utf-8")
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)


class ArgumentParser(argparse.ArgumentParser):
    """argparse с исключением вместо выхода из процесса"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Путь к JSON-файлу конфигурации")
    common.add_argument("--seed", type=int, help="Переопределение seed")
    common.add_argument("--out", help="Переопределение каталога запуска")

    parser = ArgumentParser(prog="diverse-selftalk", description="Diverse Self-Talk: Q-bot и A-bot")
    subparsers = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    help_texts = {
        "generate": "Генерация синтетического корпуса",
        "pretrain": "SL-предобучение агентов",
        "finetune": "RL-дообучение по учебному плану",
        "selftalk": "Самоигра на тестовом разбиении",
        "evaluate": "Расчет метрик",
        "report": "Отчеты, сравнение и графики",
    }
    for command in COMMANDS:
        subparsers.add_parser(command, parents=[common], help=help_texts[command])
    return parser


class CLIRunner:
    """Запуск через командную строку"""

    def __init__(self):
        self.config_manager: Optional[ConfigManager] = None
        self.pipeline: Optional[SelfTalkPipeline] = None

    def execute(self, argv: Sequence[str]) -> ExitStatus:
        args = build_parser().parse_args(list(argv))
        if args.command not in COMMANDS:
            raise UsageError("Не указана команда: " + ", ".join(COMMANDS))

        self.config_manager = ConfigManager(Path(args.config))
        config = self.config_manager.load_config()
        self.config_manager.update_config_from_env()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["output_dir"] = args.out
        if overrides:
            config = self.config_manager.merge_configs(config, overrides)

        out_dir = Path(config.output_dir)
        with RunLock(out_dir):
            _setup_logging(config.logging, out_dir)
            logger.info(f"Команда {args.command}: запуск {config.run_id}, seed {config.seed}, каталог {out_dir}")
            self.pipeline = SelfTalkPipeline(config, out_dir)
            with ResourceMonitor():
                self.pipeline.run(args.command)
        return ExitStatus.SUCCESS


def run_command(argv: Sequence[str]) -> ExitStatus:
    """Выполнение подкоманды; ошибки переводятся в код завершения"""
    runner = CLIRunner()
    return safe_execute(lambda: runner.execute(argv), classifier=ErrorClassifier())


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(int(run_command(sys.argv[1:] if argv is None else argv)))


if __name__ == "__main__":
    main()
