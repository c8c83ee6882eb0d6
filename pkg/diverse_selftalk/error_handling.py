"""
Классификация ошибок в коды завершения и диагностическая строка для stderr
"""
import json
import logging
import sys
from typing import Callable, Dict, List, Optional, TextIO, Tuple, Type

from pydantic import ValidationError

from .exceptions import (
    CheckpointError, ConfigurationError, CorpusParseError, NumericError, PoolError,
    SelfTalkError, StorageError, UsageError
)
from .models import ExitStatus

logger = logging.getLogger(__name__)


class ErrorClassifier:
    """Сопоставление исключений кодам завершения; проверка идет по порядку"""

    def __init__(self):
        self.error_mappings: List[Tuple[Type[BaseException], ExitStatus]] = [
            (UsageError, ExitStatus.USAGE),
            (ConfigurationError, ExitStatus.CONFIG),
            (ValidationError, ExitStatus.CONFIG),
            (NumericError, ExitStatus.NUMERIC),
            (FloatingPointError, ExitStatus.NUMERIC),
            (CorpusParseError, ExitStatus.DATA),
            (CheckpointError, ExitStatus.DATA),
            (StorageError, ExitStatus.DATA),
            (PoolError, ExitStatus.DATA),
            (SelfTalkError, ExitStatus.DATA),
        ]

    def exit_status(self, error: BaseException) -> ExitStatus:
        for exception_type, status in self.error_mappings:
            if isinstance(error, exception_type):
                return status
        return ExitStatus.DATA

    def classify(self, error: BaseException) -> Dict[str, object]:
        status = self.exit_status(error)
        return {
            "code": int(status),
            "kind": type(error).__name__,
            "message": str(error),
            "category": status.name.lower(),
        }

    def render(self, error: BaseException) -> str:
        """Одна строка: selftalk-error code=<n> kind=<Имя> message=<json-строка>"""
        info = self.classify(error)
        message = json.dumps(info["message"], ensure_ascii=False)
        return f"selftalk-error code={info['code']} kind={info['kind']} message={message}"


def safe_execute(func: Callable[[], ExitStatus], stream: Optional[TextIO] = None,
                 classifier: Optional[ErrorClassifier] = None) -> ExitStatus:
    """Выполнение команды; ошибка превращается в код завершения и строку на stderr"""
    classifier = classifier or ErrorClassifier()
    stream = stream or sys.stderr
    try:
        return func()
    except Exception as e:
        status = classifier.exit_status(e)
        if isinstance(e, SelfTalkError) or isinstance(e, ValidationError):
            logger.error(f"Команда завершилась с ошибкой: {e}")
        else:
            logger.exception(f"Непредвиденная ошибка: {e}")
        if isinstance(e, NumericError) and e.dump_path:
            logger.error(f"Диагностический дамп: {e.dump_path}")
        stream.write(classifier.render(e) + "\n")
        stream.flush()
        return status
