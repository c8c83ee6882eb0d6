"""
Исключения для Diverse Self-Talk
"""
from typing import Optional


class SelfTalkError(Exception):
    """Базовое исключение для Diverse Self-Talk"""
    pass


class ConfigurationError(SelfTalkError):
    """Ошибка конфигурации"""
    pass


class UsageError(SelfTalkError):
    """Ошибка использования командной строки"""
    pass


class ShapeError(SelfTalkError, ValueError):
    """Несогласованные размерности векторов или матриц"""
    pass


class DomainError(SelfTalkError, ValueError):
    """Аргумент вне области определения"""
    pass


class TargetIndexError(SelfTalkError, IndexError):
    """Индекс токена вне словаря"""
    pass


class GradientCheckError(SelfTalkError):
    """Функция вернула нечисловое значение при проверке градиента"""
    pass


class EncodeError(SelfTalkError, KeyError):
    """Токен отсутствует в словаре"""
    pass


class ContractError(SelfTalkError):
    """Нарушен контракт входных данных"""
    pass


class PoolError(SelfTalkError):
    """Невозможно построить пул кандидатов"""
    pass


class CorpusParseError(SelfTalkError):
    """Ошибка разбора файла корпуса"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"строка {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class SchemaVersionError(CorpusParseError):
    """Неизвестная версия схемы файла"""

    def __init__(self, found, expected: int, line_number: Optional[int] = None):
        super().__init__(
            f"неподдерживаемая версия схемы {found!r}, ожидается {expected}",
            line_number
        )
        self.found = found
        self.expected = expected


class CheckpointError(SelfTalkError):
    """Ошибка чтения или записи чекпоинта"""
    pass


class NumericError(SelfTalkError):
    """Нечисловое значение функции потерь"""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path


class StorageError(SelfTalkError):
    """Ошибка хранения данных"""
    pass


class RunLockedError(StorageError):
    """Директория запуска занята другим процессом"""
    pass
