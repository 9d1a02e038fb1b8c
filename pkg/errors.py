"""
Иерархия исключений poselift.

DataError  - плохие входные данные или численное вырождение (CLI: код 2)
UsageError - неверные аргументы командной строки (CLI: код 1)
"""
from typing import Optional


class PoseLiftError(Exception):
    """Базовое исключение пакета"""


class DataError(PoseLiftError):
    """Ошибка данных или численного вырождения"""


class UsageError(PoseLiftError):
    """Ошибка использования (флаги, конфигурация)"""


# Топология скелета
class TopologyError(DataError):
    def __init__(self, message: str, joint: Optional[int] = None):
        super().__init__(message)
        self.joint = joint


class CycleError(TopologyError):
    pass


class OrphanJointError(TopologyError):
    pass


class DuplicateLRPairError(TopologyError):
    pass


# Предобработка и обучение
class DegeneratePoseError(DataError):
    def __init__(self, message: str, frame: Optional[int] = None):
        super().__init__(message)
        self.frame = frame


class RankDeficientError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class CollapsedComponentError(DataError):
    def __init__(self, message: str, component: int):
        super().__init__(message)
        self.component = component


# Лифтинг
class SingularSystemError(DataError):
    pass


class AllComponentsFailedError(DataError):
    def __init__(self, message: str, causes: Optional[list] = None):
        super().__init__(message)
        self.causes = causes or []


# Карты уверенности и метрики
class FlatMapError(DataError):
    def __init__(self, message: str, channel: int):
        super().__init__(message)
        self.channel = channel


class DimensionMismatchError(DataError):
    pass


class DegenerateConfigurationError(DataError):
    pass


# Симуляция
class SimulationStageError(DataError):
    def __init__(self, stage: int, cause: Exception):
        super().__init__(f"Стадия {stage}: {cause}")
        self.stage = stage
        self.cause = cause


# Ввод-вывод
class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"строка {line}: {message}")
        self.line = line


class JointCountMismatchError(ParseError):
    pass


class DuplicateFrameIdError(ParseError):
    pass


class VersionMismatchError(DataError):
    pass


class InvariantViolationError(DataError):
    def __init__(self, message: str, invariant: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


# Предупреждения
class NonConvergenceWarning(UserWarning):
    pass


class CollapsedComponentWarning(UserWarning):
    pass
