"""
Иерархия исключений приложения.

Ошибки аргументов наследуют ``ValueError``, чтобы вызывающий код мог ловить их
привычным способом. Ошибки выполнения несут ``exit_code``, который
management-команды возвращают процессу.
"""
from typing import Any, Optional

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NO_HANDS = 3
EXIT_MESH_FAILURE = 4
EXIT_MODEL_LOAD = 5
EXIT_DETECTION_FAILURE = 6
EXIT_DIVERGED = 7


class HandRefinerError(Exception):
    """
    Базовое исключение приложения.
    """
    exit_code = EXIT_FAILURE


class ScheduleRangeError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class TimestepOrderError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class SingularScheduleError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class ShapeMismatchError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class ProjectionDomainError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class EmptyMaskError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class StrengthRangeError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class InsufficientDataError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class SubsetSizeError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class UsageError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class ConfigConflictError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class ManifestError(HandRefinerError, ValueError):
    exit_code = EXIT_USAGE


class NumericalError(HandRefinerError):
    pass


class CodecError(HandRefinerError):
    pass


class NoHandsFoundError(HandRefinerError):
    exit_code = EXIT_NO_HANDS


class MeshReconstructionError(HandRefinerError):
    exit_code = EXIT_MESH_FAILURE


class ModelLoadError(HandRefinerError):
    exit_code = EXIT_MODEL_LOAD


class DetectorUnavailableError(HandRefinerError):
    exit_code = EXIT_DETECTION_FAILURE


class DetectionFailedError(HandRefinerError):
    """
    Детектор не смог измерить ни один из вариантов.

    :param message: Текст ошибки.
    :param partial_report: Уже собранные попытки (сила, ошибка или None).
    """
    exit_code = EXIT_DETECTION_FAILURE

    def __init__(self, message: str, partial_report: Optional[list[Any]] = None):
        super().__init__(message)
        self.partial_report = list(partial_report or [])


class TrainingDivergedError(HandRefinerError):
    """
    Функция потерь стала нечисловой (NaN/inf).

    :param message: Текст ошибки.
    :param loss_trace: История значений потерь до расхождения.
    :param diagnostics: Дополнительные сведения (шаг, таймстепы).
    """
    exit_code = EXIT_DIVERGED

    def __init__(self, message: str, loss_trace: Optional[list[float]] = None,
                 diagnostics: Optional[dict[str, Any]] = None):
        super().__init__(message)
        self.loss_trace = list(loss_trace or [])
        self.diagnostics = dict(diagnostics or {})


class PartitionViolationError(HandRefinerError):
    pass
