"""
Управляющая ветка и сила управления.

Признаки каждого блока энкодера управляющей ветки линейно масштабируются силой s
перед добавлением в замороженный денойзер. Малая сила меняет в основном форму и
позу руки, большая дополнительно навязывает текстуры синтетического домена;
на этом переходе построены фиксированная и адаптивная стратегии выбора силы.
"""
import csv
import io
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, TypeVar, Union

import numpy as np
import torch

from .artifacts import dumps_json, encode_png, sha256_bytes
from .exceptions import DetectionFailedError, StrengthRangeError
from .hand_prior import KeypointDetector, Keypoints2D, image_mpjpe, mpjpe
from .schedule import Conditioning

logger = logging.getLogger(__name__)

Result = TypeVar('Result')

DEFAULT_CANDIDATES = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_FACTOR = 1.15
DEFAULT_STRENGTH = 0.55


class ControlBranch(ABC):
    """
    Абстрактная управляющая ветка (ControlNet).
    """

    @abstractmethod
    def features(self, control_image: torch.Tensor, x_t: torch.Tensor, t: int,
                 conditioning: Conditioning) -> list[torch.Tensor]:
        """
        Вычисляет признаки по блокам энкодера.

        :param control_image: Управляющее изображение (карта глубины) ``(1, H, W)``.
        :param x_t: Зашумлённая сетка ``(C, h, w)``.
        :param t: Таймстеп.
        :param conditioning: Текстовое кондиционирование.
        :return: Упорядоченный список признаков; число и формы блоков фиксированы для денойзера.
        """


def check_strength(strength: float) -> float:
    if not 0.0 <= strength <= 1.0:
        raise StrengthRangeError(f'Strength "{strength}" is out of range [0, 1]')
    return float(strength)


def scale_control(features: Sequence[torch.Tensor], strength: float) -> list[torch.Tensor]:
    """
    Умножает выход каждого блока на силу управления.
    """
    if not features:
        raise ValueError('Control features must not be empty')
    check_strength(strength)
    return [block * strength for block in features]


@dataclass(frozen=True)
class FixedStrength:
    strength: float = DEFAULT_STRENGTH

    def __post_init__(self) -> None:
        check_strength(self.strength)

    def describe(self) -> dict:
        return {'variant': 'fixed', 'strength': self.strength}


@dataclass(frozen=True)
class AdaptiveStrength:
    candidates: tuple[float, ...] = DEFAULT_CANDIDATES
    factor: float = DEFAULT_FACTOR
    reference_strength: float = 1.0

    def __post_init__(self) -> None:
        candidates = tuple(float(value) for value in self.candidates)
        object.__setattr__(self, 'candidates', candidates)
        if not candidates:
            raise ValueError('Adaptive strength needs at least one candidate')
        if any(b <= a for a, b in zip(candidates, candidates[1:])):
            raise ValueError('Adaptive candidates must be strictly increasing')
        if any(not 0.0 < value <= 1.0 for value in candidates):
            raise StrengthRangeError(f'Adaptive candidates "{candidates}" must lie in (0, 1]')
        if self.factor <= 1.0:
            raise ValueError(f'Adaptive factor "{self.factor}" must be greater than 1')
        check_strength(self.reference_strength)

    def describe(self) -> dict:
        return {'variant': 'adaptive', 'candidates': list(self.candidates),
                'factor': self.factor, 'reference_strength': self.reference_strength}


StrengthStrategy = Union[FixedStrength, AdaptiveStrength]


@dataclass
class AdaptiveSelection:
    strength: float
    result: Any
    reference_error: Optional[float]
    attempts: list[tuple[float, Optional[float]]] = field(default_factory=list)


def select_adaptive_strength(sample: Callable[[float], Result],
                             measure: Callable[[Result], Optional[float]],
                             candidates: Sequence[float], factor: float = DEFAULT_FACTOR,
                             reference_strength: float = 1.0) -> AdaptiveSelection:
    """
    Перебор кандидатов с ранним выходом.

    Сначала сэмплируется эталон при ``reference_strength``, его ошибка задаёт порог
    ``factor × ref_error``. Кандидаты проверяются по возрастанию; возвращается первый
    с ошибкой строго ниже порога, иначе эталонный образец. Неудачное измерение
    (``None``) порог не проходит.

    :param sample: Сэмплер: сила → результат.
    :param measure: Ошибка результата (MPJPE) или None, если детектор не справился.
    :param candidates: Возрастающие силы.
    :param factor: Множитель порога.
    :param reference_strength: Сила эталона.
    :return: Выбранная сила, результат и журнал попыток.
    :raises DetectionFailedError: Если не измерен ни один образец.
    """
    strategy = AdaptiveStrength(tuple(candidates), factor, reference_strength)
    reference = sample(strategy.reference_strength)
    reference_error = measure(reference)
    attempts = [(strategy.reference_strength, reference_error)]
    threshold = np.inf if reference_error is None else reference_error * strategy.factor
    logger.info(f'Adaptive strength: reference error {reference_error}, threshold {threshold}')
    for strength in strategy.candidates:
        candidate = sample(strength)
        error = measure(candidate)
        attempts.append((strength, error))
        if error is not None and error < threshold:
            logger.info(f'Adaptive strength selected {strength} with error {error}')
            return AdaptiveSelection(strength, candidate, reference_error, attempts)
    if all(error is None for _, error in attempts):
        raise DetectionFailedError('Detector failed on every adaptive sample', attempts)
    logger.info(f'Adaptive strength fell back to reference {strategy.reference_strength}')
    return AdaptiveSelection(strategy.reference_strength, reference, reference_error, attempts)


def measure_mpjpe(detector: KeypointDetector, image: np.ndarray, regions: Sequence[np.ndarray],
                  groundtruth: Sequence[Keypoints2D]) -> Optional[float]:
    """
    MPJPE изображения относительно опорных точек; None, если хоть одна рука не найдена.
    """
    detections = detector.detect(image, regions, hints=groundtruth)
    if len(detections) != len(groundtruth) or not all(item.found for item in detections):
        return None
    return image_mpjpe([mpjpe(truth, item.keypoints) for truth, item in zip(groundtruth, detections)])


def adaptive_strength(sampler: Callable[[Any, float], Any], detector: KeypointDetector, request: Any,
                      groundtruth_keypoints: Sequence[Keypoints2D],
                      candidates: Sequence[float] = DEFAULT_CANDIDATES, factor: float = DEFAULT_FACTOR,
                      reference_strength: float = 1.0) -> tuple[float, Any]:
    """
    Адаптивный выбор силы для запроса.

    :param sampler: Функция (запрос, сила) → результат исправления с полями ``image`` и ``regions``.
    :param detector: Детектор для повторного измерения ключевых точек.
    :param request: Запрос на исправление.
    :param groundtruth_keypoints: Ключевые точки исходных мешей по рукам.
    :return: Выбранная сила и результат.
    """
    selection = select_adaptive_strength(
        lambda strength: sampler(request, strength),
        lambda result: measure_mpjpe(detector, result.image, result.regions, groundtruth_keypoints),
        candidates, factor, reference_strength)
    metadata = getattr(selection.result, 'metadata', None)
    if isinstance(metadata, dict):
        metadata['adaptive_attempts'] = [[strength, error] for strength, error in selection.attempts]
        metadata['reference_error'] = selection.reference_error
    return selection.strength, selection.result


@dataclass
class SweepRow:
    strength: float
    mpjpe: Optional[float] = None
    auxiliary: dict = field(default_factory=dict)
    output_sha256: Optional[str] = None
    error: Optional[str] = None
    result: Any = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {'strength': self.strength, 'mpjpe': self.mpjpe, 'auxiliary': self.auxiliary,
                'output_sha256': self.output_sha256, 'error': self.error}


@dataclass
class PhaseSweepReport:
    rows: list[SweepRow]
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {'seed': self.seed, 'rows': [row.to_dict() for row in self.rows]}

    def to_json(self) -> str:
        return dumps_json(self.to_dict())

    def to_csv(self) -> str:
        """
        Плоская таблица: сила, MPJPE, вспомогательные метрики, хеш выхода, ошибка.
        """
        auxiliary_keys = sorted({key for row in self.rows for key in row.auxiliary})
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['strength', 'mpjpe', *auxiliary_keys, 'output_sha256', 'error'])
        for row in self.rows:
            writer.writerow([row.strength, '' if row.mpjpe is None else row.mpjpe,
                             *[row.auxiliary.get(key, '') for key in auxiliary_keys],
                             row.output_sha256 or '', row.error or ''])
        return buffer.getvalue()


def phase_sweep(run: Callable[[float], Any], strengths: Sequence[float],
                measure: Optional[Callable[[Any], Optional[float]]] = None,
                auxiliary: Optional[Callable[[Any], dict]] = None,
                max_workers: int = 1, seed: Optional[int] = None) -> PhaseSweepReport:
    """
    Полное исправление для каждой силы; ошибки фиксируются в строке, перебор продолжается.

    :param run: Функция сила → результат (с общим сидом у всех строк).
    :param strengths: Непустой список уникальных сил.
    :param measure: MPJPE результата.
    :param auxiliary: Дополнительные метрики результата.
    :param max_workers: Число параллельных строк.
    :param seed: Сид, записываемый в отчёт.
    """
    if not strengths:
        raise ValueError('Sweep needs at least one strength')
    if len(set(strengths)) != len(strengths):
        raise ValueError(f'Sweep strengths "{list(strengths)}" must be unique')
    for strength in strengths:
        check_strength(strength)

    def one_row(strength: float) -> SweepRow:
        try:
            result = run(strength)
            row = SweepRow(float(strength), result=result)
            row.output_sha256 = sha256_bytes(encode_png(result.image))
            if measure is not None:
                row.mpjpe = measure(result)
            if auxiliary is not None:
                row.auxiliary = auxiliary(result)
        except Exception as exc:
            logger.error(f'Sweep row at strength {strength} failed: {exc}', exc_info=True)
            return SweepRow(float(strength), error=f'{type(exc).__name__}: {exc}')
        logger.info(f'Sweep row strength={strength} mpjpe={row.mpjpe}')
        return row

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(one_row, strengths))
    else:
        rows = [one_row(strength) for strength in strengths]
    return PhaseSweepReport(rows, seed)
