"""
Метрики качества: FID, KID, уверенность детектора и сводный отчёт.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .artifacts import PathLike, as_image_array, dumps_json, read_image
from .exceptions import (DetectorUnavailableError, InsufficientDataError, NumericalError,
                         ShapeMismatchError, SubsetSizeError)
from .hand_prior import KeypointDetector

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-8


@dataclass
class FeatureStats:
    """
    Гауссова сводка признаков: среднее, выборочная ковариация (n − 1) и число образцов.
    """
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def merge(self, other: 'FeatureStats') -> 'FeatureStats':
        """
        Объединяет две сводки (параллельная формула для суммы квадратов отклонений).
        """
        if other.dim != self.dim:
            raise ShapeMismatchError(f'Feature dimensions "{self.dim}" and "{other.dim}" differ')
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / count
        scatter = (self.covariance * (self.count - 1) + other.covariance * (other.count - 1)
                   + np.outer(delta, delta) * self.count * other.count / count)
        return FeatureStats(mean, scatter / (count - 1), count)


def _batch_stats(batch: np.ndarray) -> FeatureStats:
    mean = batch.mean(axis=0)
    centered = batch - mean
    scatter = centered.T @ centered
    covariance = scatter / (len(batch) - 1) if len(batch) > 1 else np.zeros_like(scatter)
    return FeatureStats(mean, covariance, len(batch))


def accumulate_stats(features: Iterable[np.ndarray]) -> FeatureStats:
    """
    Потоковое накопление статистик: каждый пакет сводится двухпроходно, пакеты
    объединяются через ``FeatureStats.merge``.

    :param features: Поток векторов ``(d,)`` или пакетов ``(n, d)``.
    :raises InsufficientDataError: Если образцов меньше двух.
    """
    total: Optional[FeatureStats] = None
    for item in features:
        batch = np.atleast_2d(np.asarray(item, dtype=np.float64))
        if not len(batch):
            continue
        stats = _batch_stats(batch)
        total = stats if total is None else total.merge(stats)
    if total is None or total.count < 2:
        raise InsufficientDataError('Covariance needs at least two feature vectors')
    total.covariance = (total.covariance + total.covariance.T) / 2
    return total


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2)
    if values.min() < -PSD_TOLERANCE * max(1.0, abs(values).max()):
        raise NumericalError('Matrix is not positive semidefinite')
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    root = _psd_sqrt(sigma_a)
    return float(np.sqrt(np.clip(np.linalg.eigvalsh(_symmetrize(root @ sigma_b @ root)), 0.0, None)).sum())


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return (matrix + matrix.T) / 2


def fid(a: FeatureStats, b: FeatureStats, eps: float = 1e-6) -> float:
    """
    ‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½).

    Tr((Σa Σb)^½) считается как сумма корней собственных чисел симметричной матрицы
    √Σa Σb √Σa. Если разложение не удалось, к обеим ковариациям добавляется eps·I.

    :raises NumericalError: Если ковариации не PSD и после регуляризации.
    """
    if a.dim != b.dim:
        raise ShapeMismatchError(f'Feature dimensions "{a.dim}" and "{b.dim}" differ')
    diff = a.mean - b.mean
    try:
        trace_root = _trace_sqrt_product(a.covariance, b.covariance)
        offset = 0.0
    except (NumericalError, np.linalg.LinAlgError):
        logger.warning(f'FID matrix square root failed; retrying with eps={eps}')
        ridge = np.eye(a.dim) * eps
        try:
            trace_root = _trace_sqrt_product(a.covariance + ridge, b.covariance + ridge)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f'FID matrix square root failed: {exc}') from exc
        offset = 2 * eps * a.dim
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) + offset - 2 * trace_root)
    if not math.isfinite(value):
        raise NumericalError('FID is not finite')
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    k_xx = polynomial_kernel(x, x)
    k_yy = polynomial_kernel(y, y)
    k_xy = polynomial_kernel(x, y)
    return float((k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
                 + (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
                 - 2 * k_xy.mean())


@dataclass
class KidValue:
    mean: float
    std: float
    subsets: int


def kid(features_a: Sequence[np.ndarray], features_b: Sequence[np.ndarray], subset_size: int = 100,
        subsets: int = 100, seed: int = 0) -> KidValue:
    """
    Несмещённая оценка MMD² с ядром (xᵀy/d + 1)³, усреднённая по случайным подвыборкам.

    Подвыборки берутся без повторов внутри подвыборки; если подвыборка совпадает с
    полным набором, используется одна подвыборка.

    :param features_a: Признаки первого набора ``(n, d)``.
    :param features_b: Признаки второго набора ``(m, d)``.
    :param subset_size: Размер подвыборки.
    :param subsets: Число подвыборок.
    :param seed: Сид выбора подвыборок.
    :return: Среднее и стандартное отклонение по подвыборкам.
    :raises SubsetSizeError: Если набор короче подвыборки.
    """
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f'Feature dimensions "{a.shape[1]}" and "{b.shape[1]}" differ')
    if subset_size < 2:
        raise SubsetSizeError(f'KID subset size "{subset_size}" must be at least 2')
    if len(a) < subset_size or len(b) < subset_size:
        raise SubsetSizeError(f'KID needs at least {subset_size} samples per set, '
                              f'got {len(a)} and {len(b)}')
    if len(a) == subset_size and len(b) == subset_size:
        return KidValue(mmd2_unbiased(a, b), 0.0, 1)
    rng = np.random.default_rng(seed)
    estimates = np.array([
        mmd2_unbiased(a[rng.choice(len(a), subset_size, replace=False)],
                      b[rng.choice(len(b), subset_size, replace=False)])
        for _ in range(subsets)
    ])
    std = float(estimates.std(ddof=1)) if subsets > 1 else 0.0
    return KidValue(float(estimates.mean()), std, subsets)


@dataclass
class DetectionSummary:
    mean_confidence: Optional[float]
    detected: int
    undetected: int

    def to_dict(self) -> dict:
        return {'mean_confidence': 'n/a' if self.mean_confidence is None else self.mean_confidence,
                'detected': self.detected, 'undetected': self.undetected}


def detection_confidence(images: Sequence[np.ndarray], detector: Optional[KeypointDetector],
                         regions: Optional[Sequence[Sequence[np.ndarray]]] = None) -> DetectionSummary:
    """
    Средняя уверенность по всем найденным рукам. Ненайденные руки в среднее не
    входят и учитываются отдельно.

    :param images: Изображения.
    :param detector: Детектор ключевых точек.
    :param regions: Области рук по изображениям; по умолчанию весь кадр.
    :raises DetectorUnavailableError: Если детектор не задан.
    """
    if detector is None:
        raise DetectorUnavailableError('Detection confidence needs a keypoint detector')
    confidences = []
    undetected = 0
    for index, image in enumerate(images):
        image_regions = regions[index] if regions is not None else [np.ones(image.shape[:2], dtype=bool)]
        for detection in detector.detect(image, image_regions):
            if detection.found:
                confidences.append(float(np.clip(detection.confidence, 0.0, 1.0)))
            else:
                undetected += 1
    mean = float(np.mean(confidences)) if confidences else None
    return DetectionSummary(mean, len(confidences), undetected)


class FeatureExtractor(ABC):
    """
    Абстрактный извлекатель признаков изображения.
    """
    dim: int

    @abstractmethod
    def extract(self, image: np.ndarray) -> np.ndarray:
        """
        :param image: Изображение uint8 ``(H, W, C)``.
        :return: Вектор признаков фиксированной длины ``dim``.
        """

    def extract_many(self, images: Iterable[np.ndarray]) -> np.ndarray:
        return np.stack([self.extract(image) for image in images])


class RandomProjectionExtractor(FeatureExtractor):
    """
    Фиксированная случайная проекция уменьшенного изображения с tanh.

    Годится для проверки кода метрик без предобученных весов; значения несопоставимы
    с Inception-признаками.
    """
    side = 32

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        rng = np.random.default_rng(seed)
        inputs = self.side * self.side * 3
        self.weights = rng.standard_normal((inputs, dim)) / math.sqrt(inputs)
        self.bias = rng.standard_normal(dim) * 0.1

    def extract(self, image: np.ndarray) -> np.ndarray:
        array = as_image_array(image)
        if array.shape[2] == 1:
            array = np.repeat(array, 3, axis=2)
        small = np.asarray(Image.fromarray(array).resize((self.side, self.side), Image.Resampling.BILINEAR),
                           dtype=np.float64) / 127.5 - 1.0
        return np.tanh(small.reshape(-1) @ self.weights + self.bias)


@dataclass
class MetricReport:
    fid: float
    kid: float
    kid_std: float
    reference_count: int
    generated_count: int
    detection: Optional[DetectionSummary] = None
    mpjpe: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = {
            'fid': self.fid,
            'kid': self.kid,
            'kid_std': self.kid_std,
            'det_conf': 'n/a',
            'det_count': 0,
            'mpjpe': self.mpjpe,
            'counts': {'reference': self.reference_count, 'generated': self.generated_count},
            **self.extra,
        }
        if self.detection is not None:
            data['det_conf'] = self.detection.to_dict()['mean_confidence']
            data['det_count'] = self.detection.detected
            data['det_undetected'] = self.detection.undetected
        return data

    def to_json(self) -> str:
        return dumps_json(self.to_dict())


def list_images(directory: PathLike) -> list[Path]:
    return sorted(path for path in Path(directory).iterdir() if path.suffix.lower() == '.png')


def evaluate_directories(reference_dir: PathLike, generated_dir: PathLike, extractor: FeatureExtractor,
                         detector: Optional[KeypointDetector] = None, kid_subset_size: int = 100,
                         kid_subsets: int = 100, seed: int = 0) -> MetricReport:
    """
    FID и KID между каталогами PNG; уверенность детектора по сгенерированным изображениям.
    """
    reference = [read_image(path) for path in list_images(reference_dir)]
    generated = [read_image(path) for path in list_images(generated_dir)]
    logger.info(f'Evaluating {len(generated)} generated against {len(reference)} reference images')
    features_ref = extractor.extract_many(reference) if reference else np.zeros((0, extractor.dim))
    features_gen = extractor.extract_many(generated) if generated else np.zeros((0, extractor.dim))
    fid_value = fid(accumulate_stats([features_ref]), accumulate_stats([features_gen]))
    kid_value = kid(features_ref, features_gen, kid_subset_size, kid_subsets, seed)
    detection = detection_confidence(generated, detector) if detector is not None else None
    return MetricReport(fid_value, kid_value.mean, kid_value.std, len(reference), len(generated), detection)
