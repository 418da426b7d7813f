"""
Геометрия руки: регрессия ключевых точек по вершинам меша, проекция пинхол-камерой,
растеризация нормированной карты глубины и MPJPE.

Здесь же объявлены подключаемые интерфейсы локализации рук, реконструкции меша
и детектора ключевых точек вместе с файловыми реализациями.
"""
import json
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse

from .artifacts import (PathLike, atomic_write_bytes, encode_depth_png,
                        read_depth_png, DEPTH_SCALE)
from .exceptions import ProjectionDomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

NUM_VERTICES = 778
NUM_KEYPOINTS = 21
DEPTH_NEAREST = 1.0
DEPTH_FURTHEST = 0.2


@dataclass(frozen=True, eq=False)
class HandMesh:
    """
    Меш руки в системе координат камеры (глубина положительна вдоль оси взгляда).

    :param vertices: Массив 778×3.
    :param faces: Массив F×3 индексов вершин.
    """
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        vertices = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if vertices.shape != (NUM_VERTICES, 3):
            raise ShapeMismatchError(f'Mesh must have {NUM_VERTICES}x3 vertices, got "{vertices.shape}"')
        if not np.isfinite(vertices).all():
            raise ValueError('Mesh vertices must be finite')
        if faces.size and (faces.min() < 0 or faces.max() >= NUM_VERTICES):
            raise ValueError('Mesh face indices are out of range')
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'faces', faces)

    @property
    def renderable(self) -> bool:
        return bool((self.vertices[:, 2] > 0).all())

    @classmethod
    def padded(cls, vertices: np.ndarray, faces: np.ndarray) -> 'HandMesh':
        """
        Дополняет поверхность с меньшим числом вершин до 778 повтором последней вершины.

        Повторы не входят ни в одну грань и не меняют диапазон глубин.
        """
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        if not 0 < len(vertices) <= NUM_VERTICES:
            raise ShapeMismatchError(f'Cannot pad "{len(vertices)}" vertices to {NUM_VERTICES}')
        padding = np.repeat(vertices[-1:], NUM_VERTICES - len(vertices), axis=0)
        return cls(np.concatenate([vertices, padding]), faces)

    def to_dict(self) -> dict:
        return {'vertices': self.vertices.tolist(), 'faces': self.faces.tolist()}


def load_mesh(path: PathLike) -> HandMesh:
    """
    Читает меш из JSON (``vertices``, ``faces``) или из текстового формата со строками v/f.

    :param path: Путь к файлу.
    :return: Меш руки.
    """
    path = Path(path)
    text = path.read_text(encoding='utf-8')
    if path.suffix.lower() == '.json':
        data = json.loads(text)
        return HandMesh(np.asarray(data['vertices']), np.asarray(data['faces']))
    vertices, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == 'v':
            vertices.append([float(value) for value in parts[1:4]])
        elif parts[0] == 'f':
            # индексы в файле с единицы, допускаются записи вида 3/1/2
            faces.append([int(value.split('/')[0]) - 1 for value in parts[1:4]])
    return HandMesh(np.asarray(vertices), np.asarray(faces))


def save_mesh(mesh: HandMesh, path: PathLike) -> Path:
    path = Path(path)
    if path.suffix.lower() == '.json':
        return atomic_write_bytes(path, json.dumps(mesh.to_dict()).encode('utf-8'))
    lines = [f'v {x!r} {y!r} {z!r}' for x, y, z in mesh.vertices.tolist()]
    lines += [f'f {a + 1} {b + 1} {c + 1}' for a, b, c in mesh.faces.tolist()]
    return atomic_write_bytes(path, ('\n'.join(lines) + '\n').encode('utf-8'))


@dataclass(frozen=True, eq=False)
class KeypointRegressor:
    """
    Разреженный линейный регрессор J размера 21×778, строки которого суммируются в 1.
    """
    matrix: scipy.sparse.csr_matrix

    def __post_init__(self) -> None:
        matrix = scipy.sparse.csr_matrix(self.matrix, dtype=np.float64)
        if matrix.shape != (NUM_KEYPOINTS, NUM_VERTICES):
            raise ShapeMismatchError(f'Regressor must be {NUM_KEYPOINTS}x{NUM_VERTICES}, got "{matrix.shape}"')
        row_sums = np.asarray(matrix.sum(axis=1)).ravel()
        if not np.allclose(row_sums, 1.0, atol=1e-6):
            raise ValueError('Every regressor row must sum to 1')
        object.__setattr__(self, 'matrix', matrix)

    @classmethod
    def selector(cls, indices: Sequence[int]) -> 'KeypointRegressor':
        """
        Регрессор, выбирающий по одной вершине на ключевую точку.
        """
        rows = np.arange(NUM_KEYPOINTS)
        data = np.ones(NUM_KEYPOINTS)
        return cls(scipy.sparse.csr_matrix((data, (rows, np.asarray(indices))),
                                           shape=(NUM_KEYPOINTS, NUM_VERTICES)))

    @classmethod
    def from_json(cls, text: str) -> 'KeypointRegressor':
        data = json.loads(text)
        matrix = scipy.sparse.coo_matrix((data['values'], (data['rows'], data['cols'])),
                                         shape=tuple(data.get('shape', (NUM_KEYPOINTS, NUM_VERTICES))))
        return cls(matrix.tocsr())

    def to_json(self) -> str:
        coo = self.matrix.tocoo()
        return json.dumps({'shape': list(coo.shape), 'rows': coo.row.tolist(),
                           'cols': coo.col.tolist(), 'values': coo.data.tolist()})


def load_regressor(path: PathLike) -> KeypointRegressor:
    return KeypointRegressor.from_json(Path(path).read_text(encoding='utf-8'))


@dataclass(frozen=True)
class PinholeCamera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.focal <= 0:
            raise ValueError(f'Focal length "{self.focal}" must be positive')
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(f'Principal point "({self.cx}, {self.cy})" lies outside the image')

    @classmethod
    def for_image(cls, width: int, height: int) -> 'PinholeCamera':
        """
        Камера по умолчанию: фокус max(W, H), главная точка в центре кадра.
        """
        return cls(float(max(width, height)), width / 2.0, height / 2.0, int(width), int(height))

    def to_dict(self) -> dict:
        return {'focal': self.focal, 'cx': self.cx, 'cy': self.cy,
                'width': self.width, 'height': self.height}

    @classmethod
    def from_dict(cls, data: dict) -> 'PinholeCamera':
        return cls(float(data['focal']), float(data['cx']), float(data['cy']),
                   int(data['width']), int(data['height']))


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.shape != (NUM_KEYPOINTS, 2):
            raise ShapeMismatchError(f'Expected {NUM_KEYPOINTS} keypoints, got shape "{points.shape}"')
        if not np.isfinite(points).all():
            raise ValueError('Keypoints must be finite')
        object.__setattr__(self, 'points', points)

    def to_list(self) -> list[list[float]]:
        return self.points.tolist()

    @classmethod
    def from_list(cls, data: Sequence[Sequence[float]]) -> 'Keypoints2D':
        return cls(np.asarray(data, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class DepthMap:
    """
    Нормированная карта глубины: фон 0, поверхность руки в [0.2, 1.0].
    """
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError(f'Depth map must be HxW, got "{values.shape}"')
        surface = values[values != 0]
        if surface.size and (surface.min() < DEPTH_FURTHEST - 1e-6 or surface.max() > DEPTH_NEAREST + 1e-6):
            raise ValueError('Depth surface values must lie in [0.2, 1.0]')
        object.__setattr__(self, 'values', values)

    @property
    def coverage(self) -> np.ndarray:
        return self.values != 0

    def to_png_bytes(self) -> bytes:
        return encode_depth_png(self.values)

    @classmethod
    def from_png(cls, path: PathLike) -> 'DepthMap':
        return cls(read_depth_png(path) / DEPTH_SCALE)


def regress_keypoints(mesh: HandMesh, regressor: KeypointRegressor) -> np.ndarray:
    """
    Трёхмерные ключевые точки J·V (21×3).
    """
    return np.asarray(regressor.matrix @ mesh.vertices)


def project_points(points3d: np.ndarray, camera: PinholeCamera) -> np.ndarray:
    """
    Проекция (x, y) = (f·X/Z + cx, f·Y/Z + cy) для массива N×3.

    :raises ProjectionDomainError: Если есть точки с неположительной глубиной.
    """
    points3d = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    depth = points3d[:, 2]
    if (depth <= 0).any():
        raise ProjectionDomainError('Cannot project points with nonpositive depth')
    x = camera.focal * points3d[:, 0] / depth + camera.cx
    y = camera.focal * points3d[:, 1] / depth + camera.cy
    return np.stack([x, y], axis=1)


def project(points3d: np.ndarray, camera: PinholeCamera) -> Keypoints2D:
    return Keypoints2D(project_points(points3d, camera))


def _edge(ax: float, ay: float, bx: float, by: float, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _is_top_left(dx: float, dy: float) -> bool:
    # обход по часовой стрелке на экране (ось y вниз)
    return (dy == 0 and dx > 0) or dy < 0


def rasterize_depth(mesh: HandMesh, camera: PinholeCamera) -> np.ndarray:
    """
    Z-буфер одного меша: глубина ближайшей поверхности в центре каждого пикселя.

    Барицентрический тест «точка в треугольнике» с правилом заполнения top-left;
    глубина интерполируется перспективно-корректно (линейно по 1/z).

    :param mesh: Меш с положительными глубинами.
    :param camera: Камера.
    :return: Массив H×W, ``inf`` там, где поверхности нет.
    """
    uv = project_points(mesh.vertices, camera)
    inverse_depth = 1.0 / mesh.vertices[:, 2]
    zbuffer = np.full((camera.height, camera.width), np.inf)
    for face in mesh.faces:
        a, b, c = (int(index) for index in face)
        (ax, ay), (bx, by), (cx, cy) = uv[a], uv[b], uv[c]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        if area < 0:
            b, c = c, b
            (bx, by), (cx, cy) = (cx, cy), (bx, by)
            area = -area
        x0 = max(int(math.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(math.ceil(max(ax, bx, cx) - 0.5)), camera.width - 1)
        y0 = max(int(math.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(math.ceil(max(ay, by, cy) - 0.5)), camera.height - 1)
        if x0 > x1 or y0 > y1:
            continue
        py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64) + 0.5
        w_a = _edge(bx, by, cx, cy, px, py)
        w_b = _edge(cx, cy, ax, ay, px, py)
        w_c = _edge(ax, ay, bx, by, px, py)
        inside = np.ones_like(w_a, dtype=bool)
        for weight, (dx, dy) in ((w_a, (cx - bx, cy - by)), (w_b, (ax - cx, ay - cy)), (w_c, (bx - ax, by - ay))):
            inside &= (weight > 0) | ((weight == 0) & _is_top_left(dx, dy))
        if not inside.any():
            continue
        inv_z = (w_a * inverse_depth[a] + w_b * inverse_depth[b] + w_c * inverse_depth[c]) / area
        depth = 1.0 / inv_z
        window = zbuffer[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (depth < window)
        window[closer] = depth[closer]
    return zbuffer


def normalize_depth(zbuffer: np.ndarray, near: float, far: float) -> np.ndarray:
    """
    Переводит глубины в [0.2, 1.0]: ближайшая вершина 1.0, дальняя 0.2, фон 0.

    При постоянной глубине (near = far) покрытые пиксели получают 1.0.
    """
    covered = np.isfinite(zbuffer)
    values = np.zeros_like(zbuffer)
    if far - near <= 1e-12 * max(abs(far), 1.0):
        values[covered] = DEPTH_NEAREST
        return values
    scaled = DEPTH_FURTHEST + (DEPTH_NEAREST - DEPTH_FURTHEST) * (far - zbuffer[covered]) / (far - near)
    values[covered] = np.clip(scaled, DEPTH_FURTHEST, DEPTH_NEAREST)
    return values


def render_depth(meshes: Sequence[HandMesh], camera: PinholeCamera) -> DepthMap:
    """
    Рендерит все руки в общий z-буфер с нормировкой каждой руки по её вершинам.

    На перекрытии побеждает ближайшая поверхность.

    :param meshes: Меши рук (пустой список даёт нулевую карту).
    :param camera: Камера, задающая размер кадра.
    :return: Нормированная карта глубины.
    """
    nearest = np.full((camera.height, camera.width), np.inf)
    values = np.zeros((camera.height, camera.width))
    for mesh in meshes:
        zbuffer = rasterize_depth(mesh, camera)
        depths = mesh.vertices[:, 2]
        normalized = normalize_depth(zbuffer, float(depths.min()), float(depths.max()))
        closer = zbuffer < nearest
        nearest[closer] = zbuffer[closer]
        values[closer] = normalized[closer]
    return DepthMap(values)


def mpjpe(keypoints: Keypoints2D, keypoints_prime: Keypoints2D) -> float:
    """
    Средняя по 21 суставу евклидова ошибка в пикселях.
    """
    first = np.asarray(getattr(keypoints, 'points', keypoints), dtype=np.float64)
    second = np.asarray(getattr(keypoints_prime, 'points', keypoints_prime), dtype=np.float64)
    if first.shape != second.shape or first.shape != (NUM_KEYPOINTS, 2):
        raise ShapeMismatchError(f'Keypoint sets "{first.shape}" and "{second.shape}" do not match')
    return float(np.linalg.norm(first - second, axis=1).mean())


def image_mpjpe(per_hand: Sequence[float]) -> float:
    """
    MPJPE изображения: среднее по всем рукам.
    """
    if not per_hand:
        raise ValueError('No hands to average')
    return float(np.mean(per_hand))


@dataclass
class ReconstructedHand:
    region_index: int
    mesh: Optional[HandMesh] = None
    camera: Optional[PinholeCamera] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.mesh is not None


class MeshProvider(ABC):
    """
    Абстрактная модель реконструкции меша руки.
    """

    @abstractmethod
    def reconstruct(self, image: np.ndarray, regions: Sequence[np.ndarray]) -> list[ReconstructedHand]:
        """
        Восстанавливает по одному мешу на область руки.

        :param image: Изображение uint8 ``(H, W, C)``.
        :param regions: Бинарные маски рук.
        :return: Результат по каждой области; неудачи описаны в ``error``.
        """


class FixtureMeshProvider(MeshProvider):
    """
    Читает меши из файлов: i-й файл соответствует i-й области.
    """

    def __init__(self, mesh_paths: Sequence[PathLike], camera: Optional[PinholeCamera] = None):
        self.mesh_paths = [Path(path) for path in mesh_paths]
        self.camera = camera

    def reconstruct(self, image: np.ndarray, regions: Sequence[np.ndarray]) -> list[ReconstructedHand]:
        hands = []
        for index in range(len(regions)):
            if index >= len(self.mesh_paths):
                hands.append(ReconstructedHand(index, error='no mesh fixture for region'))
                continue
            try:
                mesh = load_mesh(self.mesh_paths[index])
            except (OSError, ValueError, KeyError) as exc:
                logger.warning(f'Mesh fixture {self.mesh_paths[index]} is unreadable: {exc}')
                hands.append(ReconstructedHand(index, error=str(exc)))
                continue
            hands.append(ReconstructedHand(index, mesh=mesh, camera=self.camera))
        return hands


class StaticMeshProvider(MeshProvider):
    """
    Меши, уже находящиеся в памяти: i-й меш для i-й области.
    """

    def __init__(self, meshes: Sequence[HandMesh], camera: Optional[PinholeCamera] = None):
        self.meshes = list(meshes)
        self.camera = camera

    def reconstruct(self, image: np.ndarray, regions: Sequence[np.ndarray]) -> list[ReconstructedHand]:
        return [ReconstructedHand(index, mesh=self.meshes[index], camera=self.camera)
                if index < len(self.meshes) else ReconstructedHand(index, error='no mesh for region')
                for index in range(len(regions))]


class HandLocalizer(ABC):
    """
    Абстрактный локализатор рук.
    """

    @abstractmethod
    def localize(self, image: np.ndarray) -> list[np.ndarray]:
        """
        :param image: Изображение uint8 ``(H, W, C)``.
        :return: Ноль или более бинарных масок рук.
        """


class OverrideMaskLocalizer(HandLocalizer):
    def __init__(self, masks: Sequence[np.ndarray]):
        self.masks = [np.asarray(mask, dtype=bool) for mask in masks]

    def localize(self, image: np.ndarray) -> list[np.ndarray]:
        return [mask.copy() for mask in self.masks]


def localize_hands(image: np.ndarray, localizer: Optional[HandLocalizer],
                   overrides: Optional[Sequence[np.ndarray]] = None) -> list[np.ndarray]:
    """
    Маски рук: файловые маски пользователя имеют приоритет над локализатором.
    """
    if overrides:
        return OverrideMaskLocalizer(overrides).localize(image)
    if localizer is None:
        return []
    masks = [mask for mask in localizer.localize(image) if mask.any()]
    logger.info(f'Localized {len(masks)} hand region(s)')
    return masks


@dataclass
class Detection:
    keypoints: Optional[Keypoints2D]
    confidence: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def found(self) -> bool:
        return self.keypoints is not None


class KeypointDetector(ABC):
    """
    Абстрактный детектор ключевых точек руки.
    """

    @abstractmethod
    def detect(self, image: np.ndarray, regions: Sequence[np.ndarray],
               hints: Optional[Sequence[Keypoints2D]] = None) -> list[Detection]:
        """
        Находит ключевые точки в каждой области.

        :param image: Изображение uint8 ``(H, W, C)``.
        :param regions: Маски областей.
        :param hints: Опорные ключевые точки по областям (если детектору они нужны).
        :return: По одному результату на область.
        """


class MeshKeypointDetector(KeypointDetector):
    """
    K' = Π(J·V'): та же модель реконструкции, тот же регрессор и та же камера.
    """

    def __init__(self, mesh_provider: MeshProvider, regressor: KeypointRegressor,
                 camera: Optional[PinholeCamera] = None):
        self.mesh_provider = mesh_provider
        self.regressor = regressor
        self.camera = camera

    def detect(self, image: np.ndarray, regions: Sequence[np.ndarray],
               hints: Optional[Sequence[Keypoints2D]] = None) -> list[Detection]:
        height, width = image.shape[:2]
        detections = []
        for hand in self.mesh_provider.reconstruct(image, regions):
            if not hand.ok:
                detections.append(Detection(None, 0.0, {'error': hand.error}))
                continue
            camera = hand.camera or self.camera or PinholeCamera.for_image(width, height)
            try:
                keypoints = project(regress_keypoints(hand.mesh, self.regressor), camera)
            except ProjectionDomainError as exc:
                detections.append(Detection(None, 0.0, {'error': str(exc)}))
                continue
            detections.append(Detection(keypoints, 1.0))
        return detections
