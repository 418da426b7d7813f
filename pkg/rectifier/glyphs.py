"""
Синтетический мир «глифов руки» 64×64: ладонь-прямоугольник с 3..6 пальцами-зубцами.

Глиф задаётся геометрией, из неё строится меш (778 вершин с повтором), а
изображение, маска и карта глубины получаются рендером этого же меша, поэтому
маска и ненулевая глубина совпадают по построению.
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.ndimage

from .artifacts import PathLike, atomic_write_bytes, encode_png, write_json
from .hand_prior import (NUM_KEYPOINTS, Detection, DepthMap, HandLocalizer, HandMesh,
                         KeypointDetector, KeypointRegressor, Keypoints2D, PinholeCamera,
                         render_depth)

logger = logging.getLogger(__name__)

GLYPH_SIZE = 64
MIN_PRONGS = 3
MAX_PRONGS = 6
BACKGROUND = 0.1
TEXTURE_MEAN = 0.7
TEXTURE_AMPLITUDE = 0.15
FOREGROUND_THRESHOLD = 0.35
REGION_MARGIN = 2
GLYPH_LABEL = 1
SURROUND_LABEL = 2


def glyph_camera() -> PinholeCamera:
    return PinholeCamera.for_image(GLYPH_SIZE, GLYPH_SIZE)


@dataclass(frozen=True)
class GlyphGeometry:
    """
    Геометрия глифа в пикселях.

    :param palm: Прямоугольник ладони (x0, y0, x1, y1), целые углы.
    :param prongs: Зубцы (x0, x1, длина) вверх от верхней грани ладони.
    :param depth: Плоскость глубины (z в центре кадра, dz/dx, dz/dy).
    :param texture: Текстура (угол, период, фаза).
    """
    palm: tuple[int, int, int, int]
    prongs: tuple[tuple[int, int, int], ...]
    depth: tuple[float, float, float]
    texture: tuple[float, float, float]

    @property
    def prong_count(self) -> int:
        return len(self.prongs)

    def rectangles(self) -> list[tuple[int, int, int, int]]:
        x0, y0, x1, y1 = self.palm
        return [self.palm] + [(a, y0 - length, b, y0) for a, b, length in self.prongs]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'GlyphGeometry':
        return cls(tuple(data['palm']), tuple(tuple(prong) for prong in data['prongs']),
                   tuple(data['depth']), tuple(data['texture']))

    def z_at(self, u: float, v: float) -> float:
        z0, gx, gy = self.depth
        return z0 + gx * (u - GLYPH_SIZE / 2) + gy * (v - GLYPH_SIZE / 2)

    def mesh(self, camera: Optional[PinholeCamera] = None) -> HandMesh:
        """
        Меш: по два треугольника на прямоугольник, вершины обратно спроецированы
        на наклонную плоскость глубины.
        """
        camera = camera or glyph_camera()
        vertices, faces = [], []
        for x0, y0, x1, y1 in self.rectangles():
            base = len(vertices)
            for u, v in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):
                z = self.z_at(u, v)
                vertices.append(((u - camera.cx) * z / camera.focal, (v - camera.cy) * z / camera.focal, z))
            faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
        return HandMesh.padded(np.asarray(vertices), np.asarray(faces))

    def depth_map(self, camera: Optional[PinholeCamera] = None) -> DepthMap:
        return render_depth([self.mesh(camera)], camera or glyph_camera())

    def mask(self) -> np.ndarray:
        return self.depth_map().coverage

    def render(self) -> np.ndarray:
        """
        Изображение uint8 ``(64, 64, 1)``: полосатая текстура на глифе, тёмный фон.
        """
        angle, period, phase = self.texture
        ys, xs = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE].astype(np.float64) + 0.5
        stripes = np.sin(2 * np.pi * (xs * np.cos(angle) + ys * np.sin(angle)) / period + phase)
        values = np.where(self.mask(), TEXTURE_MEAN + TEXTURE_AMPLITUDE * stripes, BACKGROUND)
        return np.round(values * 255).astype(np.uint8)[:, :, None]


def _prongs(rng: np.random.Generator, palm: tuple[int, int, int, int], count: int) -> tuple:
    x0, y0, x1, _ = palm
    gap = 2
    width = max(2, min(4, (x1 - x0 - (count - 1) * gap) // count))
    span = count * width + (count - 1) * gap
    left = x0 + (x1 - x0 - span) // 2
    prongs = []
    for index in range(count):
        a = left + index * (width + gap)
        length = int(rng.integers(8, min(17, y0 - 1)))
        prongs.append((a, a + width, length))
    return tuple(prongs)


def random_geometry(rng: np.random.Generator, prong_count: Optional[int] = None) -> GlyphGeometry:
    count = int(rng.integers(MIN_PRONGS, MAX_PRONGS + 1)) if prong_count is None else prong_count
    width = int(rng.integers(24, 31))
    height = int(rng.integers(12, 19))
    left = GLYPH_SIZE // 2 - width // 2 + int(rng.integers(-4, 5))
    bottom = int(rng.integers(50, 57))
    palm = (left, bottom - height, left + width, bottom)
    depth = (float(rng.uniform(2.5, 3.5)), float(rng.uniform(-0.02, 0.02)), float(rng.uniform(-0.02, 0.02)))
    texture = (float(rng.uniform(0, np.pi)), float(rng.uniform(3.0, 5.0)), float(rng.uniform(0, 2 * np.pi)))
    return GlyphGeometry(palm, _prongs(rng, palm, count), depth, texture)


def malform_glyph(geometry: GlyphGeometry, rng: np.random.Generator) -> GlyphGeometry:
    """
    «Испорченный» вариант: то же тело с другим числом зубцов.
    """
    choices = [count for count in range(MIN_PRONGS - 1, MAX_PRONGS + 2) if count != geometry.prong_count]
    count = int(rng.choice(choices))
    return GlyphGeometry(geometry.palm, _prongs(rng, geometry.palm, count), geometry.depth, geometry.texture)


def region_mask(mask: np.ndarray, margin: int = REGION_MARGIN) -> np.ndarray:
    """
    Ограничивающий прямоугольник маски, расширенный на margin пикселей.
    """
    mask = np.asarray(mask, dtype=bool)
    region = np.zeros_like(mask)
    if not mask.any():
        return region
    ys, xs = np.nonzero(mask)
    region[max(ys.min() - margin, 0):ys.max() + margin + 1, max(xs.min() - margin, 0):xs.max() + margin + 1] = True
    return region


def structure_error(image: np.ndarray, geometry: GlyphGeometry) -> float:
    """
    1 − IoU между пикселями глифа на изображении (порог яркости) и маской геометрии.
    """
    predicted = foreground(image)
    target = geometry.mask()
    union = np.logical_or(predicted, target).sum()
    if union == 0:
        return 0.0
    return float(1.0 - np.logical_and(predicted, target).sum() / union)


def foreground(image: np.ndarray) -> np.ndarray:
    array = np.asarray(image)
    gray = array.astype(np.float64).mean(axis=2) if array.ndim == 3 else array.astype(np.float64)
    return gray > FOREGROUND_THRESHOLD * 255


def texture_word(angle: float) -> str:
    degrees = np.degrees(angle) % 180
    if degrees < 30 or degrees >= 150:
        return 'vertical'
    if 60 <= degrees < 120:
        return 'horizontal'
    return 'diagonal'


@dataclass(eq=False)
class GlyphSample:
    index: int
    geometry: GlyphGeometry
    rgb: np.ndarray
    depth: DepthMap
    mask: np.ndarray
    caption: str

    @property
    def prong_count(self) -> int:
        return self.geometry.prong_count

    def labels(self) -> np.ndarray:
        """
        Сегментация: 1 на глифе, 2 в окружающем прямоугольнике, 0 на фоне.
        """
        labels = np.where(region_mask(self.mask), SURROUND_LABEL, 0).astype(np.uint8)
        labels[self.mask] = GLYPH_LABEL
        return labels


def make_glyph_sample(index: int, seed: int) -> GlyphSample:
    geometry = random_geometry(np.random.default_rng([seed, index]))
    depth = geometry.depth_map()
    caption = f'a hand glyph with {texture_word(geometry.texture[0])} stripes'
    return GlyphSample(index, geometry, geometry.render(), depth, depth.coverage, caption)


def generate_glyph_dataset(n: int, seed: int = 0) -> list[GlyphSample]:
    """
    Воспроизводимый набор глифов: i-й образец зависит только от (seed, i).
    """
    if n <= 0:
        raise ValueError(f'Dataset size "{n}" must be positive')
    return [make_glyph_sample(index, seed) for index in range(n)]


def write_glyph_dataset(samples: Sequence[GlyphSample], directory: PathLike) -> Path:
    """
    Пишет PNG, меши и манифест JSON-lines в формате обучающего манифеста.

    :return: Путь к ``manifest.jsonl``.
    """
    directory = Path(directory)
    lines = []
    for sample in samples:
        name = f'{sample.index:05d}'
        atomic_write_bytes(directory / 'rgb' / f'{name}.png', encode_png(sample.rgb))
        atomic_write_bytes(directory / 'depth' / f'{name}.png', sample.depth.to_png_bytes())
        atomic_write_bytes(directory / 'seg' / f'{name}.png', encode_png(sample.labels()))
        write_json(directory / 'mesh' / f'{name}.json', sample.geometry.mesh().to_dict())
        record = {
            'rgb': f'rgb/{name}.png',
            'depth': f'depth/{name}.png',
            'seg': f'seg/{name}.png',
            'mesh': f'mesh/{name}.json',
            'caption': sample.caption,
            'style': 'resize',
            'depth_format': 'normalized',
            'hand_labels': [GLYPH_LABEL, SURROUND_LABEL],
            'prong_count': sample.prong_count,
            'geometry': sample.geometry.to_dict(),
        }
        lines.append(dumps_line(record))
    manifest = directory / 'manifest.jsonl'
    atomic_write_bytes(manifest, ''.join(lines).encode('utf-8'))
    logger.info(f'Wrote {len(samples)} glyph samples to {directory}')
    return manifest


def dumps_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + '\n'


def glyph_regressor() -> KeypointRegressor:
    """
    Ключевые точки глифа: первые 21 вершина (углы ладони и зубцов).
    """
    return KeypointRegressor.selector(list(range(NUM_KEYPOINTS)))


class GlyphLocalizer(HandLocalizer):
    """
    Маски рук как ограничивающие прямоугольники связных областей глифа.
    """

    def __init__(self, margin: int = REGION_MARGIN, min_area: int = 6):
        self.margin = margin
        self.min_area = min_area

    def localize(self, image: np.ndarray) -> list[np.ndarray]:
        components, count = scipy.ndimage.label(foreground(image), structure=np.ones((3, 3), dtype=bool))
        masks = []
        for index in range(1, count + 1):
            component = components == index
            if component.sum() >= self.min_area:
                masks.append(region_mask(component, self.margin))
        return masks


class GlyphKeypointDetector(KeypointDetector):
    """
    Притягивает опорные ключевые точки к ближайшему пикселю глифа в области.

    Уверенность растёт с контрастом глифа к фону. Без опорных точек все 21 точка
    ставятся в центр масс глифа.
    """

    def __init__(self, threshold: float = FOREGROUND_THRESHOLD):
        self.threshold = threshold

    def detect(self, image: np.ndarray, regions: Sequence[np.ndarray],
               hints: Optional[Sequence[Keypoints2D]] = None) -> list[Detection]:
        array = np.asarray(image, dtype=np.float64)
        gray = array.mean(axis=2) if array.ndim == 3 else array
        detections = []
        for index, region in enumerate(regions):
            region = np.asarray(region, dtype=bool)
            glyph = (gray > self.threshold * 255) & region
            if not glyph.any():
                detections.append(Detection(None, 0.0, {'error': 'no glyph pixels in region'}))
                continue
            background = gray[region & ~glyph]
            contrast = gray[glyph].mean() - (background.mean() if background.size else BACKGROUND * 255)
            confidence = float(np.clip(contrast / ((TEXTURE_MEAN - BACKGROUND) * 255), 0.0, 1.0))
            if hints is None:
                ys, xs = np.nonzero(glyph)
                points = np.repeat([[xs.mean() + 0.5, ys.mean() + 0.5]], NUM_KEYPOINTS, axis=0)
            else:
                _, (nearest_y, nearest_x) = scipy.ndimage.distance_transform_edt(~glyph, return_indices=True)
                hint = hints[index].points
                rows = np.clip(np.floor(hint[:, 1]).astype(int), 0, gray.shape[0] - 1)
                cols = np.clip(np.floor(hint[:, 0]).astype(int), 0, gray.shape[1] - 1)
                points = np.stack([nearest_x[rows, cols] + 0.5, nearest_y[rows, cols] + 0.5], axis=1)
            detections.append(Detection(Keypoints2D(points), confidence))
        return detections
