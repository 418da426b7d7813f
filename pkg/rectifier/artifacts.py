"""
Чтение и запись артефактов: PNG (8 и 16 бит), JSON, атомарная запись файлов.
"""
import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

DEPTH_SCALE = 65535


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Пишет файл через временный файл в том же каталоге и ``os.replace``.

    :param path: Путь назначения.
    :param data: Содержимое.
    :return: Путь назначения.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = tempfile.NamedTemporaryFile(dir=path.parent, prefix=f'.{path.name}.', delete=False)
    try:
        tmp.write(data)
        tmp.flush()
        os.fsync(tmp.fileno())
        tmp.close()
        os.replace(tmp.name, path)
    except BaseException:
        tmp.close()
        if os.path.exists(tmp.name):
            os.unlink(tmp.name)
        raise
    logger.debug(f'Wrote {path} ({len(data)} bytes)')
    return path


def dumps_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + '\n'


def write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_bytes(path, dumps_json(payload).encode('utf-8'))


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding='utf-8'))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def as_image_array(image: np.ndarray) -> np.ndarray:
    """
    Приводит изображение к форме ``(H, W, C)`` и типу uint8.
    """
    array = np.asarray(image)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3 or array.shape[2] not in (1, 3):
        raise ValueError(f'Image shape "{array.shape}" is not (H, W[, 1|3])')
    if array.dtype != np.uint8:
        raise ValueError(f'Image dtype "{array.dtype}" is not uint8')
    return array


def encode_png(image: np.ndarray) -> bytes:
    array = as_image_array(image)
    pil = Image.fromarray(array[:, :, 0] if array.shape[2] == 1 else array)
    buffer = io.BytesIO()
    pil.save(buffer, format='PNG')
    return buffer.getvalue()


def write_png(path: PathLike, image: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_png(image))


def read_image(path: PathLike) -> np.ndarray:
    """
    Читает PNG как uint8 ``(H, W, C)``: градации серого дают C = 1, остальное RGB.
    """
    with Image.open(path) as pil:
        if pil.mode in ('L', '1', 'I;16', 'I'):
            array = np.asarray(pil.convert('L'))
        else:
            array = np.asarray(pil.convert('RGB'))
    return as_image_array(array.copy())


def read_mask(path: PathLike) -> np.ndarray:
    """
    Читает маску: ненулевой пиксель означает область руки.
    """
    with Image.open(path) as pil:
        array = np.asarray(pil)
    if array.ndim == 3:
        array = array.max(axis=2)
    return array != 0


def read_labels(path: PathLike) -> np.ndarray:
    with Image.open(path) as pil:
        array = np.asarray(pil)
    if array.ndim == 3:
        array = array[:, :, 0]
    return array.astype(np.int64)


def encode_depth_png(values: np.ndarray) -> bytes:
    """
    Сохраняет карту глубины как 16-битный PNG: value = round(65535·d).
    """
    quantized = np.round(np.clip(values, 0.0, 1.0) * DEPTH_SCALE).astype(np.uint16)
    buffer = io.BytesIO()
    Image.fromarray(quantized).save(buffer, format='PNG')
    return buffer.getvalue()


def read_depth_png(path: PathLike) -> np.ndarray:
    """
    Читает 16-битный PNG и возвращает сырые целые значения.
    """
    with Image.open(path) as pil:
        array = np.asarray(pil)
    if array.ndim == 3:
        array = array[:, :, 0]
    return array.astype(np.float64)
