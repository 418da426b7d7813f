"""
Дообучение управляющей ветки на синтетических данных.

Базовый денойзер заморожен, AdamW обновляет только управляющую ветку. Потери
считаются только в области руки: маска нормируется на свою сумму, затем берётся
квадрат нормы невязки шума.
"""
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .artifacts import (DEPTH_SCALE, PathLike, atomic_write_bytes, read_depth_png,
                        read_image, read_labels)
from .exceptions import (EmptyMaskError, ManifestError, PartitionViolationError,
                         ShapeMismatchError, TrainingDivergedError)
from .hand_prior import DEPTH_FURTHEST, DEPTH_NEAREST, DepthMap
from .pipeline import Codec, downsample_mask, image_to_tensor
from .schedule import NoiseSchedule, TextEncoder, make_generator

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(eq=False)
class TrainSample:
    rgb: np.ndarray
    hand_mask: np.ndarray
    depth: DepthMap
    caption: str

    def __post_init__(self) -> None:
        self.hand_mask = np.asarray(self.hand_mask, dtype=bool)
        if not self.hand_mask.any():
            raise EmptyMaskError('Training sample has an empty hand mask')
        if self.hand_mask.shape != self.rgb.shape[:2] or self.depth.values.shape != self.rgb.shape[:2]:
            raise ShapeMismatchError('RGB, mask and depth sizes differ')


@dataclass
class TrainConfig:
    """
    Параметры дообучения; значения по умолчанию соответствуют полному масштабу.
    """
    learning_rate: float = 2e-5
    batch_size: int = 16
    total_steps: int = 2307
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: str = 'inpaint'
    caption_dropout: float = 0.0
    control_strength: float = 1.0
    checksum_every: int = 100
    log_every: int = 50

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.loss not in ('inpaint', 'full'):
            raise ValueError(f'Loss "{self.loss}" is not supported. Use "inpaint" or "full".')
        if self.batch_size < 1 or self.total_steps < 0 or self.learning_rate < 0:
            raise ValueError('Batch size must be positive, steps and learning rate nonnegative')

    def to_dict(self) -> dict:
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')).hexdigest()


def module_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class ControlledDenoiser(nn.Module):
    """
    Базовый денойзер плюс управляющая ветка, чьи признаки масштабируются силой.

    Обе части принимают пакеты: ``base(x_t, t, text, x_mask, control)`` и
    ``control(hint, x_t, t, text)``.
    """

    def __init__(self, base: nn.Module, control: Optional[nn.Module] = None, strength: float = 1.0):
        super().__init__()
        self.base = base
        self.control = control
        self.strength = strength

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, text: torch.Tensor, x_mask: torch.Tensor,
                hint: Optional[torch.Tensor] = None) -> torch.Tensor:
        features = None
        if self.control is not None and hint is not None:
            features = [block * self.strength for block in self.control(hint, x_t, t, text)]
        return self.base(x_t, t, text, x_mask, features)


@dataclass(eq=False)
class FrozenPartition:
    model: ControlledDenoiser
    trainable: nn.Module
    frozen: nn.Module

    def __post_init__(self) -> None:
        self.frozen.requires_grad_(False)
        self.frozen.eval()
        self.trainable.requires_grad_(True)
        self.trainable.train()

    @classmethod
    def for_control(cls, base: nn.Module, control: nn.Module, strength: float = 1.0) -> 'FrozenPartition':
        return cls(ControlledDenoiser(base, control, strength), control, base)

    @classmethod
    def for_base(cls, base: nn.Module) -> 'FrozenPartition':
        return cls(ControlledDenoiser(base, None), base, nn.Module())

    def frozen_checksum(self) -> str:
        return module_checksum(self.frozen)

    def trainable_checksum(self) -> str:
        return module_checksum(self.trainable)


def inpaint_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """
    ‖(m / Σm) ⊙ (ε − ε̂)‖² для сетки ``(C, h, w)`` или среднее по пакету ``(N, C, h, w)``.

    :param eps_true: Истинный шум.
    :param eps_pred: Предсказанный шум.
    :param m: Маска ``(h, w)``, ``(1, h, w)`` или ``(N, 1, h, w)``.
    :raises EmptyMaskError: Если Σm = 0 (у любого элемента пакета).
    """
    if eps_true.shape != eps_pred.shape:
        raise ShapeMismatchError(f'Shapes "{tuple(eps_true.shape)}" and "{tuple(eps_pred.shape)}" differ')
    batched = eps_true.dim() == 4
    residual = eps_true - eps_pred if batched else (eps_true - eps_pred)[None]
    mask = m.to(residual.dtype)
    while mask.dim() < 4:
        mask = mask[None]
    totals = mask.sum(dim=(1, 2, 3), keepdim=True)
    if (totals == 0).any():
        raise EmptyMaskError('Inpainting loss needs a nonempty mask')
    weighted = (mask / totals) * residual
    per_sample = weighted.pow(2).sum(dim=(1, 2, 3))
    return per_sample.mean() if batched else per_sample[0]


@dataclass
class LossValue:
    loss: float
    timesteps: list[int]
    step: int


@dataclass
class PreparedBatch:
    x0: torch.Tensor
    m: torch.Tensor
    x_mask: torch.Tensor
    hint: torch.Tensor
    captions: list[str]


def prepare_batch(batch: Sequence[TrainSample], codec: Codec, dtype: torch.dtype = torch.float32) -> PreparedBatch:
    x0, masks, masked, hints = [], [], [], []
    for sample in batch:
        pixels = image_to_tensor(sample.rgb, dtype)
        latent = codec.encode(pixels)
        latent_mask = torch.from_numpy(downsample_mask(sample.hand_mask, latent.shape[-2:])).to(dtype)[None]
        x0.append(latent)
        masks.append(latent_mask)
        masked.append(codec.encode(pixels * torch.from_numpy(~sample.hand_mask).to(dtype)[None]))
        hints.append(torch.from_numpy(sample.depth.values).to(dtype)[None])
    m = torch.stack(masks)
    return PreparedBatch(torch.stack(x0), m, torch.cat([m, torch.stack(masked)], dim=1),
                         torch.stack(hints), [sample.caption for sample in batch])


class ControlTrainer:
    """
    Цикл дообучения: AdamW по обучаемой части, проверка контрольной суммы замороженной.

    :param partition: Разбиение на обучаемую и замороженную части.
    :param schedule: Расписание шума.
    :param config: Параметры обучения.
    :param codec: Кодек изображений.
    :param text_encoder: Кодировщик подписей.
    """

    def __init__(self, partition: FrozenPartition, schedule: NoiseSchedule, config: TrainConfig,
                 codec: Codec, text_encoder: TextEncoder, dtype: torch.dtype = torch.float32):
        self.partition = partition
        self.schedule = schedule
        self.config = config
        self.codec = codec
        self.text_encoder = text_encoder
        self.dtype = dtype
        self.optimizer = torch.optim.AdamW(partition.trainable.parameters(), lr=config.learning_rate,
                                           betas=config.betas, eps=config.eps,
                                           weight_decay=config.weight_decay)
        self.generator = make_generator(config.seed)
        self.expected_frozen = partition.frozen_checksum()
        self.loss_trace: list[float] = []
        self.step = 0

    def _encode_captions(self, captions: Sequence[str]) -> torch.Tensor:
        embeddings = []
        for caption in captions:
            if self.config.caption_dropout > 0:
                draw = torch.rand((), generator=self.generator).item()
                caption = '' if draw < self.config.caption_dropout else caption
            embeddings.append(self.text_encoder.encode(caption).embedding.to(self.dtype))
        return torch.stack(embeddings)

    def loss_on(self, batch: PreparedBatch, timesteps: torch.Tensor, noise: torch.Tensor,
                text: torch.Tensor) -> torch.Tensor:
        alpha_bar = self.schedule.alpha_bar[timesteps].to(self.dtype).view(-1, 1, 1, 1)
        x_t = alpha_bar.sqrt() * batch.x0 + (1.0 - alpha_bar).sqrt() * noise
        eps_pred = self.partition.model(x_t, timesteps, text, batch.x_mask, batch.hint)
        if self.config.loss == 'inpaint':
            return inpaint_loss(noise, eps_pred, batch.m)
        return F.mse_loss(eps_pred, noise)

    def train_step(self, batch: Sequence[TrainSample]) -> LossValue:
        """
        Один шаг: равномерный t из 1..T, гауссов ε, x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε.

        :raises TrainingDivergedError: Если значение потерь нечисловое.
        """
        prepared = prepare_batch(batch, self.codec, self.dtype)
        size = prepared.x0.shape[0]
        timesteps = torch.randint(1, self.schedule.T + 1, (size,), generator=self.generator)
        noise = torch.randn(prepared.x0.shape, generator=self.generator, dtype=self.dtype)
        text = self._encode_captions(prepared.captions)
        loss = self.loss_on(prepared, timesteps, noise, text)
        if not torch.isfinite(loss):
            logger.error(f'Non-finite loss at step {self.step}: timesteps={timesteps.tolist()}')
            raise TrainingDivergedError(f'Loss became non-finite at step {self.step}', self.loss_trace,
                                        {'step': self.step, 'timesteps': timesteps.tolist()})
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        value = float(loss.detach())
        self.loss_trace.append(value)
        if self.config.checksum_every and self.step % self.config.checksum_every == 0:
            self.verify_frozen()
        if self.config.log_every and self.step % self.config.log_every == 0:
            logger.info(f'Step {self.step}: loss={value:.6f}')
        return LossValue(value, timesteps.tolist(), self.step)

    def verify_frozen(self) -> None:
        actual = self.partition.frozen_checksum()
        if actual != self.expected_frozen:
            raise PartitionViolationError(f'Frozen parameters changed at step {self.step}')
        logger.debug(f'Frozen checksum verified at step {self.step}')

    def fit(self, epochs: Callable[[int], Iterable[TrainSample]], steps: Optional[int] = None) -> list[float]:
        """
        Крутит эпохи, пока не будет сделано ``steps`` шагов.

        :param epochs: Функция номер эпохи → поток образцов.
        :param steps: Число шагов (по умолчанию из конфигурации).
        :return: История потерь.
        """
        steps = self.config.total_steps if steps is None else steps
        epoch = 0
        while self.step < steps:
            batch: list[TrainSample] = []
            produced = False
            for sample in epochs(epoch):
                produced = True
                batch.append(sample)
                if len(batch) == self.config.batch_size:
                    self.train_step(batch)
                    batch = []
                    if self.step >= steps:
                        break
            if batch and self.step < steps:
                self.train_step(batch)
            if not produced:
                raise ManifestError('Training data yielded no samples')
            epoch += 1
        self.verify_frozen()
        return self.loss_trace

    def save_checkpoint(self, path: PathLike, extra: Optional[dict] = None) -> Path:
        return save_checkpoint(path, self.partition.trainable, self.config.to_dict(), extra)


def save_checkpoint(path: PathLike, module: nn.Module, config: dict, extra: Optional[dict] = None) -> Path:
    """
    Пишет версионированный чекпойнт: только обучаемые параметры и хеш конфигурации.
    """
    payload = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'config': config,
        'config_hash': hashlib.sha256(json.dumps(config, sort_keys=True).encode('utf-8')).hexdigest(),
        'state_dict': module.state_dict(),
        'extra': extra or {},
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    logger.info(f'Checkpoint written to {path}')
    return atomic_write_bytes(path, buffer.getvalue())


def load_checkpoint(path: PathLike) -> dict:
    payload = torch.load(path, map_location='cpu', weights_only=True)
    if payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f'Checkpoint format "{payload.get("format_version")}" is not supported')
    return payload


@dataclass
class IngestStats:
    records: int = 0
    yielded: int = 0
    unreadable: int = 0
    empty: int = 0


@dataclass
class ManifestRecord:
    rgb: Path
    depth: Path
    seg: Path
    caption: str
    style: str
    depth_format: str = 'raw'
    hand_labels: Optional[list[int]] = None
    extra: dict = field(default_factory=dict)


REQUIRED_KEYS = ('rgb', 'depth', 'seg', 'caption', 'style')


def read_manifest(path: PathLike) -> list[ManifestRecord]:
    """
    Разбирает манифест JSON-lines; пути считаются относительно каталога манифеста.

    :raises ManifestError: Если строка не JSON-объект или в ней нет обязательных ключей.
    """
    path = Path(path)
    records = []
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as exc:
        raise ManifestError(f'Manifest "{path}" is unreadable: {exc}') from exc
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f'Manifest line {number} is not valid JSON') from exc
        if not isinstance(data, dict) or any(key not in data for key in REQUIRED_KEYS):
            raise ManifestError(f'Manifest line {number} must contain keys {", ".join(REQUIRED_KEYS)}')
        if data['style'] not in ('resize', 'crop'):
            raise ManifestError(f'Style "{data["style"]}" on line {number} is not supported. Use "resize" or "crop".')
        depth_format = data.get('depth_format', 'raw')
        if depth_format not in ('raw', 'normalized'):
            raise ManifestError(f'Depth format "{depth_format}" on line {number} is not supported')
        extra = {key: value for key, value in data.items()
                 if key not in REQUIRED_KEYS + ('depth_format', 'hand_labels')}
        records.append(ManifestRecord(path.parent / data['rgb'], path.parent / data['depth'],
                                      path.parent / data['seg'], str(data['caption']), data['style'],
                                      depth_format, data.get('hand_labels'), extra))
    return records


def normalize_raw_depth(raw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Нормирует сырую глубину отдельно для каждой связной области руки:
    ближайший пиксель 1.0, дальний 0.2, фон 0.
    """
    values = np.zeros(raw.shape, dtype=np.float64)
    components, count = scipy.ndimage.label(mask)
    for index in range(1, count + 1):
        region = components == index
        depths = raw[region]
        near, far = depths.min(), depths.max()
        if far - near <= 0:
            values[region] = DEPTH_NEAREST
        else:
            values[region] = DEPTH_FURTHEST + (DEPTH_NEAREST - DEPTH_FURTHEST) * (far - depths) / (far - near)
    return values


def _resize(array: np.ndarray, size: int, resample: Image.Resampling) -> np.ndarray:
    if array.shape[0] == size and array.shape[1] == size:
        return array.copy()
    if array.dtype == np.float64:
        pil = Image.fromarray(array.astype(np.float32))
        return np.asarray(pil.resize((size, size), resample), dtype=np.float64)
    squeeze = array.ndim == 3 and array.shape[2] == 1
    pil = Image.fromarray(array[:, :, 0] if squeeze else array)
    resized = np.asarray(pil.resize((size, size), resample))
    return resized[:, :, None] if squeeze else resized


def hand_crop_window(mask: np.ndarray, size: int, rng: np.random.Generator) -> tuple[int, int]:
    """
    Случайное окно size×size, целиком содержащее маску руки, если она в него помещается;
    иначе окно по центру руки.

    :return: Верхний левый угол (y, x).
    """
    ys, xs = np.nonzero(mask)
    corner = []
    for lo_px, hi_px, extent in ((ys.min(), ys.max(), mask.shape[0]), (xs.min(), xs.max(), mask.shape[1])):
        low = max(0, int(hi_px) + 1 - size)
        high = min(int(lo_px), extent - size)
        if low <= high:
            corner.append(int(rng.integers(low, high + 1)))
        else:
            centre = (int(lo_px) + int(hi_px)) // 2
            corner.append(int(np.clip(centre - size // 2, 0, extent - size)))
    return corner[0], corner[1]


def ingest_dataset(manifest_path: PathLike, image_size: int = 512, seed: int = 0,
                   stats: Optional[IngestStats] = None) -> Iterator[TrainSample]:
    """
    Поток обучающих образцов из манифеста.

    Маска руки выводится из меток сегментации; записи ``resize`` приводятся к
    image_size×image_size, записи ``crop`` вырезаются случайным окном вокруг руки.
    Нечитаемые записи и записи с пустой маской пропускаются и учитываются в ``stats``.

    :param manifest_path: Путь к манифесту JSON-lines.
    :param image_size: Сторона выходного квадрата.
    :param seed: Сид случайных окон.
    :param stats: Счётчики (заполняются по ходу).
    """
    stats = stats if stats is not None else IngestStats()
    for index, record in enumerate(read_manifest(manifest_path)):
        stats.records += 1
        try:
            rgb = read_image(record.rgb)
            labels = read_labels(record.seg)
            raw_depth = read_depth_png(record.depth)
        except (OSError, ValueError) as exc:
            stats.unreadable += 1
            logger.warning(f'Skipping unreadable record {index}: {exc}')
            continue
        if labels.shape != rgb.shape[:2] or raw_depth.shape != rgb.shape[:2]:
            stats.unreadable += 1
            logger.warning(f'Skipping record {index}: rgb, seg and depth sizes differ')
            continue
        mask = np.isin(labels, record.hand_labels) if record.hand_labels else labels != 0
        if not mask.any():
            stats.empty += 1
            continue
        if record.depth_format == 'normalized':
            depth = np.where(mask, raw_depth / DEPTH_SCALE, 0.0)
        else:
            depth = normalize_raw_depth(raw_depth, mask)

        height, width = mask.shape
        if record.style == 'crop' and height >= image_size and width >= image_size:
            top, left = hand_crop_window(mask, image_size, np.random.default_rng([seed, index]))
            window = (slice(top, top + image_size), slice(left, left + image_size))
            rgb, mask, depth = rgb[window], mask[window], depth[window]
        else:
            rgb = _resize(rgb, image_size, Image.Resampling.BICUBIC)
            mask = _resize(mask.astype(np.uint8), image_size, Image.Resampling.NEAREST) != 0
            depth = np.where(mask, _resize(depth, image_size, Image.Resampling.NEAREST), 0.0)
        if not mask.any():
            stats.empty += 1
            continue
        stats.yielded += 1
        yield TrainSample(rgb, mask, DepthMap(depth), record.caption)
    logger.info(f'Ingested {stats.yielded} of {stats.records} records '
                f'({stats.unreadable} unreadable, {stats.empty} empty)')


def shuffled_epochs(samples: Sequence[TrainSample], seed: int) -> Callable[[int], Iterator[TrainSample]]:
    """
    Эпохи с перестановкой, зависящей только от (seed, номер эпохи).
    """
    def epoch(number: int) -> Iterator[TrainSample]:
        order = np.random.default_rng([seed, number]).permutation(len(samples))
        return (samples[index] for index in order)
    return epoch
