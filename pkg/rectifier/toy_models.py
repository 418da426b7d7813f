"""
Настольные модели: маленький свёрточный денойзер с управляющей веткой, хеширующий
текстовый кодировщик, мок-детектор для проверки адаптивной силы и сквозное
обучение на глифах.
"""
import csv
import hashlib
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .artifacts import PathLike, read_json, write_json
from .control import ControlBranch, PhaseSweepReport
from .exceptions import ModelLoadError
from .glyphs import (GlyphGeometry, GlyphKeypointDetector, GlyphLocalizer, GlyphSample, glyph_camera,
                     glyph_regressor, make_glyph_sample, malform_glyph, region_mask, structure_error)
from .hand_prior import Detection, KeypointDetector, Keypoints2D, StaticMeshProvider
from .pipeline import IdentityCodec, InpaintRequest, RectifiedResult, RefinerBackend
from .schedule import Conditioning, Denoiser, NoiseSchedule, TextEncoder
from .training import (ControlTrainer, FrozenPartition, TrainConfig, ingest_dataset, load_checkpoint,
                       module_checksum, save_checkpoint, shuffled_epochs)

logger = logging.getLogger(__name__)

BACKEND_FORMAT_VERSION = 1
TEXT_DIM = 32
EMBED_DIM = 64


class HashingTextEncoder(TextEncoder):
    """
    Детерминированное кодирование промпта: хеши слов раскладываются по ``dim`` корзинам.
    """

    def __init__(self, dim: int = TEXT_DIM):
        self.dim = dim
        self.name = f'hashing-{dim}'

    def encode(self, text: str) -> Conditioning:
        vector = torch.zeros(self.dim, dtype=torch.float64)
        tokens = re.findall(r'[a-z0-9]+', text.lower())
        for token in tokens:
            digest = hashlib.sha256(token.encode('utf-8')).digest()
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vector[int.from_bytes(digest[:4], 'big') % self.dim] += sign
        if tokens:
            vector /= math.sqrt(len(tokens))
        return Conditioning(text, vector.to(torch.float32), self.name)


def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = timesteps.to(torch.float32)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def zero_module(module: nn.Module) -> nn.Module:
    for parameter in module.parameters():
        nn.init.zeros_(parameter)
    return module


class ResBlock(nn.Module):
    def __init__(self, channels_in: int, channels_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels_in)
        self.conv1 = nn.Conv2d(channels_in, channels_out, 3, padding=1)
        self.emb = nn.Linear(EMBED_DIM, channels_out)
        self.norm2 = nn.GroupNorm(8, channels_out)
        self.conv2 = nn.Conv2d(channels_out, channels_out, 3, padding=1)
        self.skip = nn.Identity() if channels_in == channels_out else nn.Conv2d(channels_in, channels_out, 1)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.silu(self.norm1(h)))
        out = out + self.emb(emb)[:, :, None, None]
        out = self.conv2(F.silu(self.norm2(out)))
        return out + self.skip(h)


class Encoder(nn.Module):
    """
    Три блока: (w, 64²), (2w, 32²), (2w, 32²). Выход каждого блока доступен для
    добавления признаков управляющей ветки.
    """

    def __init__(self, width: int):
        super().__init__()
        self.block1 = ResBlock(width, width)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.block2 = ResBlock(2 * width, 2 * width)
        self.block3 = ResBlock(2 * width, 2 * width)

    def forward(self, h: torch.Tensor, emb: torch.Tensor,
                control: Optional[Sequence[torch.Tensor]] = None) -> list[torch.Tensor]:
        outputs = []
        h = self.block1(h, emb)
        h = h + control[0] if control is not None else h
        outputs.append(h)
        h = self.block2(self.down(h), emb)
        h = h + control[1] if control is not None else h
        outputs.append(h)
        h = self.block3(h, emb)
        h = h + control[2] if control is not None else h
        outputs.append(h)
        return outputs


class Embedding(nn.Module):
    def __init__(self, text_dim: int):
        super().__init__()
        self.time = nn.Sequential(nn.Linear(EMBED_DIM, EMBED_DIM), nn.SiLU(), nn.Linear(EMBED_DIM, EMBED_DIM))
        self.text = nn.Linear(text_dim, EMBED_DIM)

    def forward(self, t: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        return self.time(timestep_embedding(t, EMBED_DIM)) + self.text(text)


def _batched(t: int, conditioning: Conditioning, *tensors: Optional[torch.Tensor]) -> tuple:
    return (torch.tensor([t]), conditioning.embedding[None].to(torch.float32),
            *[None if tensor is None else tensor[None].to(torch.float32) for tensor in tensors])


class ToyDenoiser(nn.Module, Denoiser):
    """
    Денойзер инпейнтинга на сетке ``(C, 64, 64)``: вход x_t ∥ m ∥ замаскированное изображение.

    :param channels: Число каналов изображения.
    :param width: Ширина первого блока.
    :param text_dim: Размер текстового эмбеддинга.
    """

    def __init__(self, channels: int = 1, width: int = 32, text_dim: int = TEXT_DIM):
        super().__init__()
        self.channels = channels
        self.width = width
        self.text_dim = text_dim
        self.embedding = Embedding(text_dim)
        self.stem = nn.Conv2d(2 * channels + 1, width, 3, padding=1)
        self.encoder = Encoder(width)
        self.middle = ResBlock(2 * width, 2 * width)
        self.merge3 = ResBlock(4 * width, 2 * width)
        self.merge2 = ResBlock(4 * width, 2 * width)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.merge1 = ResBlock(2 * width, width)
        self.out = nn.Sequential(nn.GroupNorm(8, width), nn.SiLU(), nn.Conv2d(width, channels, 3, padding=1))

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, text: torch.Tensor,
                x_mask: Optional[torch.Tensor] = None,
                control: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        if x_mask is None:
            x_mask = torch.zeros(x_t.shape[0], self.channels + 1, *x_t.shape[-2:], dtype=x_t.dtype)
        emb = self.embedding(t, text)
        h1, h2, h3 = self.encoder(self.stem(torch.cat([x_t, x_mask], dim=1)), emb, control)
        h = self.middle(h3, emb)
        h = self.merge3(torch.cat([h, h3], dim=1), emb)
        h = self.merge2(torch.cat([h, h2], dim=1), emb)
        h = self.up(F.interpolate(h, scale_factor=2, mode='nearest'))
        h = self.merge1(torch.cat([h, h1], dim=1), emb)
        return self.out(h)

    def predict_noise(self, x_t: torch.Tensor, t: int, conditioning: Conditioning,
                      x_mask: Optional[torch.Tensor] = None,
                      control: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        t_batch, text, x_batch, mask_batch = _batched(t, conditioning, x_t, x_mask)
        control_batch = None if control is None else [block[None].to(torch.float32) for block in control]
        return self(x_batch, t_batch, text, mask_batch, control_batch)[0].to(x_t.dtype)


class ToyControlBranch(nn.Module, ControlBranch):
    """
    Управляющая ветка: копия энкодера денойзера, вход по карте глубины через
    свёрточный hint-блок, выходы через нулевые 1×1 свёртки.
    """

    def __init__(self, channels: int = 1, width: int = 32, text_dim: int = TEXT_DIM):
        super().__init__()
        self.channels = channels
        self.width = width
        self.embedding = Embedding(text_dim)
        self.stem = nn.Conv2d(channels, width, 3, padding=1)
        self.hint = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1), nn.SiLU(),
            nn.Conv2d(16, 16, 3, padding=1), nn.SiLU(),
            zero_module(nn.Conv2d(16, width, 3, padding=1)),
        )
        self.encoder = Encoder(width)
        self.zero_convs = nn.ModuleList([
            zero_module(nn.Conv2d(width, width, 1)),
            zero_module(nn.Conv2d(2 * width, 2 * width, 1)),
            zero_module(nn.Conv2d(2 * width, 2 * width, 1)),
        ])

    @classmethod
    def from_base(cls, base: ToyDenoiser) -> 'ToyControlBranch':
        """
        Ветка с энкодером и эмбеддингами, скопированными из базового денойзера.
        """
        branch = cls(base.channels, base.width, base.text_dim)
        branch.encoder.load_state_dict(base.encoder.state_dict())
        branch.embedding.load_state_dict(base.embedding.state_dict())
        return branch

    def forward(self, hint: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor,
                text: torch.Tensor) -> list[torch.Tensor]:
        emb = self.embedding(t, text)
        h = self.stem(x_t) + self.hint(hint)
        return [conv(block) for conv, block in zip(self.zero_convs, self.encoder(h, emb))]

    def features(self, control_image: torch.Tensor, x_t: torch.Tensor, t: int,
                 conditioning: Conditioning) -> list[torch.Tensor]:
        t_batch, text, hint, x_batch = _batched(t, conditioning, control_image, x_t)
        return [block[0].to(x_t.dtype) for block in self(hint, x_batch, t_batch, text)]


@dataclass
class MockResult:
    image: np.ndarray
    regions: list[np.ndarray]
    strength: float
    metadata: dict = field(default_factory=dict)


class MockSampler:
    """
    Сэмплер-заглушка: кодирует силу в значении пикселей и запоминает вызовы.
    """
    scale = 200

    def __init__(self, size: int = 4):
        self.size = size
        self.calls: list[float] = []

    def __call__(self, request: Any, strength: float) -> MockResult:
        self.calls.append(strength)
        image = np.full((self.size, self.size, 1), round(strength * self.scale), dtype=np.uint8)
        return MockResult(image, [np.ones((self.size, self.size), dtype=bool)], strength)


class MockErrorDetector(KeypointDetector):
    """
    Детектор-заглушка: по силе, закодированной в изображении, сдвигает опорные точки
    на ошибку из таблицы; ``None`` в таблице означает «рука не найдена».
    """

    def __init__(self, table: dict[float, Optional[float]]):
        self.table = {round(strength, 3): error for strength, error in table.items()}

    def error_for(self, image: np.ndarray) -> Optional[float]:
        strength = round(float(np.asarray(image).flat[0]) / MockSampler.scale, 3)
        return self.table.get(strength)

    def detect(self, image: np.ndarray, regions: Sequence[np.ndarray],
               hints: Optional[Sequence[Keypoints2D]] = None) -> list[Detection]:
        error = self.error_for(image)
        detections = []
        for index in range(len(regions)):
            if error is None or hints is None:
                detections.append(Detection(None, 0.0))
                continue
            detections.append(Detection(Keypoints2D(hints[index].points + np.array([error, 0.0])), 1.0))
        return detections


@dataclass
class ToyTrainConfig:
    """
    Настольный режим: несколько минут на CPU.
    """
    samples: int = 256
    seed: int = 0
    width: int = 32
    base_steps: int = 1500
    control_steps: int = 1500
    batch_size: int = 16
    base_learning_rate: float = 1e-3
    control_learning_rate: float = 1e-3
    caption_dropout: float = 0.1
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class ToyTrainingResult:
    base: ToyDenoiser
    control: ToyControlBranch
    base_losses: list[float]
    control_losses: list[float]
    base_checksum: str


def train_toy_end_to_end(manifest_path: PathLike, config: Optional[ToyTrainConfig] = None) -> ToyTrainingResult:
    """
    Два этапа: базовый денойзер учится на глифах с обычной MSE, затем управляющая
    ветка дообучается с потерей по маске руки при замороженной базе.

    :param manifest_path: Манифест набора глифов.
    :param config: Параметры настольного обучения.
    :raises TrainingDivergedError: Если потери стали нечисловыми.
    :raises PartitionViolationError: Если замороженная база изменилась.
    """
    config = config or ToyTrainConfig()
    torch.manual_seed(config.seed)
    schedule = config.schedule()
    samples = list(ingest_dataset(manifest_path, image_size=64, seed=config.seed))[:config.samples]
    codec = IdentityCodec()
    encoder = HashingTextEncoder()

    base = ToyDenoiser(width=config.width)
    base_trainer = ControlTrainer(
        FrozenPartition.for_base(base), schedule,
        TrainConfig(learning_rate=config.base_learning_rate, batch_size=config.batch_size,
                    total_steps=config.base_steps, seed=config.seed, loss='full',
                    caption_dropout=config.caption_dropout),
        codec, encoder)
    logger.info(f'Training toy base denoiser for {config.base_steps} steps on {len(samples)} samples')
    base_losses = base_trainer.fit(shuffled_epochs(samples, config.seed))

    control = ToyControlBranch.from_base(base)
    partition = FrozenPartition.for_control(base, control)
    base_checksum = partition.frozen_checksum()
    control_trainer = ControlTrainer(
        partition, schedule,
        TrainConfig(learning_rate=config.control_learning_rate, batch_size=config.batch_size,
                    total_steps=config.control_steps, seed=config.seed + 1, loss='inpaint',
                    caption_dropout=config.caption_dropout),
        codec, encoder)
    logger.info(f'Fine-tuning toy control branch for {config.control_steps} steps')
    control_losses = control_trainer.fit(shuffled_epochs(samples, config.seed + 1))
    base.eval()
    control.eval()
    return ToyTrainingResult(base, control, base_losses, control_losses, base_checksum)


def toy_backend(base: ToyDenoiser, control: ToyControlBranch, schedule: NoiseSchedule,
                metadata: Optional[dict] = None) -> RefinerBackend:
    base.eval()
    control.eval()
    return RefinerBackend(base, control, IdentityCodec(), HashingTextEncoder(base.text_dim), schedule,
                          localizer=GlyphLocalizer(), detector=GlyphKeypointDetector(),
                          regressor=glyph_regressor(), camera=glyph_camera(), metadata=metadata or {})


def save_toy_backend(result: ToyTrainingResult, model_dir: PathLike, config: ToyTrainConfig) -> Path:
    """
    Пишет ``base.pt``, ``control.pt`` и описание ``backend.json``.
    """
    model_dir = Path(model_dir)
    config_dict = config.to_dict()
    save_checkpoint(model_dir / 'base.pt', result.base, config_dict, {'role': 'base'})
    save_checkpoint(model_dir / 'control.pt', result.control, config_dict,
                    {'role': 'control', 'base_checksum': result.base_checksum})
    return write_json(model_dir / 'backend.json', {
        'format_version': BACKEND_FORMAT_VERSION,
        'width': result.base.width,
        'channels': result.base.channels,
        'text_dim': result.base.text_dim,
        'schedule': {'timesteps': config.timesteps, 'beta_start': config.beta_start,
                     'beta_end': config.beta_end},
        'base_checksum': result.base_checksum,
        'config': config_dict,
        'losses': {'base_final': result.base_losses[-1] if result.base_losses else None,
                   'control_final': result.control_losses[-1] if result.control_losses else None},
    })


def load_toy_backend(model_dir: PathLike) -> RefinerBackend:
    """
    Загрузчик бэкенда по умолчанию.

    :raises ModelLoadError: Если файлы отсутствуют или повреждены.
    """
    model_dir = Path(model_dir)
    try:
        description = read_json(model_dir / 'backend.json')
        if description.get('format_version') != BACKEND_FORMAT_VERSION:
            raise ValueError(f'Backend format "{description.get("format_version")}" is not supported')
        base = ToyDenoiser(description['channels'], description['width'], description['text_dim'])
        control = ToyControlBranch(description['channels'], description['width'], description['text_dim'])
        base.load_state_dict(load_checkpoint(model_dir / 'base.pt')['state_dict'])
        control.load_state_dict(load_checkpoint(model_dir / 'control.pt')['state_dict'])
        schedule = NoiseSchedule.linear(**description['schedule'])
    except (OSError, ValueError, KeyError, RuntimeError, json.JSONDecodeError) as exc:
        logger.error(f'Failed to load toy backend from {model_dir}: {exc}', exc_info=True)
        raise ModelLoadError(f'Cannot load models from "{model_dir}": {exc}') from exc
    if module_checksum(base) != description.get('base_checksum'):
        raise ModelLoadError(f'Base checksum mismatch in "{model_dir}"')
    logger.info(f'Loaded toy backend from {model_dir}')
    return toy_backend(base, control, schedule, {'model_dir': str(model_dir), **description})


def untrained_toy_backend(seed: int = 0, width: int = 32, timesteps: int = 1000) -> RefinerBackend:
    """
    Бэкенд со случайно инициализированными весами; годится для проверок конвейера.
    """
    torch.manual_seed(seed)
    base = ToyDenoiser(width=width)
    return toy_backend(base, ToyControlBranch.from_base(base), NoiseSchedule.linear(timesteps))


HELD_OUT_OFFSET = 100_000
DEMO_STRENGTHS = (0.0, 0.5, 1.0)


@dataclass
class StrengthSummary:
    strength: float
    mean_structure_error: Optional[float]
    mean_mpjpe: Optional[float]
    runs: int
    failures: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class GlyphDemoCase:
    index: int
    sample: GlyphSample
    malformed: GlyphGeometry
    image: np.ndarray
    region: np.ndarray
    sweep: Optional[PhaseSweepReport] = None

    def to_dict(self) -> dict:
        return {'index': self.index, 'prong_count': self.sample.prong_count,
                'malformed_prong_count': self.malformed.prong_count,
                'input_structure_error': structure_error(self.image, self.sample.geometry),
                'sweep': self.sweep.to_dict() if self.sweep is not None else None}


@dataclass(eq=False)
class GlyphDemoReport:
    strengths: list[float]
    summaries: list[StrengthSummary]
    boundary: Optional[float]
    cases: list[GlyphDemoCase]

    def to_dict(self) -> dict:
        return {'strengths': self.strengths, 'boundary_estimate': self.boundary,
                'summaries': [summary.to_dict() for summary in self.summaries],
                'cases': [case.to_dict() for case in self.cases]}

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['strength', 'mean_structure_error', 'mean_mpjpe', 'runs', 'failures'])
        for summary in self.summaries:
            writer.writerow([summary.strength,
                             '' if summary.mean_structure_error is None else summary.mean_structure_error,
                             '' if summary.mean_mpjpe is None else summary.mean_mpjpe,
                             summary.runs, summary.failures])
        return buffer.getvalue()


def glyph_demo_case(index: int, seed: int) -> GlyphDemoCase:
    """
    Отложенный глиф вне обучающего диапазона индексов и его «испорченная» версия
    с другим числом зубцов. Маска покрывает обе фигуры.
    """
    sample = make_glyph_sample(HELD_OUT_OFFSET + index, seed)
    malformed = malform_glyph(sample.geometry, np.random.default_rng([seed, HELD_OUT_OFFSET + index, 1]))
    return GlyphDemoCase(index, sample, malformed, malformed.render(),
                         region_mask(sample.mask | malformed.mask()))


def summarize_strengths(strengths: Sequence[float], cases: Sequence[GlyphDemoCase]) -> list[StrengthSummary]:
    summaries = []
    for strength in strengths:
        rows = [row for case in cases if case.sweep is not None
                for row in case.sweep.rows if row.strength == float(strength)]
        errors = [row.auxiliary['structure_error'] for row in rows
                  if row.error is None and 'structure_error' in row.auxiliary]
        distances = [row.mpjpe for row in rows if row.error is None and row.mpjpe is not None]
        summaries.append(StrengthSummary(
            float(strength), float(np.mean(errors)) if errors else None,
            float(np.mean(distances)) if distances else None,
            len(rows), sum(1 for row in rows if row.error is not None)))
    return summaries


def phase_boundary(summaries: Sequence[StrengthSummary]) -> Optional[float]:
    """
    Оценка границы перехода: наименьшая сила, при которой средняя ошибка структуры
    не выше середины между значениями при крайних силах.

    :return: Сила или None, если ошибка не убывает.
    """
    values = sorted((summary.strength, summary.mean_structure_error) for summary in summaries
                    if summary.mean_structure_error is not None)
    if len(values) < 2 or values[0][1] <= values[-1][1]:
        return None
    midpoint = (values[0][1] + values[-1][1]) / 2.0
    return next(strength for strength, value in values if value <= midpoint)


def run_glyph_demo(backend: RefinerBackend, strengths: Sequence[float] = DEMO_STRENGTHS, seeds: int = 32,
                   data_seed: int = 0, steps: int = 50, guidance: float = 1.0,
                   max_workers: int = 1) -> GlyphDemoReport:
    """
    Перебор сил на испорченных глифах: геометрия берётся из правильного меша,
    ошибка структуры считается против правильной фигуры.

    :param backend: Обученный настольный бэкенд.
    :param strengths: Силы управления.
    :param seeds: Число глифов (и сидов сэмплирования).
    :param data_seed: Сид генератора глифов.
    """
    if seeds < 1:
        raise ValueError(f'Demo needs at least one seed, got "{seeds}"')
    cases = []
    for index in range(seeds):
        case = glyph_demo_case(index, data_seed)
        refiner = backend.refiner(StaticMeshProvider([case.sample.geometry.mesh()], glyph_camera()))
        request = InpaintRequest(case.image, [case.region], prompt=case.sample.caption, negative_prompt='',
                                 extra_negative_prompt='', guidance=guidance, steps=steps, seed=index,
                                 mask_dilation=0)
        geometry = case.sample.geometry

        def extra_metrics(result: RectifiedResult) -> dict:
            return {'structure_error': structure_error(result.image, geometry)}

        case.sweep = refiner.phase_sweep(request, strengths, max_workers, extra_metrics=extra_metrics)
        cases.append(case)
    summaries = summarize_strengths(strengths, cases)
    boundary = phase_boundary(summaries)
    for summary in summaries:
        logger.info(f'Strength {summary.strength}: structure_error={summary.mean_structure_error} '
                    f'mpjpe={summary.mean_mpjpe} failures={summary.failures}')
    return GlyphDemoReport([float(value) for value in strengths], summaries, boundary, cases)
