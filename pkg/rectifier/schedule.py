"""
Математика сэмплирования: расписание шума, прямое зашумление, детерминированный
шаг DDIM и композиция classifier-free guidance.

Модуль не зависит от конкретной сети: все операции определены над «сетками»
(тензорами формы ``(C, H, W)`` или с пакетной осью), поэтому одинаково служат
пиксельным игрушечным моделям и латентным реальным.
"""
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch

from .exceptions import (ScheduleRangeError, ShapeMismatchError,
                         SingularScheduleError, TimestepOrderError)

logger = logging.getLogger(__name__)

Seed = Union[int, torch.Generator]

UINT64_MAX = 2 ** 64 - 1


def make_generator(seed: Seed) -> torch.Generator:
    """
    Возвращает генератор torch для сида или сам генератор, если он уже передан.

    :param seed: Целое без знака (64 бита) или готовый ``torch.Generator``.
    :return: Генератор случайных чисел.
    :raises ValueError: Если сид вне диапазона uint64.
    """
    if isinstance(seed, torch.Generator):
        return seed
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= UINT64_MAX:
        raise ValueError(f'Seed "{seed}" is not a 64-bit unsigned integer')
    return torch.Generator().manual_seed(seed)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Последовательность ᾱ_t для t = 0..T.

    :param alpha_bar: Одномерный тензор длины T + 1, ᾱ[0] = 1, невозрастающий, ᾱ[T] > 0.
    """
    alpha_bar: torch.Tensor

    def __post_init__(self) -> None:
        values = torch.as_tensor(self.alpha_bar, dtype=torch.float64).flatten().clone()
        object.__setattr__(self, 'alpha_bar', values)
        if values.numel() < 2:
            raise ValueError('Schedule needs at least one diffusion step')
        if not torch.isfinite(values).all():
            raise ValueError('Schedule contains non-finite values')
        if values[0].item() != 1.0:
            raise ValueError(f'alpha_bar[0] must be exactly 1, got "{values[0].item()}"')
        if (values <= 0).any() or (values > 1).any():
            raise ValueError('alpha_bar values must lie in (0, 1]')
        if (values[1:] > values[:-1]).any():
            raise ValueError('alpha_bar must be nonincreasing in t')

    @property
    def T(self) -> int:
        return self.alpha_bar.numel() - 1

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> 'NoiseSchedule':
        """
        Строит расписание с линейными β.

        :param timesteps: Число шагов диффузии T.
        :param beta_start: β_1.
        :param beta_end: β_T.
        :return: Расписание с ᾱ_t = Π_{s ≤ t} (1 − β_s).
        """
        if timesteps < 1:
            raise ValueError(f'Timesteps "{timesteps}" must be positive')
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64),
                               torch.cumprod(1.0 - betas, dim=0)])
        return cls(alpha_bar)

    @classmethod
    def from_alpha_bar(cls, values: Sequence[float]) -> 'NoiseSchedule':
        return cls(torch.tensor(list(values), dtype=torch.float64))

    @classmethod
    def from_json(cls, text: str) -> 'NoiseSchedule':
        """
        Загружает расписание из JSON-массива значений ᾱ.
        """
        data = json.loads(text)
        if not isinstance(data, list):
            raise ValueError('Schedule JSON must be an array of alpha_bar values')
        return cls.from_alpha_bar(data)

    def to_json(self) -> str:
        return json.dumps(self.alpha_bar.tolist())

    def at(self, t: int) -> float:
        """
        Возвращает ᾱ_t.

        :raises ScheduleRangeError: Если t вне 0..T.
        """
        if not 0 <= int(t) <= self.T:
            raise ScheduleRangeError(f'Timestep "{t}" is out of range 0..{self.T}')
        return float(self.alpha_bar[int(t)])


@dataclass(frozen=True)
class TimestepPlan:
    """
    Строго возрастающая подпоследовательность τ_1 < … < τ_S из 1..T.
    """
    taus: tuple[int, ...]

    def __post_init__(self) -> None:
        taus = tuple(int(t) for t in self.taus)
        object.__setattr__(self, 'taus', taus)
        if not taus:
            raise ValueError('Timestep plan needs at least one step')
        if taus[0] < 1:
            raise ValueError(f'Timestep "{taus[0]}" must be at least 1')
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError('Timestep plan must be strictly increasing')

    @property
    def steps(self) -> int:
        return len(self.taus)

    @classmethod
    def uniform(cls, schedule: NoiseSchedule, steps: int = 50) -> 'TimestepPlan':
        """
        Равномерно расставляет ``steps`` таймстепов на отрезке 1..T.

        :param schedule: Расписание, задающее T.
        :param steps: Число шагов сэмплирования S.
        :return: План, у которого τ_S = T.
        """
        if not 1 <= steps <= schedule.T:
            raise ValueError(f'Steps "{steps}" must lie in 1..{schedule.T}')
        if steps == 1:
            return cls((schedule.T,))
        grid = torch.linspace(1, schedule.T, steps, dtype=torch.float64).round().long()
        return cls(tuple(grid.tolist()))

    def check(self, schedule: NoiseSchedule) -> None:
        if self.taus[-1] > schedule.T:
            raise ScheduleRangeError(f'Timestep "{self.taus[-1]}" is out of range 0..{schedule.T}')

    def reverse_pairs(self) -> list[tuple[int, int]]:
        """
        Пары (τ_i, τ_{i−1}) для i = S..2, т.е. маскированные шаги обратного процесса.
        """
        return [(self.taus[i], self.taus[i - 1]) for i in range(self.steps - 1, 0, -1)]

    def final_pair(self) -> tuple[int, int]:
        return self.taus[0], 0


def forward_noise(x0: torch.Tensor, t: int, schedule: NoiseSchedule, seed: Seed,
                  noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Выборка из N(√ᾱ_t·x0, (1 − ᾱ_t)·I).

    :param x0: Чистая сетка.
    :param t: Таймстеп 0..T.
    :param schedule: Расписание шума.
    :param seed: Сид или генератор; не используется, если передан ``noise``.
    :param noise: Заранее выбранный стандартный шум той же формы (для записи шума).
    :return: Зашумлённая сетка той же формы.
    """
    alpha_bar = schedule.at(t)
    if t == 0:
        return x0.clone()
    if noise is None:
        noise = torch.randn(x0.shape, generator=make_generator(seed), dtype=x0.dtype)
    elif noise.shape != x0.shape:
        raise ShapeMismatchError(f'Noise shape "{tuple(noise.shape)}" differs from "{tuple(x0.shape)}"')
    return alpha_bar ** 0.5 * x0 + (1.0 - alpha_bar) ** 0.5 * noise


def ddim_step(x_t: torch.Tensor, eps_pred: torch.Tensor, t_from: int, t_to: int,
              schedule: NoiseSchedule) -> torch.Tensor:
    """
    Детерминированный шаг DDIM из ``t_from`` в ``t_to``.

    x0̂ = (x_t − √(1 − ᾱ_from)·ε) / √ᾱ_from, результат = √ᾱ_to·x0̂ + √(1 − ᾱ_to)·ε.

    :raises TimestepOrderError: Если t_to ≥ t_from.
    :raises SingularScheduleError: Если ᾱ_from = 0.
    :raises ShapeMismatchError: Если формы не совпадают.
    """
    if t_to >= t_from:
        raise TimestepOrderError(f'Target timestep "{t_to}" must precede "{t_from}"')
    if x_t.shape != eps_pred.shape:
        raise ShapeMismatchError(f'Shapes "{tuple(x_t.shape)}" and "{tuple(eps_pred.shape)}" differ')
    alpha_from = schedule.at(t_from)
    alpha_to = schedule.at(t_to)
    if alpha_from == 0:
        raise SingularScheduleError(f'alpha_bar at "{t_from}" is zero')
    x0_hat = (x_t - (1.0 - alpha_from) ** 0.5 * eps_pred) / alpha_from ** 0.5
    return alpha_to ** 0.5 * x0_hat + (1.0 - alpha_to) ** 0.5 * eps_pred


def guidance_compose(eps_pos: torch.Tensor, eps_neg: torch.Tensor, w: float) -> torch.Tensor:
    """
    ε̃ = ε_neg + w·(ε_pos − ε_neg), где ε_neg посчитан при объединённом негативном промпте.
    """
    if eps_pos.shape != eps_neg.shape:
        raise ShapeMismatchError(f'Shapes "{tuple(eps_pos.shape)}" and "{tuple(eps_neg.shape)}" differ')
    if w == 1:
        return eps_pos.clone()
    return eps_neg + w * (eps_pos - eps_neg)


@dataclass(frozen=True, eq=False)
class Conditioning:
    text: str
    embedding: torch.Tensor
    encoder_name: str


class TextEncoder(ABC):
    """
    Абстрактный поставщик текстового кондиционирования.
    """
    name: str = 'text-encoder'

    @abstractmethod
    def encode(self, text: str) -> Conditioning:
        """
        Кодирует текст промпта.

        :param text: Текст.
        :return: Кондиционирование с исходным текстом.
        """


def join_prompts(*parts: str) -> str:
    return ', '.join(part.strip() for part in parts if part and part.strip())


def combine_negative_conditioning(c_n0: Conditioning, c_n: Conditioning,
                                  encoder: TextEncoder) -> Conditioning:
    """
    Кондиционирование объединённого негативного промпта c_n0 + c_n.

    :raises ValueError: Если кондиционирования получены разными кодировщиками.
    """
    if c_n0.encoder_name != c_n.encoder_name or c_n.encoder_name != encoder.name:
        raise ValueError(f'Conditionings come from different encoders: '
                         f'"{c_n0.encoder_name}", "{c_n.encoder_name}", "{encoder.name}"')
    return encoder.encode(join_prompts(c_n0.text, c_n.text))


@dataclass(frozen=True, eq=False)
class GuidanceConfig:
    w: float
    cond_positive: Conditioning
    cond_negative_standard: Conditioning
    cond_negative_extra: Conditioning

    def __post_init__(self) -> None:
        if self.w < 0:
            raise ValueError(f'Guidance strength "{self.w}" must be nonnegative')

    @classmethod
    def from_prompts(cls, encoder: TextEncoder, w: float, prompt: str,
                     negative_prompt: str, extra_negative_prompt: str) -> 'GuidanceConfig':
        return cls(w, encoder.encode(prompt), encoder.encode(negative_prompt),
                   encoder.encode(extra_negative_prompt))

    def negative(self, encoder: TextEncoder) -> Conditioning:
        return combine_negative_conditioning(self.cond_negative_extra, self.cond_negative_standard, encoder)


class Denoiser(ABC):
    """
    Контракт сети-предсказателя шума.
    """

    @abstractmethod
    def predict_noise(self, x_t: torch.Tensor, t: int, conditioning: Conditioning,
                      x_mask: Optional[torch.Tensor] = None,
                      control: Optional[list[torch.Tensor]] = None) -> torch.Tensor:
        """
        Предсказывает шум для зашумлённой сетки.

        :param x_t: Зашумлённая сетка ``(C, h, w)``.
        :param t: Таймстеп.
        :param conditioning: Текстовое кондиционирование.
        :param x_mask: Каналы маски и замаскированного изображения ``(1 + C, h, w)``.
        :param control: Признаки управляющей ветки по блокам энкодера.
        :return: Предсказанный шум той же формы, что ``x_t``.
        """
