"""
RunConfig: настройки запуска исправления.

Порядок приоритета: значения из settings (``config.cfg``) < JSON из ``--config`` <
флаги командной строки. Итоговая конфигурация целиком пишется в каждый sidecar.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Optional

from django.conf import settings

from .artifacts import PathLike, read_json
from .control import AdaptiveStrength, FixedStrength, StrengthStrategy
from .exceptions import ConfigConflictError
from .forms import RunConfigForm
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)


def config_hash(payload: Any) -> str:
    """
    SHA-256 канонического JSON (ключи отсортированы, без пробелов).
    """
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), ensure_ascii=False)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


@dataclass
class RunConfig:
    strength: Optional[float] = 0.55
    adaptive: bool = False
    adaptive_factor: float = 1.15
    adaptive_candidates: list[float] = field(default_factory=lambda: [0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    reference_strength: float = 1.0
    steps: int = 50
    seed: int = 0
    guidance: float = 7.5
    mask_dilation: int = 8
    prompt: str = ''
    negative_prompt: str = ''
    extra_negative_prompt: str = 'fake 3D rendered image'
    final_exact_composite: bool = False
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @classmethod
    def field_names(cls) -> list[str]:
        return [item.name for item in fields(cls)]

    @classmethod
    def defaults(cls) -> dict:
        """
        Значения по умолчанию из ``settings.HAND_REFINER``.
        """
        section = settings.HAND_REFINER
        rectify, adaptive, schedule = section['RECTIFY'], section['ADAPTIVE'], section['SCHEDULE']
        return {
            'strength': rectify['strength'],
            'adaptive': False,
            'adaptive_factor': adaptive['factor'],
            'adaptive_candidates': list(adaptive['candidates']),
            'reference_strength': adaptive['reference'],
            'steps': rectify['steps'],
            'seed': rectify['seed'],
            'guidance': rectify['guidance'],
            'mask_dilation': rectify['mask_dilation'],
            'prompt': rectify['prompt'],
            'negative_prompt': rectify['negative_prompt'],
            'extra_negative_prompt': rectify['extra_negative_prompt'],
            'final_exact_composite': rectify['final_exact_composite'],
            'timesteps': schedule['timesteps'],
            'beta_start': schedule['beta_start'],
            'beta_end': schedule['beta_end'],
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def strategy(self) -> StrengthStrategy:
        if self.adaptive:
            return AdaptiveStrength(tuple(self.adaptive_candidates), self.adaptive_factor, self.reference_strength)
        return FixedStrength(self.strength)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)


def read_section_file(path: PathLike, section: str, allowed: Iterable[str]) -> dict:
    """
    Читает JSON из ``--config``. Принимает и готовый sidecar: тогда берётся его раздел ``section``.

    :raises ConfigConflictError: Если файл не JSON-объект или содержит неизвестные ключи.
    """
    try:
        data = read_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigConflictError(f'Config file "{path}" is unreadable: {exc}') from exc
    if isinstance(data, dict) and isinstance(data.get(section), dict):
        data = data[section]
    if not isinstance(data, dict):
        raise ConfigConflictError(f'Config file "{path}" must contain a JSON object')
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigConflictError(f'Config file "{path}" has unknown keys: {", ".join(unknown)}')
    return data


def read_config_file(path: PathLike) -> dict:
    return read_section_file(path, 'run_config', RunConfig.field_names())


def merge_layers(defaults: dict, file_values: dict, flags: dict) -> dict:
    """
    Накладывает слои; ``None`` во флагах означает «не задано».

    Явная сила во флагах отменяет адаптивный режим из файла, и наоборот.
    """
    merged = dict(defaults)
    for layer in (file_values, {key: value for key, value in flags.items() if value is not None}):
        if layer.get('adaptive') and layer.get('strength') is not None:
            raise ConfigConflictError('Use either a fixed strength or adaptive strength, not both')
        if layer.get('adaptive'):
            merged['strength'] = None
        elif layer.get('strength') is not None:
            merged['adaptive'] = False
        merged.update(layer)
    if merged.get('adaptive'):
        merged['strength'] = None
    return merged


def load_run_config(flags: dict, config_path: Optional[PathLike] = None) -> RunConfig:
    """
    Собирает RunConfig из трёх слоёв и проверяет его формой.

    :param flags: Значения флагов по полям RunConfig; None означает «не задано».
    :param config_path: Путь к JSON из ``--config``.
    :raises ConfigConflictError: При конфликте или неверных значениях.
    """
    file_values = read_config_file(config_path) if config_path else {}
    merged = merge_layers(RunConfig.defaults(), file_values,
                          {key: value for key, value in flags.items() if key in RunConfig.field_names()})
    form = RunConfigForm(data=RunConfigForm.to_form_data(merged))
    if not form.is_valid():
        raise ConfigConflictError(f'Invalid run configuration: {form.errors.as_json()}')
    config = RunConfig(**form.cleaned_config())
    logger.debug(f'Run config {config.config_hash()[:12]}: {config.to_dict()}')
    return config


def layer_options(defaults: dict, flags: dict, config_path: Optional[PathLike], section: str) -> dict:
    """
    Те же три слоя для команд без RunConfig (обучение, оценка, настольный мир).

    :param defaults: Значения по умолчанию; их ключи задают допустимые ключи файла.
    :param flags: Значения флагов; None означает «не задано».
    :param config_path: Путь к JSON из ``--config`` или к sidecar этой команды.
    :param section: Раздел sidecar, в котором команда записывает свою конфигурацию.
    :raises ConfigConflictError: Если файл не читается или содержит неизвестные ключи.
    """
    file_values = read_section_file(config_path, section, defaults) if config_path else {}
    return merge_layers(defaults, file_values, flags)


def resolve_root_path(path: Optional[PathLike], default: Optional[PathLike] = None) -> Optional[Path]:
    """
    Относительные пути моделей и фикстур отсчитываются от ``HAND_REFINER_ROOT``.
    """
    value = path if path is not None else default
    if value is None:
        return None
    value = Path(value)
    return value if value.is_absolute() else Path(settings.HAND_REFINER_ROOT) / value
