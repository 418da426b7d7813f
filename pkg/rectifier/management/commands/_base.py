"""
Общая часть management-команд: флаги ``--config``, ``--json``, ``--seed``,
перевод исключений приложения в коды возврата и загрузка бэкенда из настроек.
"""
import logging
from pathlib import Path
from typing import Any, Optional

import torch
from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError, CommandParser
from django.forms import Form
from django.utils.module_loading import import_string

from rectifier.artifacts import PathLike, dumps_json, read_image, read_mask
from rectifier.config import RunConfig, layer_options, load_run_config, resolve_root_path
from rectifier.exceptions import (EXIT_FAILURE, EXIT_USAGE, ConfigConflictError, HandRefinerError,
                                  ModelLoadError, UsageError)
from rectifier.hand_prior import FixtureMeshProvider
from rectifier.pipeline import HandRefiner, InpaintRequest, RefinerBackend

logger = logging.getLogger('rectifier.commands')

TOY_DIR = Path('toy') / 'v1'
DEFAULT_DATA_DIR = TOY_DIR / 'data'
DEFAULT_MODEL_DIR = TOY_DIR / 'model'


def form_errors(form: Form) -> str:
    messages = []
    for name, errors in form.errors.items():
        prefix = '' if name == '__all__' else f'{name}: '
        messages.extend(f'{prefix}{error}' for error in errors)
    return '; '.join(messages)


class HandRefinerCommand(BaseCommand):
    """
    Базовая команда. Наследники реализуют ``add_command_arguments`` и ``run``;
    ``run`` возвращает словарь, который печатается при ``--json``.
    """

    def add_arguments(self, parser: CommandParser) -> None:
        self.add_common_arguments(parser)
        self.add_command_arguments(parser)

    @staticmethod
    def add_common_arguments(parser: CommandParser) -> None:
        parser.add_argument('--config', default=None, help='JSON с настройками запуска (или sidecar).')
        parser.add_argument('--json', action='store_true', dest='json_output',
                            help='Печатать результат в stdout как JSON.')
        parser.add_argument('--seed', type=int, default=None, help='Сид (64-битное беззнаковое).')

    def add_command_arguments(self, parser: CommandParser) -> None:
        pass

    def run(self, **options) -> dict:
        raise NotImplementedError

    def describe(self, payload: dict) -> str:
        return 'Done'

    def handle(self, *args, **options) -> None:
        self.json_output = options.get('json_output', False)
        try:
            payload = self.run(**options)
        except CommandError:
            raise
        except HandRefinerError as exc:
            logger.error(f'{type(exc).__name__}: {exc}')
            raise CommandError(str(exc), returncode=exc.exit_code) from exc
        except ValidationError as exc:
            raise CommandError('; '.join(exc.messages), returncode=EXIT_USAGE) from exc
        except Exception as exc:
            logger.error(f'Unexpected error: {str(exc)}', exc_info=True)
            raise CommandError(f'Unexpected error: {exc}', returncode=EXIT_FAILURE) from exc
        self.emit(payload)

    def emit(self, payload: dict) -> None:
        if self.json_output:
            self.stdout.write(dumps_json(payload), ending='')
        else:
            self.stdout.write(self.style.SUCCESS(self.describe(payload)))

    @staticmethod
    def validate(form_class: type[Form], data: dict) -> dict:
        """
        Проверяет флаги формой.

        :raises ConfigConflictError: Если флаги противоречат друг другу.
        :raises UsageError: При прочих ошибках флагов.
        """
        form = form_class(data={key: value for key, value in data.items() if value is not None})
        if form.is_valid():
            return form.cleaned_data
        if getattr(form, 'is_conflict', False):
            raise ConfigConflictError(form_errors(form))
        raise UsageError(form_errors(form))

    @staticmethod
    def model_dir(path: Optional[PathLike]) -> Path:
        return resolve_root_path(path, DEFAULT_MODEL_DIR)

    @staticmethod
    def load_backend(model_dir: PathLike) -> RefinerBackend:
        """
        Загружает модели загрузчиком из ``HAND_REFINER['BACKEND']``.

        :raises ModelLoadError: Если загрузчик не импортируется или не может прочитать модели.
        """
        loader_path = settings.HAND_REFINER['BACKEND']
        try:
            loader = import_string(loader_path)
        except ImportError as exc:
            raise ModelLoadError(f'Backend loader "{loader_path}" cannot be imported: {exc}') from exc
        return loader(model_dir)

    @staticmethod
    def check_schedule(run_config: RunConfig, backend: RefinerBackend) -> None:
        requested = run_config.schedule().alpha_bar
        trained = backend.schedule.alpha_bar
        if requested.shape != trained.shape or not torch.allclose(requested, trained, rtol=0.0, atol=1e-12):
            raise ConfigConflictError(f'Schedule "T={run_config.timesteps}, beta={run_config.beta_start}..'
                                      f'{run_config.beta_end}" does not match the model schedule')

    @staticmethod
    def config_flags(options: dict) -> dict[str, Any]:
        """
        Флаги, относящиеся к RunConfig; ``None`` означает «не задано».
        """
        names = {
            'strength': 'strength',
            'adaptive': 'adaptive',
            'adaptive_factor': 'adaptive_factor',
            'adaptive_candidates': 'adaptive_candidates',
            'steps': 'steps',
            'seed': 'seed',
            'guidance': 'guidance',
            'mask_dilation': 'mask_dilation',
            'prompt': 'prompt',
            'neg_prompt': 'negative_prompt',
            'extra_neg_prompt': 'extra_negative_prompt',
            'final_exact_composite': 'final_exact_composite',
        }
        return {field: options.get(flag) for flag, field in names.items()}

    @staticmethod
    def add_run_config_arguments(parser: CommandParser) -> None:
        parser.add_argument('--prompt', default=None)
        parser.add_argument('--neg-prompt', default=None, dest='neg_prompt')
        parser.add_argument('--extra-neg-prompt', default=None, dest='extra_neg_prompt')
        parser.add_argument('--steps', type=int, default=None, help='Число шагов DDIM.')
        parser.add_argument('--guidance', type=float, default=None, help='Сила classifier-free guidance.')
        parser.add_argument('--mask-dilation', type=int, default=None, dest='mask_dilation')
        parser.add_argument('--final-exact-composite', action='store_true', default=None,
                            dest='final_exact_composite', help='Вклеить исходные пиксели вне маски.')
        parser.add_argument('--image', default=None, help='Входной PNG.')
        parser.add_argument('--mask', action='append', default=[], help='PNG-маска руки (можно несколько).')
        parser.add_argument('--mesh', action='append', default=[], help='Файл меша (i-й для i-й руки).')
        parser.add_argument('--model-dir', default=None, dest='model_dir')

    def load_run_config(self, options: dict) -> RunConfig:
        return load_run_config(self.config_flags(options), options.get('config'))

    @staticmethod
    def layer_options(options: dict, section: str, defaults: dict, flags: dict) -> dict:
        """
        Настройки команды: значения по умолчанию < ``--config`` < флаги.
        """
        return layer_options(defaults, flags, options.get('config'), section)

    def build_request(self, options: dict,
                      run_config: RunConfig) -> tuple[HandRefiner, InpaintRequest, RefinerBackend]:
        """
        Читает изображение, маски и меши, загружает модели и собирает запрос.

        :raises UsageError: Если входные файлы не читаются.
        :raises ModelLoadError: Если модели не загружаются.
        """
        try:
            image = read_image(options['image'])
            masks = [read_mask(path) for path in options['mask']]
        except OSError as exc:
            raise UsageError(f'Input is unreadable: {exc}') from exc
        backend = self.load_backend(self.model_dir(options.get('model_dir')))
        self.check_schedule(run_config, backend)
        provider = None
        if options['mesh']:
            provider = FixtureMeshProvider([resolve_root_path(path) for path in options['mesh']], backend.camera)
        request = InpaintRequest(
            image, masks, prompt=run_config.prompt, negative_prompt=run_config.negative_prompt,
            extra_negative_prompt=run_config.extra_negative_prompt, guidance=run_config.guidance,
            strategy=run_config.strategy(), steps=run_config.steps, seed=run_config.seed,
            final_exact_composite=run_config.final_exact_composite, mask_dilation=run_config.mask_dilation)
        return backend.refiner(provider), request, backend
