"""
Django settings for HandRefiner project.

Проект не поднимает веб-сервер: Django используется как слой конфигурации,
валидации (forms), загрузки подключаемых бэкендов и как точка входа для
management-команд ``rectify``, ``sweep``, ``train``, ``eval`` и ``toy``.

Значения по умолчанию читаются из ``config.cfg`` (см. ``config_example.cfg``).
"""
import os
from pathlib import Path
import configparser

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('HAND_REFINER_SECRET_KEY', 'hand-refiner-cli-only-no-sessions')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rectifier.apps.RectifierConfig',
]

DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


config = configparser.ConfigParser()
config.read(os.environ.get('HAND_REFINER_CONFIG', BASE_DIR / 'config.cfg'))


def _float_list(raw: str) -> list[float]:
    return [float(item) for item in raw.split(',') if item.strip()]


HAND_REFINER_ROOT = Path(os.environ.get('HAND_REFINER_ROOT', BASE_DIR / 'artifacts'))

HAND_REFINER = {
    'RECTIFY': {
        'strength': config.getfloat('rectify', 'strength', fallback=0.55),
        'steps': config.getint('rectify', 'steps', fallback=50),
        'guidance': config.getfloat('rectify', 'guidance', fallback=7.5),
        'seed': config.getint('rectify', 'seed', fallback=0),
        'mask_dilation': config.getint('rectify', 'mask_dilation', fallback=8),
        'prompt': config.get('rectify', 'prompt', fallback='a person making a hand gesture, indoor'),
        'negative_prompt': config.get(
            'rectify', 'negative_prompt',
            fallback='long body, low-resolution, bad anatomy, extra digit, fewer digits, cropped, worst quality'),
        'extra_negative_prompt': config.get('rectify', 'extra_negative_prompt',
                                            fallback='fake 3D rendered image'),
        'final_exact_composite': config.getboolean('rectify', 'final_exact_composite', fallback=False),
    },
    'ADAPTIVE': {
        'factor': config.getfloat('adaptive', 'factor', fallback=1.15),
        'candidates': _float_list(config.get('adaptive', 'candidates', fallback='0.4,0.5,0.6,0.7,0.8,0.9')),
        'reference': config.getfloat('adaptive', 'reference', fallback=1.0),
    },
    'SCHEDULE': {
        'timesteps': config.getint('schedule', 'timesteps', fallback=1000),
        'beta_start': config.getfloat('schedule', 'beta_start', fallback=1e-4),
        'beta_end': config.getfloat('schedule', 'beta_end', fallback=0.02),
    },
    'TRAIN': {
        'learning_rate': config.getfloat('train', 'learning_rate', fallback=2e-5),
        'batch_size': config.getint('train', 'batch_size', fallback=16),
        'steps': config.getint('train', 'steps', fallback=2307),
        'weight_decay': config.getfloat('train', 'weight_decay', fallback=1e-2),
        'beta1': config.getfloat('train', 'beta1', fallback=0.9),
        'beta2': config.getfloat('train', 'beta2', fallback=0.999),
        'checksum_every': config.getint('train', 'checksum_every', fallback=100),
        'image_size': config.getint('train', 'image_size', fallback=512),
    },
    'METRICS': {
        'kid_subset_size': config.getint('metrics', 'kid_subset_size', fallback=100),
        'kid_subsets': config.getint('metrics', 'kid_subsets', fallback=100),
        'feature_dim': config.getint('metrics', 'feature_dim', fallback=64),
    },
    'BACKEND': config.get('backends', 'models', fallback='rectifier.toy_models.load_toy_backend'),
    'FEATURE_EXTRACTOR': config.get('backends', 'feature_extractor',
                                    fallback='rectifier.metrics.RandomProjectionExtractor'),
}


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'rectifier': {
            'handlers': ['console'],
            'level': os.environ.get('HAND_REFINER_LOG_LEVEL',
                                    config.get('logging', 'level', fallback='INFO')),
        },
    },
}
