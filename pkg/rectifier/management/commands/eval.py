import logging

from django.conf import settings
from django.core.management.base import CommandParser
from django.utils.module_loading import import_string

from rectifier.artifacts import write_json
from rectifier.config import config_hash
from rectifier.exceptions import UsageError
from rectifier.forms import EvalOptionsForm
from rectifier.metrics import FeatureExtractor, evaluate_directories

from ._base import HandRefinerCommand

logger = logging.getLogger('rectifier.commands')


def load_extractor(path: str, dim: int) -> FeatureExtractor:
    """
    Извлекатель признаков по dotted path; класс принимает размерность ``dim``.
    """
    try:
        extractor_class = import_string(path)
    except ImportError as exc:
        raise UsageError(f'Feature extractor "{path}" cannot be imported: {exc}') from exc
    return extractor_class(dim=dim)


class Command(HandRefinerCommand):
    help = 'FID, KID и уверенность детектора между каталогом эталонов и каталогом генераций.'

    def add_command_arguments(self, parser: CommandParser) -> None:
        parser.add_argument('--ref-dir', default=None, dest='ref_dir')
        parser.add_argument('--gen-dir', default=None, dest='gen_dir')
        parser.add_argument('--extractor', default=None, help='Dotted path класса извлекателя признаков.')
        parser.add_argument('--report', default=None, help='Куда записать отчёт JSON.')
        parser.add_argument('--kid-subset-size', type=int, default=None, dest='kid_subset_size')
        parser.add_argument('--kid-subsets', type=int, default=None, dest='kid_subsets')
        parser.add_argument('--model-dir', default=None, dest='model_dir',
                            help='Модели с детектором для уверенности детекции.')

    def run(self, **options) -> dict:
        defaults = settings.HAND_REFINER['METRICS']
        eval_config = self.layer_options(options, 'eval_config', {
            'ref_dir': None,
            'gen_dir': None,
            'kid_subset_size': defaults['kid_subset_size'],
            'kid_subsets': defaults['kid_subsets'],
            'extractor': settings.HAND_REFINER['FEATURE_EXTRACTOR'],
            'feature_dim': defaults['feature_dim'],
            'seed': 0,
            'model_dir': None,
        }, {key: options.get(key) for key in ('ref_dir', 'gen_dir', 'kid_subset_size', 'kid_subsets', 'extractor',
                                              'seed', 'model_dir')})
        cleaned = self.validate(EvalOptionsForm, eval_config)
        extractor = load_extractor(eval_config['extractor'], cleaned['feature_dim'])
        detector = None
        if eval_config['model_dir']:
            detector = self.load_backend(self.model_dir(eval_config['model_dir'])).detector

        report = evaluate_directories(cleaned['ref_dir'], cleaned['gen_dir'], extractor, detector,
                                      cleaned['kid_subset_size'], cleaned['kid_subsets'], cleaned['seed'])
        payload = {**report.to_dict(), 'eval_config': eval_config, 'config_hash': config_hash(eval_config)}
        if options.get('report'):
            write_json(options['report'], payload)
            logger.info(f'Metric report written to {options["report"]}')
        return payload

    def describe(self, payload: dict) -> str:
        return f'FID={payload["fid"]:.4f} KID={payload["kid"]:.5f} Det.Conf={payload["det_conf"]}'
