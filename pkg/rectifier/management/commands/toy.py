"""
Настольный мир глифов: генерация данных, сквозное обучение и демонстрационный перебор сил.

Артефакты по умолчанию лежат в ``$HAND_REFINER_ROOT/toy/v1/{data,model,demo}``.
"""
import logging

from django.core.management.base import CommandParser

from rectifier.artifacts import atomic_write_bytes, encode_png, sha256_bytes, write_json
from rectifier.config import config_hash, resolve_root_path
from rectifier.exceptions import UsageError
from rectifier.forms import DemoOptionsForm, GlyphDataOptionsForm
from rectifier.glyphs import generate_glyph_dataset, write_glyph_dataset
from rectifier.toy_models import (DEMO_STRENGTHS, ToyTrainConfig, run_glyph_demo, save_toy_backend,
                                  train_toy_end_to_end)

from ._base import DEFAULT_DATA_DIR, DEFAULT_MODEL_DIR, TOY_DIR, HandRefinerCommand

logger = logging.getLogger('rectifier.commands')


class Command(HandRefinerCommand):
    help = 'Настольный мир глифов: gen-data, train, demo-sweep.'

    def add_arguments(self, parser: CommandParser) -> None:
        subparsers = parser.add_subparsers(dest='action', required=True)

        gen_data = subparsers.add_parser('gen-data', help='Сгенерировать набор глифов с манифестом.')
        self.add_common_arguments(gen_data)
        gen_data.add_argument('--count', type=int, default=None, help='Число глифов (256).')
        gen_data.add_argument('--out', default=None)

        train = subparsers.add_parser('train', help='Обучить денойзер и управляющую ветку на глифах.')
        self.add_common_arguments(train)
        train.add_argument('--data', default=None, help='Каталог набора или путь к manifest.jsonl.')
        train.add_argument('--out', default=None, help='Каталог моделей.')
        train.add_argument('--samples', type=int, default=None)
        train.add_argument('--width', type=int, default=None)
        train.add_argument('--base-steps', type=int, default=None, dest='base_steps')
        train.add_argument('--control-steps', type=int, default=None, dest='control_steps')
        train.add_argument('--batch-size', type=int, default=None, dest='batch_size')
        train.add_argument('--lr', type=float, default=None, dest='learning_rate')

        demo = subparsers.add_parser('demo-sweep', help='Перебор сил на испорченных глифах.')
        self.add_common_arguments(demo)
        demo.add_argument('--model-dir', default=None, dest='model_dir')
        demo.add_argument('--strengths', default=None)
        demo.add_argument('--seeds', type=int, default=None, help='Число глифов и сидов (32).')
        demo.add_argument('--steps', type=int, default=None)
        demo.add_argument('--guidance', type=float, default=None)
        demo.add_argument('--workers', type=int, default=None)
        demo.add_argument('--out-dir', default=None, dest='out_dir')

    def run(self, **options) -> dict:
        handlers = {
            'gen-data': self.gen_data,
            'train': self.train,
            'demo-sweep': self.demo_sweep,
        }
        return handlers[options['action']](options)

    def gen_data(self, options: dict) -> dict:
        generation = self.validate(GlyphDataOptionsForm, self.layer_options(
            options, 'generation', {'count': 256, 'seed': 0},
            {'count': options.get('count'), 'seed': options.get('seed')}))
        out = resolve_root_path(options.get('out'), DEFAULT_DATA_DIR)
        manifest = write_glyph_dataset(generate_glyph_dataset(generation['count'], generation['seed']), out)
        payload = {
            'action': 'gen-data',
            'manifest': str(manifest),
            'manifest_sha256': sha256_bytes(manifest.read_bytes()),
            'generation': generation,
            'config_hash': config_hash(generation),
        }
        write_json(out / 'dataset.json', payload)
        return payload

    def train(self, options: dict) -> dict:
        data = resolve_root_path(options.get('data'), DEFAULT_DATA_DIR)
        manifest = data / 'manifest.jsonl' if data.is_dir() else data
        if not manifest.exists():
            raise UsageError(f'Manifest "{manifest}" does not exist; run "toy gen-data" first')
        flags = {key: options.get(key) for key in ('samples', 'width', 'base_steps', 'control_steps',
                                                   'batch_size', 'seed')}
        flags['base_learning_rate'] = flags['control_learning_rate'] = options.get('learning_rate')
        values = self.layer_options(options, 'train_config', ToyTrainConfig().to_dict(), flags)
        try:
            config = ToyTrainConfig(**values)
            valid = min(config.samples, config.width, config.batch_size) >= 1 and min(config.base_steps,
                                                                                      config.control_steps) >= 0
        except TypeError as exc:
            raise UsageError(f'Toy training config is invalid: {exc}') from exc
        if not valid:
            raise UsageError('Toy sizes must be positive and step counts nonnegative')

        result = train_toy_end_to_end(manifest, config)
        out = resolve_root_path(options.get('out'), DEFAULT_MODEL_DIR)
        save_toy_backend(result, out, config)
        payload = {
            'action': 'train',
            'manifest': str(manifest),
            'model_dir': str(out),
            'train_config': config.to_dict(),
            'config_hash': config_hash(config.to_dict()),
            'base_checksum': result.base_checksum,
            'base_losses': result.base_losses,
            'control_losses': result.control_losses,
        }
        write_json(out / 'training.json', payload)
        return payload

    def demo_sweep(self, options: dict) -> dict:
        defaults = {'model_dir': None, 'strengths': list(DEMO_STRENGTHS), 'seeds': 32, 'data_seed': 0,
                    'steps': 50, 'guidance': 1.0}
        flags = {'model_dir': options.get('model_dir'), 'strengths': options.get('strengths'),
                 'seeds': options.get('seeds'), 'data_seed': options.get('seed'), 'steps': options.get('steps'),
                 'guidance': options.get('guidance')}
        values = self.layer_options(options, 'demo_config', defaults, flags)
        if isinstance(values['strengths'], (list, tuple)):
            values['strengths'] = ','.join(repr(float(value)) for value in values['strengths'])
        cleaned = self.validate(DemoOptionsForm, {**values, 'workers': options.get('workers')})
        model_dir = self.model_dir(values['model_dir'])
        backend = self.load_backend(model_dir)
        demo_config = {'model_dir': str(model_dir), 'strengths': cleaned['strengths'], 'seeds': cleaned['seeds'],
                       'data_seed': cleaned['data_seed'], 'steps': cleaned['steps'], 'guidance': cleaned['guidance']}
        report = run_glyph_demo(backend, cleaned['strengths'], cleaned['seeds'], cleaned['data_seed'],
                                cleaned['steps'], cleaned['guidance'], cleaned['workers'] or 1)

        out_dir = resolve_root_path(options.get('out_dir'), TOY_DIR / 'demo')
        first = report.cases[0]
        atomic_write_bytes(out_dir / 'input.png', encode_png(first.image))
        atomic_write_bytes(out_dir / 'target.png', encode_png(first.sample.rgb))
        for row in first.sweep.rows:
            if row.result is not None:
                atomic_write_bytes(out_dir / f'strength_{row.strength:.3f}.png', encode_png(row.result.image))
        payload = {'action': 'demo-sweep', **report.to_dict(), 'demo_config': demo_config,
                   'config_hash': config_hash(demo_config)}
        write_json(out_dir / 'report.json', payload)
        atomic_write_bytes(out_dir / 'report.csv', report.to_csv().encode('utf-8'))
        payload['out_dir'] = str(out_dir)
        return payload

    def describe(self, payload: dict) -> str:
        if payload['action'] == 'gen-data':
            return f'Wrote {payload["generation"]["count"]} glyphs, manifest {payload["manifest"]}'
        if payload['action'] == 'train':
            return f'Trained toy models into {payload["model_dir"]}'
        means = ', '.join(f'{item["strength"]}: {item["mean_structure_error"]}' for item in payload['summaries'])
        return f'Structure error by strength: {means}; boundary estimate {payload["boundary_estimate"]}'
