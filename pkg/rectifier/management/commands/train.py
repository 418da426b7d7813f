import logging
from dataclasses import asdict
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandParser
from torch import nn

from rectifier.artifacts import sha256_bytes, write_json
from rectifier.config import config_hash
from rectifier.exceptions import ManifestError, ModelLoadError, TrainingDivergedError, UsageError
from rectifier.forms import TrainOptionsForm
from rectifier.training import (ControlTrainer, FrozenPartition, IngestStats, TrainConfig, ingest_dataset,
                                shuffled_epochs)

from ._base import HandRefinerCommand

logger = logging.getLogger('rectifier.commands')


class Command(HandRefinerCommand):
    help = 'Дообучает управляющую ветку с потерей по маске руки при замороженном денойзере.'

    def add_command_arguments(self, parser: CommandParser) -> None:
        parser.add_argument('--manifest', default=None, help='JSON-lines манифест обучающих записей.')
        parser.add_argument('--model-dir', default=None, dest='model_dir', help='Модели, которые дообучаются.')
        parser.add_argument('--steps', type=int, default=None)
        parser.add_argument('--batch-size', type=int, default=None, dest='batch_size')
        parser.add_argument('--lr', type=float, default=None, dest='learning_rate')
        parser.add_argument('--image-size', type=int, default=None, dest='image_size')
        parser.add_argument('--loss', default=None, help='"inpaint" (по маске) или "full".')
        parser.add_argument('--caption-dropout', type=float, default=None, dest='caption_dropout')
        parser.add_argument('--out', default=None, help='Путь чекпойнта; по умолчанию <model-dir>/control.finetuned.pt.')

    def run(self, **options) -> dict:
        defaults = settings.HAND_REFINER['TRAIN']
        train_options = self.layer_options(options, 'train_options', {
            'manifest': None,
            'model_dir': None,
            'steps': defaults['steps'],
            'batch_size': defaults['batch_size'],
            'learning_rate': defaults['learning_rate'],
            'image_size': defaults['image_size'],
            'loss': 'inpaint',
            'caption_dropout': 0.0,
            'seed': 0,
            'weight_decay': defaults['weight_decay'],
            'beta1': defaults['beta1'],
            'beta2': defaults['beta2'],
            'checksum_every': defaults['checksum_every'],
        }, {key: options.get(key) for key in ('manifest', 'model_dir', 'steps', 'batch_size', 'learning_rate',
                                              'image_size', 'loss', 'caption_dropout', 'seed')})
        cleaned = self.validate(TrainOptionsForm, train_options)
        seed = cleaned['seed']
        try:
            config = TrainConfig(learning_rate=cleaned['learning_rate'], batch_size=cleaned['batch_size'],
                                 total_steps=cleaned['steps'], weight_decay=train_options['weight_decay'],
                                 betas=(train_options['beta1'], train_options['beta2']), seed=seed,
                                 loss=cleaned['loss'], caption_dropout=cleaned['caption_dropout'],
                                 checksum_every=train_options['checksum_every'])
        except (TypeError, ValueError) as exc:
            raise UsageError(f'Training config is invalid: {exc}') from exc

        model_dir = self.model_dir(train_options['model_dir'])
        backend = self.load_backend(model_dir)
        if not isinstance(backend.denoiser, nn.Module) or not isinstance(backend.control_branch, nn.Module):
            raise ModelLoadError(f'Models in "{model_dir}" are not trainable torch modules')
        partition = FrozenPartition.for_control(backend.denoiser, backend.control_branch)

        stats = IngestStats()
        samples = list(ingest_dataset(cleaned['manifest'], cleaned['image_size'], seed, stats))
        if not samples:
            raise ManifestError(f'Manifest "{cleaned["manifest"]}" yielded no usable records')

        out = Path(options['out']) if options.get('out') else model_dir / 'control.finetuned.pt'
        trainer = ControlTrainer(partition, backend.schedule, config, backend.codec, backend.text_encoder)
        sidecar = {
            'manifest': str(cleaned['manifest']),
            'model_dir': str(model_dir),
            'checkpoint': str(out),
            'train_options': train_options,
            'train_config': config.to_dict(),
            'config_hash': config_hash(train_options),
            'ingest': asdict(stats),
            'frozen_checksum': trainer.expected_frozen,
        }
        try:
            loss_trace = trainer.fit(shuffled_epochs(samples, seed)) if config.total_steps else []
        except TrainingDivergedError as exc:
            write_json(out.with_suffix('.json'), {**sidecar, 'diverged': True, 'loss_trace': exc.loss_trace,
                                                  'diagnostics': exc.diagnostics})
            raise

        trainer.save_checkpoint(out, {'role': 'control', 'base_checksum': trainer.expected_frozen})
        sidecar.update({
            'diverged': False,
            'steps': trainer.step,
            'loss_trace': loss_trace,
            'trainable_checksum': partition.trainable_checksum(),
            'checkpoint_sha256': sha256_bytes(out.read_bytes()),
        })
        write_json(out.with_suffix('.json'), sidecar)
        return sidecar

    def describe(self, payload: dict) -> str:
        last = payload['loss_trace'][-1] if payload['loss_trace'] else None
        return f'Trained {payload["steps"]} steps (final loss {last}); checkpoint {payload["checkpoint"]}'
