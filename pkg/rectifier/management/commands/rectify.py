import logging
from pathlib import Path

from django.core.management.base import CommandParser

from rectifier.artifacts import encode_png, atomic_write_bytes, sha256_bytes, write_json
from rectifier.exceptions import NoHandsFoundError
from rectifier.forms import RectifyOptionsForm

from ._base import HandRefinerCommand

logger = logging.getLogger('rectifier.commands')


def default_output(image: str) -> Path:
    path = Path(image)
    return path.with_name(f'{path.stem}.rectified.png')


class Command(HandRefinerCommand):
    help = 'Исправляет руки на изображении: PNG и JSON sidecar с силой, сидом, MPJPE и камерой.'

    def add_command_arguments(self, parser: CommandParser) -> None:
        self.add_run_config_arguments(parser)
        parser.add_argument('--strength', type=float, default=None, help='Фиксированная сила управления.')
        parser.add_argument('--adaptive', action='store_true', default=None, help='Адаптивный выбор силы.')
        parser.add_argument('--adaptive-factor', type=float, default=None, dest='adaptive_factor')
        parser.add_argument('--adaptive-candidates', default=None, dest='adaptive_candidates',
                            help='Кандидаты силы через запятую, например "0.4,0.5,0.6".')
        parser.add_argument('--out', default=None, help='Выходной PNG; sidecar пишется рядом с расширением .json.')

    def run(self, **options) -> dict:
        self.validate(RectifyOptionsForm, {key: options.get(key) for key in ('image', 'strength', 'adaptive')})
        run_config = self.load_run_config(options)
        refiner, request, backend = self.build_request(options, run_config)
        result = refiner.rectify(request)

        out = Path(options['out']) if options.get('out') else default_output(options['image'])
        png = encode_png(result.image)
        atomic_write_bytes(out, png)
        sidecar = {
            **result.sidecar(),
            'image': str(options['image']),
            'output': str(out),
            'output_sha256': sha256_bytes(png),
            'hands': len(result.regions),
            'model_dir': backend.metadata.get('model_dir'),
            'run_config': run_config.to_dict(),
            'config_hash': run_config.config_hash(),
        }
        write_json(out.with_suffix('.json'), sidecar)
        logger.info(f'Rectified image written to {out}')
        if not result.regions:
            self.emit(sidecar)
            raise NoHandsFoundError(f'No hands found in "{options["image"]}"; the input was copied to "{out}"')
        return sidecar

    def describe(self, payload: dict) -> str:
        return (f'Wrote {payload["output"]} (strength={payload["strength"]}, '
                f'mpjpe={payload["mpjpe"]}, seed={payload["seed"]})')
