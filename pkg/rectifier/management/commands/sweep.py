import logging
from pathlib import Path
from typing import Optional

from django.core.management.base import CommandParser

from rectifier.artifacts import atomic_write_bytes, encode_png, read_json, write_json
from rectifier.exceptions import UsageError
from rectifier.forms import RectifyOptionsForm, SweepOptionsForm
from rectifier.glyphs import GlyphGeometry, structure_error
from rectifier.pipeline import RectifiedResult

from ._base import HandRefinerCommand

logger = logging.getLogger('rectifier.commands')


def load_geometry(path: str) -> GlyphGeometry:
    """
    Геометрия глифа из JSON: сам словарь геометрии или запись манифеста с ключом ``geometry``.
    """
    try:
        data = read_json(path)
        return GlyphGeometry.from_dict(data.get('geometry', data))
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise UsageError(f'Glyph geometry "{path}" is unreadable: {exc}') from exc


class Command(HandRefinerCommand):
    help = 'Перебор сил управления с общим сидом: PNG по строкам, отчёт JSON и CSV.'

    def add_command_arguments(self, parser: CommandParser) -> None:
        self.add_run_config_arguments(parser)
        parser.add_argument('--strengths', default=None, help='Силы через запятую, например "0,0.25,0.5,0.75,1".')
        parser.add_argument('--workers', type=int, default=None, help='Число параллельных строк.')
        parser.add_argument('--out-dir', default=None, dest='out_dir')
        parser.add_argument('--geometry', default=None,
                            help='JSON геометрии глифа: добавляет structure_error в строки.')

    def run(self, **options) -> dict:
        self.validate(RectifyOptionsForm, {'image': options.get('image')})
        sweep_options = self.validate(SweepOptionsForm, {'strengths': options.get('strengths'),
                                                         'workers': options.get('workers')})
        run_config = self.load_run_config(options)
        geometry: Optional[GlyphGeometry] = load_geometry(options['geometry']) if options.get('geometry') else None
        refiner, request, _ = self.build_request(options, run_config)

        extra_metrics = None
        if geometry is not None:
            def extra_metrics(result: RectifiedResult) -> dict:
                return {'structure_error': structure_error(result.image, geometry)}

        report = refiner.phase_sweep(request, sweep_options['strengths'], sweep_options['workers'] or 1,
                                     extra_metrics=extra_metrics)
        image = Path(options['image'])
        out_dir = Path(options['out_dir']) if options.get('out_dir') else image.with_name(f'{image.stem}.sweep')
        outputs = []
        for row in report.rows:
            if row.result is None:
                outputs.append(None)
                continue
            path = out_dir / f'strength_{row.strength:.3f}.png'
            atomic_write_bytes(path, encode_png(row.result.image))
            outputs.append(str(path))

        payload = {
            **report.to_dict(),
            'image': str(image),
            'outputs': outputs,
            'run_config': run_config.to_dict(),
            'config_hash': run_config.config_hash(),
        }
        write_json(out_dir / 'report.json', payload)
        atomic_write_bytes(out_dir / 'report.csv', report.to_csv().encode('utf-8'))
        logger.info(f'Sweep over {len(report.rows)} strengths written to {out_dir}')
        payload['out_dir'] = str(out_dir)
        return payload

    def describe(self, payload: dict) -> str:
        failed = sum(1 for row in payload['rows'] if row['error'])
        return f'Swept {len(payload["rows"])} strengths ({failed} failed) into {payload["out_dir"]}'
