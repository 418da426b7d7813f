import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from rectifier.artifacts import read_json, write_json
from rectifier.exceptions import ModelLoadError
from rectifier.glyphs import (GLYPH_SIZE, MAX_PRONGS, MIN_PRONGS, GlyphKeypointDetector, GlyphLocalizer,
                              generate_glyph_dataset, make_glyph_sample, malform_glyph, structure_error,
                              write_glyph_dataset)
from rectifier.hand_prior import DEPTH_FURTHEST, DEPTH_NEAREST
from rectifier.toy_models import (GlyphDemoReport, HashingTextEncoder, MockErrorDetector, MockSampler,
                                  StrengthSummary, ToyControlBranch, ToyDenoiser, ToyTrainConfig, ToyTrainingResult,
                                  glyph_demo_case, load_toy_backend, phase_boundary, run_glyph_demo,
                                  save_toy_backend, train_toy_end_to_end, untrained_toy_backend)
from rectifier.training import module_checksum


class GlyphTests(unittest.TestCase):
    """
    Тесты для синтетических глифов.
    """

    def test_dataset_is_reproducible(self) -> None:
        """
        Тестирование воспроизводимости: тот же сид даёт побайтно тот же набор.
        """
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            a = write_glyph_dataset(generate_glyph_dataset(6, seed=3), first)
            b = write_glyph_dataset(generate_glyph_dataset(6, seed=3), second)
            self.assertEqual(a.read_bytes(), b.read_bytes())
            for name in ('rgb/00005.png', 'depth/00005.png', 'seg/00005.png'):
                self.assertEqual((Path(first) / name).read_bytes(), (Path(second) / name).read_bytes())

    def test_sample_depends_only_on_seed_and_index(self) -> None:
        dataset = generate_glyph_dataset(4, seed=7)
        np.testing.assert_array_equal(dataset[3].rgb, make_glyph_sample(3, 7).rgb)

    def test_mask_matches_depth(self) -> None:
        for sample in generate_glyph_dataset(10, seed=1):
            np.testing.assert_array_equal(sample.mask, sample.depth.values > 0)
            surface = sample.depth.values[sample.mask]
            self.assertGreaterEqual(surface.min(), DEPTH_FURTHEST - 1e-12)
            self.assertLessEqual(surface.max(), DEPTH_NEAREST + 1e-12)
            self.assertTrue(MIN_PRONGS <= sample.prong_count <= MAX_PRONGS)
            self.assertEqual(sample.rgb.shape, (GLYPH_SIZE, GLYPH_SIZE, 1))

    def test_empty_dataset(self) -> None:
        with self.assertRaises(ValueError):
            generate_glyph_dataset(0)

    def test_malformed_glyph_changes_prong_count(self) -> None:
        sample = make_glyph_sample(0, 0)
        for draw in range(10):
            malformed = malform_glyph(sample.geometry, np.random.default_rng(draw))
            self.assertNotEqual(malformed.prong_count, sample.prong_count)
            self.assertEqual(malformed.palm, sample.geometry.palm)


class StructureErrorTests(unittest.TestCase):
    """
    Тесты для ошибки структуры 1 − IoU.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.sample = make_glyph_sample(2, 0)

    def test_target_rendering(self) -> None:
        self.assertEqual(structure_error(self.sample.rgb, self.sample.geometry), 0.0)

    def test_blank_image(self) -> None:
        blank = np.zeros_like(self.sample.rgb)
        self.assertEqual(structure_error(blank, self.sample.geometry), 1.0)

    def test_disjoint_foreground(self) -> None:
        image = np.where(self.sample.mask[:, :, None], 0, 255).astype(np.uint8)
        self.assertEqual(structure_error(image, self.sample.geometry), 1.0)

    def test_partial_overlap(self) -> None:
        kept = self.sample.mask.copy()
        kept[:, GLYPH_SIZE // 2:] = False
        image = np.where(kept[:, :, None], 200, 0).astype(np.uint8)
        expected = 1.0 - kept.sum() / self.sample.mask.sum()
        self.assertAlmostEqual(structure_error(image, self.sample.geometry), expected)


class GlyphDetectionTests(unittest.TestCase):
    """
    Тесты для локализатора и детектора глифов.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.sample = make_glyph_sample(4, 0)

    def test_localizer_covers_glyph(self) -> None:
        regions = GlyphLocalizer().localize(self.sample.rgb)
        self.assertEqual(len(regions), 1)
        self.assertTrue(bool(regions[0][self.sample.mask].all()))
        self.assertEqual(GlyphLocalizer().localize(np.zeros_like(self.sample.rgb)), [])

    def test_detector_without_hints(self) -> None:
        region = np.ones(self.sample.mask.shape, dtype=bool)
        detection = GlyphKeypointDetector().detect(self.sample.rgb, [region])[0]
        self.assertTrue(detection.found)
        self.assertGreater(detection.confidence, 0.5)
        ys, xs = np.nonzero(self.sample.mask)
        np.testing.assert_allclose(detection.keypoints.points[0], [xs.mean() + 0.5, ys.mean() + 0.5])

    def test_detector_on_empty_region(self) -> None:
        detection = GlyphKeypointDetector().detect(np.zeros_like(self.sample.rgb),
                                                   [np.ones(self.sample.mask.shape, dtype=bool)])[0]
        self.assertFalse(detection.found)


class ToyComponentTests(unittest.TestCase):
    """
    Тесты для вспомогательных настольных компонентов.
    """

    def test_hashing_encoder(self) -> None:
        encoder = HashingTextEncoder()
        first, second = encoder.encode('a Hand, glyph'), encoder.encode('a hand glyph')
        self.assertTrue(torch.equal(first.embedding, second.embedding))
        self.assertEqual(first.encoder_name, 'hashing-32')
        self.assertEqual(float(encoder.encode('').embedding.abs().sum()), 0.0)
        self.assertFalse(torch.equal(first.embedding, encoder.encode('extra digit').embedding))

    def test_mock_sampler_and_detector(self) -> None:
        sampler = MockSampler()
        detector = MockErrorDetector({0.5: 2.0, 1.0: None})
        result = sampler(None, 0.5)
        self.assertEqual(sampler.calls, [0.5])
        self.assertEqual(detector.error_for(result.image), 2.0)
        self.assertIsNone(detector.error_for(sampler(None, 1.0).image))

    def test_control_branch_starts_silent(self) -> None:
        """
        Тестирование нулевых свёрток: необученная ветка не меняет выход денойзера.
        """
        torch.manual_seed(0)
        base = ToyDenoiser(width=8)
        control = ToyControlBranch.from_base(base)
        x_t = torch.randn(1, 1, 64, 64)
        t, text = torch.tensor([10]), torch.zeros(1, 32)
        x_mask = torch.zeros(1, 2, 64, 64)
        features = control(torch.rand(1, 1, 64, 64), x_t, t, text)
        self.assertTrue(all(float(block.abs().max()) == 0.0 for block in features))
        with torch.no_grad():
            self.assertTrue(torch.equal(base(x_t, t, text, x_mask, features), base(x_t, t, text, x_mask, None)))

    def test_phase_boundary(self) -> None:
        summaries = [StrengthSummary(0.0, 0.8, None, 4, 0), StrengthSummary(0.5, 0.3, None, 4, 0),
                     StrengthSummary(1.0, 0.2, None, 4, 0)]
        self.assertEqual(phase_boundary(summaries), 0.5)
        flat = [StrengthSummary(0.0, 0.2, None, 4, 0), StrengthSummary(1.0, 0.3, None, 4, 0)]
        self.assertIsNone(phase_boundary(flat))
        self.assertIsNone(phase_boundary(summaries[:1]))

    def test_demo_report_csv(self) -> None:
        summaries = [StrengthSummary(0.0, None, 1.5, 2, 2), StrengthSummary(1.0, 0.25, None, 2, 0)]
        report = GlyphDemoReport([0.0, 1.0], summaries, None, [])
        self.assertEqual(report.to_csv(), 'strength,mean_structure_error,mean_mpjpe,runs,failures\n'
                                          '0.0,,1.5,2,2\n'
                                          '1.0,0.25,,2,0\n')

    def test_demo_case_region_covers_both_shapes(self) -> None:
        case = glyph_demo_case(0, 0)
        self.assertTrue(bool(case.region[case.sample.mask].all()))
        self.assertTrue(bool(case.region[case.malformed.mask()].all()))
        self.assertNotEqual(case.malformed.prong_count, case.sample.prong_count)


class ToyBackendTests(unittest.TestCase):
    """
    Тесты для сохранения и загрузки настольного бэкенда.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.directory = tempfile.TemporaryDirectory()
        self.model_dir = Path(self.directory.name) / 'model'
        torch.manual_seed(1)
        base = ToyDenoiser(width=8)
        self.result = ToyTrainingResult(base, ToyControlBranch.from_base(base), [0.5], [0.25],
                                        module_checksum(base))
        self.config = ToyTrainConfig(width=8, timesteps=50)
        save_toy_backend(self.result, self.model_dir, self.config)

    def tearDown(self) -> None:
        self.directory.cleanup()

    def test_round_trip(self) -> None:
        backend = load_toy_backend(self.model_dir)
        self.assertEqual(module_checksum(backend.denoiser), module_checksum(self.result.base))
        self.assertEqual(module_checksum(backend.control_branch), module_checksum(self.result.control))
        self.assertEqual(backend.schedule.T, 50)
        self.assertEqual(backend.metadata['losses'], {'base_final': 0.5, 'control_final': 0.25})

    def test_checksum_mismatch(self) -> None:
        description = read_json(self.model_dir / 'backend.json')
        description['base_checksum'] = '0' * 64
        write_json(self.model_dir / 'backend.json', description)
        with self.assertRaises(ModelLoadError):
            load_toy_backend(self.model_dir)

    def test_missing_directory(self) -> None:
        with self.assertRaises(ModelLoadError):
            load_toy_backend(Path(self.directory.name) / 'absent')

    def test_demo_report_shape(self) -> None:
        report = run_glyph_demo(untrained_toy_backend(seed=0, width=8, timesteps=50), strengths=(0.0, 1.0),
                                seeds=1, steps=2)
        data = report.to_dict()
        self.assertEqual(data['strengths'], [0.0, 1.0])
        self.assertEqual([summary['runs'] for summary in data['summaries']], [1, 1])
        self.assertEqual(len(data['cases'][0]['sweep']['rows']), 2)


@unittest.skipUnless(os.environ.get('HAND_REFINER_SLOW_TESTS'), 'slow toy training')
class ToyTrainingTrendTests(unittest.TestCase):
    """
    Тесты для сквозного настольного обучения (медленные).
    """

    def test_strength_reduces_structure_error(self) -> None:
        """
        Тестирование тренда: при полной силе ошибка структуры ниже, чем без управления.
        """
        config = ToyTrainConfig(samples=128, width=16, base_steps=600, control_steps=600, batch_size=8)
        with tempfile.TemporaryDirectory() as directory:
            manifest = write_glyph_dataset(generate_glyph_dataset(config.samples, config.seed), directory)
            result = train_toy_end_to_end(manifest, config)
            save_toy_backend(result, Path(directory) / 'model', config)
            backend = load_toy_backend(Path(directory) / 'model')
        self.assertTrue(np.isfinite(result.control_losses).all())
        report = run_glyph_demo(backend, strengths=(0.0, 1.0), seeds=8, steps=25)
        errors = {summary.strength: summary.mean_structure_error for summary in report.summaries}
        self.assertLess(errors[1.0], errors[0.0])
