import csv
import io
import json
import time
import unittest
from types import SimpleNamespace
from unittest.mock import MagicMock

import numpy as np
import torch

from rectifier.control import (AdaptiveStrength, FixedStrength, adaptive_strength, check_strength,
                               phase_sweep, scale_control, select_adaptive_strength)
from rectifier.exceptions import DetectionFailedError, StrengthRangeError
from rectifier.hand_prior import Keypoints2D
from rectifier.toy_models import MockErrorDetector, MockSampler

CANDIDATES = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def groundtruth() -> list[Keypoints2D]:
    return [Keypoints2D(np.arange(42, dtype=np.float64).reshape(21, 2))]


def oracle(table: dict, candidates=CANDIDATES, factor: float = 1.15) -> float:
    threshold = table[1.0] * factor
    for strength in candidates:
        if table[strength] < threshold:
            return strength
    return 1.0


class StrengthTests(unittest.TestCase):
    """
    Тесты для масштабирования признаков и стратегий силы.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        generator = torch.Generator().manual_seed(0)
        self.features = [torch.randn(4, 8, 8, dtype=torch.float64, generator=generator),
                         torch.randn(8, 4, 4, dtype=torch.float64, generator=generator)]

    def test_unit_strength_is_identity(self) -> None:
        for scaled, block in zip(scale_control(self.features, 1.0), self.features):
            self.assertTrue(torch.equal(scaled, block))

    def test_zero_strength_disables_control(self) -> None:
        for scaled in scale_control(self.features, 0.0):
            self.assertEqual(scaled.abs().max().item(), 0.0)

    def test_constant_block(self) -> None:
        scaled = scale_control([torch.ones(2, 3, 3, dtype=torch.float64)], 0.55)[0]
        torch.testing.assert_close(scaled, torch.full((2, 3, 3), 0.55, dtype=torch.float64))

    def test_homogeneity(self) -> None:
        """
        Тестирование однородности: scale(scale(f, a), b) = scale(f, a·b).
        """
        twice = scale_control(scale_control(self.features, 0.7), 0.3)
        once = scale_control(self.features, 0.7 * 0.3)
        for a, b in zip(twice, once):
            torch.testing.assert_close(a, b, rtol=1e-6, atol=1e-6)

    def test_out_of_range_strength(self) -> None:
        for value in (-0.1, 1.5):
            with self.assertRaises(StrengthRangeError):
                check_strength(value)
            with self.assertRaises(StrengthRangeError):
                scale_control(self.features, value)
        with self.assertRaises(ValueError):
            scale_control([], 0.5)

    def test_strategy_validation(self) -> None:
        self.assertEqual(FixedStrength().strength, 0.55)
        self.assertEqual(AdaptiveStrength().candidates, CANDIDATES)
        self.assertEqual(AdaptiveStrength().factor, 1.15)
        with self.assertRaises(StrengthRangeError):
            FixedStrength(1.5)
        with self.assertRaises(ValueError):
            AdaptiveStrength((0.6, 0.5))
        with self.assertRaises(ValueError):
            AdaptiveStrength(factor=1.0)


class AdaptiveStrengthTests(unittest.TestCase):
    """
    Тесты для адаптивного выбора силы с мок-сэмплером и мок-детектором.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.sampler = MockSampler()
        self.request = SimpleNamespace()

    def run_adaptive(self, table: dict) -> tuple[float, object]:
        return adaptive_strength(self.sampler, MockErrorDetector(table), self.request, groundtruth(), CANDIDATES)

    def test_selects_first_candidate_below_threshold(self) -> None:
        """
        Тестирование таблицы {1.0→10, 0.4→20, 0.5→13, 0.6→11.4}: порог 11.5, выбор 0.6.
        """
        strength, result = self.run_adaptive({1.0: 10.0, 0.4: 20.0, 0.5: 13.0, 0.6: 11.4})
        self.assertEqual(strength, 0.6)
        self.assertEqual(result.strength, 0.6)
        self.assertEqual(self.sampler.calls, [1.0, 0.4, 0.5, 0.6])
        self.assertEqual(result.metadata['reference_error'], 10.0)

    def test_falls_back_to_reference(self) -> None:
        table = {1.0: 10.0, **{value: 50.0 for value in CANDIDATES}}
        strength, result = self.run_adaptive(table)
        self.assertEqual(strength, 1.0)
        self.assertEqual(result.strength, 1.0)
        self.assertEqual(len(self.sampler.calls), len(CANDIDATES) + 1)

    def test_first_candidate_exit(self) -> None:
        strength, _ = self.run_adaptive({1.0: 10.0, 0.4: 5.0})
        self.assertEqual(strength, 0.4)
        self.assertEqual(len(self.sampler.calls), 2)

    def test_failed_measurement_is_not_below_threshold(self) -> None:
        strength, result = self.run_adaptive({1.0: 10.0, 0.4: None, 0.5: 3.0})
        self.assertEqual(strength, 0.5)
        self.assertEqual(result.metadata['adaptive_attempts'], [[1.0, 10.0], [0.4, None], [0.5, 3.0]])

    def test_detector_failing_everywhere(self) -> None:
        with self.assertRaises(DetectionFailedError) as context:
            self.run_adaptive({})
        self.assertEqual(len(context.exception.partial_report), len(CANDIDATES) + 1)

    def test_reference_failure_accepts_first_measured_candidate(self) -> None:
        strength, _ = self.run_adaptive({0.5: 30.0})
        self.assertEqual(strength, 0.5)

    def test_random_tables_match_oracle(self) -> None:
        """
        Тестирование на 1000 случайных таблиц ошибок против линейного перебора.
        """
        rng = np.random.default_rng(0)
        started = time.monotonic()
        for _ in range(1000):
            table = {strength: float(rng.uniform(1.0, 20.0)) for strength in (1.0, *CANDIDATES)}
            calls = []

            def sample(strength: float) -> float:
                calls.append(strength)
                return strength

            selection = select_adaptive_strength(sample, table.get, CANDIDATES, 1.15, 1.0)
            self.assertEqual(selection.strength, oracle(table))
            self.assertLessEqual(len(calls), len(CANDIDATES) + 1)
        self.assertLess(time.monotonic() - started, 5.0)


class PhaseSweepTests(unittest.TestCase):
    """
    Тесты для перебора сил.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.sampler = MockSampler()
        self.run = lambda strength: self.sampler(None, strength)

    def test_row_per_strength(self) -> None:
        report = phase_sweep(self.run, [0.0, 0.5, 1.0], measure=lambda result: result.strength * 2,
                             auxiliary=lambda result: {'mean': float(result.image.mean())}, seed=3)
        self.assertEqual([row.strength for row in report.rows], [0.0, 0.5, 1.0])
        self.assertEqual([row.mpjpe for row in report.rows], [0.0, 1.0, 2.0])
        self.assertEqual(report.rows[1].auxiliary, {'mean': 100.0})
        self.assertTrue(all(len(row.output_sha256) == 64 for row in report.rows))
        self.assertEqual(json.loads(report.to_json())['seed'], 3)

    def test_failed_row_is_recorded(self) -> None:
        run = MagicMock(side_effect=[self.sampler(None, 0.0), RuntimeError('boom'), self.sampler(None, 1.0)])
        report = phase_sweep(run, [0.0, 0.5, 1.0])
        self.assertIsNone(report.rows[0].error)
        self.assertIn('boom', report.rows[1].error)
        self.assertIsNone(report.rows[2].error)

    def test_concurrent_rows_keep_order(self) -> None:
        strengths = [0.0, 0.25, 0.5, 0.75, 1.0]
        serial = phase_sweep(self.run, strengths)
        parallel = phase_sweep(self.run, strengths, max_workers=3)
        self.assertEqual([row.output_sha256 for row in serial.rows], [row.output_sha256 for row in parallel.rows])

    def test_csv_table(self) -> None:
        report = phase_sweep(self.run, [0.0, 1.0], auxiliary=lambda result: {'texture_variance': 0.0})
        rows = list(csv.reader(io.StringIO(report.to_csv())))
        self.assertEqual(rows[0], ['strength', 'mpjpe', 'texture_variance', 'output_sha256', 'error'])
        self.assertEqual(len(rows), 3)

    def test_invalid_strengths(self) -> None:
        with self.assertRaises(ValueError):
            phase_sweep(self.run, [])
        with self.assertRaises(ValueError):
            phase_sweep(self.run, [0.5, 0.5])
        with self.assertRaises(StrengthRangeError):
            phase_sweep(self.run, [2.0])
