import math
import unittest

import torch

from rectifier.exceptions import ScheduleRangeError, ShapeMismatchError, TimestepOrderError
from rectifier.schedule import (Conditioning, GuidanceConfig, NoiseSchedule, TextEncoder, TimestepPlan,
                                combine_negative_conditioning, ddim_step, forward_noise, guidance_compose,
                                join_prompts, make_generator)


class EchoEncoder(TextEncoder):
    name = 'echo'

    def encode(self, text: str) -> Conditioning:
        return Conditioning(text, torch.tensor([float(len(text))]), self.name)


def scalar_schedule(*values: float) -> NoiseSchedule:
    return NoiseSchedule.from_alpha_bar([1.0, *values])


class NoiseScheduleTests(unittest.TestCase):
    """
    Тесты для расписания шума и плана таймстепов.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.schedule = NoiseSchedule.linear(1000, 1e-4, 0.02)

    def test_linear_schedule_shape(self) -> None:
        """
        Тестирование линейного расписания: ᾱ_0 = 1, невозрастание, длина T + 1.
        """
        self.assertEqual(self.schedule.T, 1000)
        self.assertEqual(self.schedule.at(0), 1.0)
        self.assertTrue(bool((self.schedule.alpha_bar[1:] <= self.schedule.alpha_bar[:-1]).all()))
        self.assertGreater(self.schedule.at(1000), 0.0)

    def test_json_round_trip(self) -> None:
        """
        Тестирование сериализации в JSON-массив ᾱ.
        """
        restored = NoiseSchedule.from_json(self.schedule.to_json())
        self.assertTrue(torch.equal(restored.alpha_bar, self.schedule.alpha_bar))

    def test_invalid_schedules(self) -> None:
        """
        Тестирование отказа для неверных последовательностей ᾱ.
        """
        with self.assertRaises(ValueError):
            NoiseSchedule.from_alpha_bar([0.9, 0.5])
        with self.assertRaises(ValueError):
            NoiseSchedule.from_alpha_bar([1.0, 0.5, 0.7])
        with self.assertRaises(ValueError):
            NoiseSchedule.from_alpha_bar([1.0, 0.0])

    def test_timestep_out_of_range(self) -> None:
        with self.assertRaises(ScheduleRangeError):
            self.schedule.at(1001)
        with self.assertRaises(ScheduleRangeError):
            self.schedule.at(-1)

    def test_uniform_plan(self) -> None:
        """
        Тестирование равномерного плана: 50 шагов, τ_S = T, пары обратного процесса.
        """
        plan = TimestepPlan.uniform(self.schedule, 50)
        self.assertEqual(plan.steps, 50)
        self.assertEqual(plan.taus[0], 1)
        self.assertEqual(plan.taus[-1], 1000)
        pairs = plan.reverse_pairs()
        self.assertEqual(len(pairs), 49)
        self.assertEqual(pairs[0], (plan.taus[-1], plan.taus[-2]))
        self.assertEqual(plan.final_pair(), (1, 0))

    def test_single_step_plan(self) -> None:
        plan = TimestepPlan.uniform(self.schedule, 1)
        self.assertEqual(plan.taus, (1000,))
        self.assertEqual(plan.reverse_pairs(), [])

    def test_plan_must_increase(self) -> None:
        with self.assertRaises(ValueError):
            TimestepPlan((5, 5))
        with self.assertRaises(ScheduleRangeError):
            TimestepPlan((10, 2000)).check(self.schedule)

    def test_seed_range(self) -> None:
        """
        Тестирование сидов: 64-битные беззнаковые целые.
        """
        make_generator(2 ** 64 - 1)
        with self.assertRaises(ValueError):
            make_generator(-1)
        with self.assertRaises(ValueError):
            make_generator(2 ** 64)


class ForwardNoiseTests(unittest.TestCase):
    """
    Тесты для прямого зашумления.
    """

    def test_zero_timestep_returns_input(self) -> None:
        x0 = torch.randn(3, 4, 4, dtype=torch.float64, generator=make_generator(1))
        self.assertTrue(torch.equal(forward_noise(x0, 0, NoiseSchedule.linear(), 7), x0))

    def test_moments_match(self) -> None:
        """
        Тестирование моментов: среднее √ᾱ·x0 и дисперсия 1 − ᾱ в пределах трёх стандартных ошибок.
        """
        schedule = scalar_schedule(0.25)
        draws = 100_000
        samples = forward_noise(torch.full((draws,), 2.0, dtype=torch.float64), 1, schedule, 11)
        mean = samples.mean().item()
        variance = samples.var().item()
        self.assertLess(abs(mean - 1.0), 3 * math.sqrt(0.75 / draws))
        self.assertLess(abs(variance - 0.75), 3 * 0.75 * math.sqrt(2.0 / (draws - 1)))

    def test_zero_mean_for_zero_input(self) -> None:
        samples = forward_noise(torch.zeros(100_000, dtype=torch.float64), 1, scalar_schedule(0.5), 3)
        self.assertLess(abs(samples.mean().item()), 0.01)

    def test_same_seed_same_noise(self) -> None:
        x0 = torch.ones(2, 8, 8)
        schedule = NoiseSchedule.linear()
        self.assertTrue(torch.equal(forward_noise(x0, 500, schedule, 5), forward_noise(x0, 500, schedule, 5)))

    def test_recorded_noise_shape(self) -> None:
        with self.assertRaises(ShapeMismatchError):
            forward_noise(torch.ones(2, 2), 10, NoiseSchedule.linear(), 0, noise=torch.ones(3))


class DdimStepTests(unittest.TestCase):
    """
    Тесты для детерминированного шага DDIM.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.schedule = NoiseSchedule.linear()

    def test_exact_denoising(self) -> None:
        """
        Тестирование случая ε = 0: x_t = √ᾱ_from·x0 переходит в √ᾱ_to·x0.
        """
        x0 = torch.randn(4, 4, dtype=torch.float64, generator=make_generator(2))
        x_t = self.schedule.at(700) ** 0.5 * x0
        result = ddim_step(x_t, torch.zeros_like(x0), 700, 300, self.schedule)
        torch.testing.assert_close(result, self.schedule.at(300) ** 0.5 * x0, rtol=1e-12, atol=1e-12)

    def test_scalar_example(self) -> None:
        schedule = scalar_schedule(0.8, 0.5)
        result = ddim_step(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.2], dtype=torch.float64),
                           2, 1, schedule)
        x0_hat = (1.0 - math.sqrt(0.5) * 0.2) / math.sqrt(0.5)
        expected = math.sqrt(0.8) * x0_hat + math.sqrt(0.2) * 0.2
        self.assertAlmostEqual(result.item(), expected, places=12)

    def test_equal_alpha_is_identity(self) -> None:
        schedule = scalar_schedule(0.6, 0.6)
        x_t = torch.randn(5, dtype=torch.float64, generator=make_generator(4))
        eps = torch.randn(5, dtype=torch.float64, generator=make_generator(5))
        torch.testing.assert_close(ddim_step(x_t, eps, 2, 1, schedule), x_t, rtol=1e-12, atol=1e-12)

    def test_recorded_noise_round_trip(self) -> None:
        """
        Тестирование обратимости: шаг в t = 0 с записанным шумом восстанавливает x0.
        """
        generator = make_generator(9)
        x0 = torch.randn(3, 16, 16, dtype=torch.float64, generator=generator)
        noise = torch.randn(x0.shape, dtype=torch.float64, generator=generator)
        for t in (1, 250, 999):
            x_t = forward_noise(x0, t, self.schedule, 0, noise=noise)
            recovered = ddim_step(x_t, noise, t, 0, self.schedule)
            self.assertLess((recovered - x0).norm().item() / x0.norm().item(), 1e-5)

    def test_linearity(self) -> None:
        """
        Тестирование линейности по (x_t, ε) на 100 случайных наборах.
        """
        generator = make_generator(13)
        for _ in range(100):
            x, y, e, f = (torch.randn(6, dtype=torch.float64, generator=generator) for _ in range(4))
            a, b = torch.randn(2, dtype=torch.float64, generator=generator).tolist()
            t_from = int(torch.randint(2, 1001, (1,), generator=generator))
            t_to = int(torch.randint(0, t_from, (1,), generator=generator))
            combined = ddim_step(a * x + b * y, a * e + b * f, t_from, t_to, self.schedule)
            separate = (a * ddim_step(x, e, t_from, t_to, self.schedule)
                        + b * ddim_step(y, f, t_from, t_to, self.schedule))
            torch.testing.assert_close(combined, separate, rtol=1e-6, atol=1e-6)

    def test_order_and_shape_errors(self) -> None:
        x = torch.zeros(2)
        with self.assertRaises(TimestepOrderError):
            ddim_step(x, x, 10, 10, self.schedule)
        with self.assertRaises(ShapeMismatchError):
            ddim_step(x, torch.zeros(3), 10, 5, self.schedule)


class GuidanceTests(unittest.TestCase):
    """
    Тесты для classifier-free guidance и объединения негативных промптов.
    """

    def setUp(self) -> None:
        """
        Настройка тестового окружения.
        """
        self.encoder = EchoEncoder()
        generator = make_generator(21)
        self.eps_pos = torch.randn(2, 4, 4, dtype=torch.float64, generator=generator)
        self.eps_neg = torch.randn(2, 4, 4, dtype=torch.float64, generator=generator)

    def test_unit_weight_returns_positive(self) -> None:
        self.assertTrue(torch.equal(guidance_compose(self.eps_pos, self.eps_neg, 1.0), self.eps_pos))

    def test_zero_weight_returns_negative(self) -> None:
        self.assertTrue(torch.equal(guidance_compose(self.eps_pos, self.eps_neg, 0.0), self.eps_neg))

    def test_scalar_example(self) -> None:
        result = guidance_compose(torch.tensor([0.3], dtype=torch.float64),
                                  torch.tensor([0.1], dtype=torch.float64), 7.5)
        self.assertAlmostEqual(result.item(), 1.6, places=12)

    def test_combine_with_empty_extra_prompt(self) -> None:
        combined = combine_negative_conditioning(self.encoder.encode(''), self.encoder.encode('bad anatomy'),
                                                 self.encoder)
        self.assertEqual(combined.text, 'bad anatomy')

    def test_combine_matches_prejoined_text(self) -> None:
        """
        Тестирование объединения: результат равен кодированию заранее склеенной строки.
        """
        extra = self.encoder.encode('fake 3D rendered image')
        standard = self.encoder.encode('bad anatomy, extra digit')
        combined = combine_negative_conditioning(extra, standard, self.encoder)
        expected = self.encoder.encode(join_prompts('fake 3D rendered image', 'bad anatomy, extra digit'))
        self.assertEqual(combined.text, 'fake 3D rendered image, bad anatomy, extra digit')
        self.assertTrue(torch.equal(combined.embedding, expected.embedding))

    def test_combine_rejects_foreign_encoder(self) -> None:
        foreign = Conditioning('x', torch.zeros(1), 'other')
        with self.assertRaises(ValueError):
            combine_negative_conditioning(foreign, self.encoder.encode('y'), self.encoder)

    def test_guidance_config_negative(self) -> None:
        config = GuidanceConfig.from_prompts(self.encoder, 7.5, 'a hand', 'bad anatomy', 'fake 3D rendered image')
        self.assertEqual(config.negative(self.encoder).text, 'fake 3D rendered image, bad anatomy')
        with self.assertRaises(ValueError):
            GuidanceConfig.from_prompts(self.encoder, -1.0, '', '', '')
