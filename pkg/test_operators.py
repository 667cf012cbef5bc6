import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from softdiff.operators import (BlurFamily, CorruptionProcess, DiagonalFade, FadeFamily, GaussianBlur,
                                Identity, OperatorError, Schedule, ScheduleEntry, ScheduleError, apply_operator,
                                default_schedule, gaussian_kernel_1d, operator_at, sample_perturbation)

bounded = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False, allow_infinity=False)


def images(size=8):
    return arrays(np.dtype("float64"), (size * size,), elements=bounded)


class TestOperators(unittest.TestCase):
    def test_identity_returns_input(self):
        out = Identity(3).apply(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out, [1.0, 2.0, 3.0])

    def test_tiny_blur_is_nearly_identity(self):
        x = np.random.default_rng(0).uniform(0, 1, 64)
        out = GaussianBlur(8, 8, std=0.01, half_size=3).apply(x)
        self.assertLessEqual(np.max(np.abs(out - x)), 1e-4)

    def test_blur_preserves_constant_away_from_border(self):
        c = 0.7
        out = GaussianBlur(8, 8, std=1.0, half_size=2).apply(np.full(64, c)).reshape(8, 8)
        self.assertAlmostEqual(out[4, 4], c, places=12)

    def test_separable_blur_matches_dense_convolution(self):
        op = GaussianBlur(8, 8, std=1.5, half_size=4)
        x = np.random.default_rng(1).standard_normal((3, 64))
        dense = np.stack([ndimage.convolve(img.reshape(8, 8), op.kernel_2d, mode="constant", cval=0.0).ravel()
                          for img in x])
        np.testing.assert_allclose(op.apply(x), dense, atol=1e-12)

    def test_kernel_normalized(self):
        self.assertAlmostEqual(gaussian_kernel_1d(2.0, 8).sum(), 1.0, places=14)
        np.testing.assert_array_equal(gaussian_kernel_1d(0.0, 2), [0, 0, 1, 0, 0])

    def test_adjoint_identity(self):
        rng = np.random.default_rng(2)
        for op in (GaussianBlur(8, 8, 2.0, 8), DiagonalFade(rng.uniform(0, 1, 64)), Identity(64)):
            x, y = rng.standard_normal(64), rng.standard_normal(64)
            self.assertAlmostEqual(op.apply(x) @ y, x @ op.apply_adjoint(y), places=10)

    def test_composition_order(self):
        fade = DiagonalFade(np.linspace(0, 1, 64))
        blur = GaussianBlur(8, 8, 1.0, 3)
        x = np.random.default_rng(3).standard_normal(64)
        np.testing.assert_allclose(fade.compose(blur).apply(x), fade.apply(blur.apply(x)))

    @settings(max_examples=50, deadline=None)
    @given(images(), images(), bounded, bounded, st.floats(min_value=0.0, max_value=6.0))
    def test_blur_is_linear(self, x, y, a, b, std):
        op = GaussianBlur(8, 8, std, 8)
        lhs = op.apply(a * x + b * y)
        rhs = a * op.apply(x) + b * op.apply(y)
        scale = max(1.0, np.max(np.abs(rhs)))
        self.assertLessEqual(np.max(np.abs(lhs - rhs)) / scale, 1e-10)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.dtype("float64"), (6,), elements=bounded), arrays(np.dtype("float64"), (6,), elements=bounded),
           bounded, bounded, arrays(np.dtype("float64"), (6,), elements=st.floats(min_value=0.0, max_value=1.0)))
    def test_fade_and_identity_are_linear(self, x, y, a, b, scales):
        for op in (DiagonalFade(scales), Identity(6)):
            lhs = op.apply(a * x + b * y)
            rhs = a * op.apply(x) + b * op.apply(y)
            scale = max(1.0, np.max(np.abs(rhs)))
            self.assertLessEqual(np.max(np.abs(lhs - rhs)) / scale, 1e-12)

    def test_apply_operator_batches(self):
        op = GaussianBlur(4, 4, 1.0, 2)
        x = np.random.default_rng(6).standard_normal((3, 16))
        out = apply_operator(op, x)
        self.assertEqual(out.shape, (3, 16))
        np.testing.assert_allclose(out[1], op.apply(x[1]))
        np.testing.assert_array_equal(apply_operator(Identity(2), [1, 2]), [1.0, 2.0])
        with self.assertRaises(OperatorError):
            apply_operator(op, np.zeros(15))

    def test_dimension_mismatch(self):
        with self.assertRaises(OperatorError):
            GaussianBlur(8, 8, 1.0, 3).apply(np.zeros(63))
        with self.assertRaises(OperatorError):
            Identity(2).compose(Identity(3))

    def test_invalid_parameters(self):
        with self.assertRaises(OperatorError):
            GaussianBlur(8, 8, float("nan"), 3)
        with self.assertRaises(OperatorError):
            DiagonalFade([0.5, 1.5])

    def test_blur_family_applies_per_row_levels(self):
        family = BlurFamily(8, 8, 8)
        x = np.random.default_rng(4).standard_normal((4, 64))
        levels = np.array([0.5, 2.0, 0.5, 4.0])
        out = family.apply_levels(levels, x)
        for i in range(4):
            np.testing.assert_allclose(out[i], family.operator(levels[i]).apply(x[i]))

    def test_blur_family_on_rectangular_images(self):
        family = BlurFamily(3, 5, 2)
        x = np.random.default_rng(7).standard_normal((3, 15))
        levels = np.array([0.0, 0.8, 3.0])
        out = family.apply_levels(levels, x)
        np.testing.assert_allclose(out[0], x[0], atol=1e-15)
        for i in range(3):
            np.testing.assert_allclose(out[i], family.operator(levels[i]).apply(x[i]), atol=1e-12)

    def test_fade_family_scales(self):
        family = FadeFamily((1.0, 2.0))
        np.testing.assert_allclose(family.scales(0.5), np.exp([-0.5, -1.0]))


class TestCorruptionProcess(unittest.TestCase):
    def setUp(self):
        self.schedule = Schedule([ScheduleEntry(0.0, 0.0, 0.01), ScheduleEntry(0.5, 2.0, 0.1),
                                  ScheduleEntry(1.0, 4.0, 0.1)])
        self.proc = CorruptionProcess(self.schedule, BlurFamily(8, 8, 8))

    def test_t_zero_is_identity(self):
        x = np.random.default_rng(0).standard_normal(64)
        np.testing.assert_allclose(operator_at(self.proc, 0.0).apply(x), x)

    def test_grid_point_is_exact(self):
        op = operator_at(self.proc, 0.5)
        self.assertEqual(op.std, 2.0)
        self.assertEqual(self.proc.sigma_at(0.5), 0.1)

    def test_midway_level_interpolates(self):
        self.assertAlmostEqual(operator_at(self.proc, 0.75).std, 3.0)

    def test_noise_interpolates_geometrically(self):
        self.assertAlmostEqual(self.proc.sigma_at(0.25), np.sqrt(0.01 * 0.1), places=12)

    def test_t_out_of_range(self):
        with self.assertRaises(OperatorError):
            self.proc.operator_at(1.5)

    def test_noiseless_identity_returns_input(self):
        proc = CorruptionProcess(Schedule([ScheduleEntry(0.0, 0.0, 0.0), ScheduleEntry(1.0, 0.0, 0.0)]),
                                 FadeFamily((0.0, 0.0)))
        x0 = np.array([1.5, -2.0])
        np.testing.assert_array_equal(sample_perturbation(proc, x0, 0.7, np.random.default_rng(0)), x0)

    def test_perturbation_moments(self):
        proc = CorruptionProcess(default_schedule(0.0, 3.0, 0.01, 0.5), FadeFamily((0.5, 1.0)))
        x0 = np.array([2.0, -1.0])
        t, n = 0.6, 100_000
        draws = sample_perturbation(proc, np.tile(x0, (n, 1)), t, np.random.default_rng(5))
        mean = proc.operator_at(t).apply(x0)
        sigma = proc.sigma_at(t)
        se_mean = sigma / np.sqrt(n)
        se_var = sigma ** 2 * np.sqrt(2.0 / (n - 1))
        self.assertTrue(np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * se_mean))
        self.assertTrue(np.all(np.abs(draws.var(axis=0, ddof=1) - sigma ** 2) <= 4 * se_var))

    def test_perturbation_at_t_zero_is_pure_noise(self):
        sigma_min = 0.05
        proc = CorruptionProcess(default_schedule(0.0, 3.0, sigma_min, 0.5), BlurFamily(4, 4, 2))
        x0 = np.random.default_rng(8).standard_normal(16)
        n = 20_000
        draws = sample_perturbation(proc, np.tile(x0, (n, 1)), 0.0, np.random.default_rng(10))
        sq = np.sum((draws - x0) ** 2, axis=1)
        expected = 16 * sigma_min ** 2
        # ||x - x0||^2 / sigma^2 is chi-square with 16 dof, variance 2 * 16
        se = sigma_min ** 2 * np.sqrt(2 * 16 / n)
        self.assertLessEqual(abs(sq.mean() - expected), 4 * se)

    def test_same_seed_same_draw(self):
        x0 = np.ones(64)
        a = sample_perturbation(self.proc, x0, 0.3, np.random.default_rng(9))
        b = sample_perturbation(self.proc, x0, 0.3, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestSchedule(unittest.TestCase):
    def test_rejects_decreasing_levels(self):
        with self.assertRaises(ScheduleError):
            Schedule([ScheduleEntry(0.0, 2.0, 0.1), ScheduleEntry(1.0, 1.0, 0.1)])

    def test_rejects_decreasing_sigma(self):
        with self.assertRaises(ScheduleError):
            Schedule([ScheduleEntry(0.0, 0.0, 0.5), ScheduleEntry(1.0, 1.0, 0.1)])

    def test_requires_unit_interval(self):
        with self.assertRaises(ScheduleError):
            Schedule([ScheduleEntry(0.0, 0.0, 0.1), ScheduleEntry(0.9, 1.0, 0.1)])

    @given(st.floats(min_value=0.0, max_value=2.0), st.floats(min_value=0.1, max_value=10.0),
           st.floats(min_value=1e-4, max_value=0.1), st.integers(min_value=2, max_value=64))
    def test_default_schedule_monotone(self, level_min, extra, sigma_min, num_levels):
        s = default_schedule(level_min, level_min + extra, sigma_min, 2 * sigma_min, num_levels=num_levels)
        self.assertTrue(np.all(np.diff(s.levels) >= 0))
        self.assertTrue(np.all(np.diff(s.sigmas) >= 0))
        self.assertEqual(s.ts[-1], 1.0)
        self.assertEqual(len(s.entries), num_levels + 1)

    def test_dict_round_trip_keeps_metadata(self):
        s = default_schedule(0.01, 6.0, 1e-3, 0.1, dataset="gmm")
        s.config_hash = "abc"
        restored = Schedule.from_dict(s.to_dict())
        self.assertEqual(restored.entries, s.entries)
        self.assertEqual(restored.config_hash, "abc")
        self.assertEqual(restored.dataset, "gmm")

    def test_malformed_dict(self):
        with self.assertRaises(ScheduleError):
            Schedule.from_dict({"entries": [{"t": 0.0}]})


if __name__ == "__main__":
    unittest.main()
