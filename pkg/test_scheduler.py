import itertools
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from softdiff.operators import FadeFamily, ScheduleError
from softdiff.scheduler import (CandidateGrid, DistanceGraph, SchedulerError, build_candidate_grid,
                                calibrate_epsilon, corruption_mse, distance_with_error, empirical_distance,
                                mse_matched_schedule, path_cost, schedule_from_path, shortest_path, ve_reference)


def enumerate_paths(size):
    for k in range(size - 1):
        for inner in itertools.combinations(range(1, size - 1), k):
            yield [0, *inner, size - 1]


def brute_force(graph):
    costs = [path_cost(graph, p) for p in enumerate_paths(graph.size)]
    finite = [c for c in costs if np.isfinite(c)]
    return min(finite) if finite else None


def random_symmetric(rng, size, scale=1.0):
    d = rng.uniform(0.1, 1.0, (size, size)) * scale
    d = np.triu(d, 1)
    return d + d.T


class TestEmpiricalDistance(unittest.TestCase):
    def test_identical_clouds(self):
        x = np.random.default_rng(0).standard_normal((500, 3))
        self.assertEqual(empirical_distance(x, x, 32, np.random.default_rng(1)), 0.0)

    def test_centered_gaussians(self):
        rng = np.random.default_rng(2)
        a, b = 1.0, 2.5
        x, y = a * rng.standard_normal(10_000), b * rng.standard_normal(10_000)
        self.assertLessEqual(abs(empirical_distance(x, y, 8, rng) - abs(a - b)), 0.05 * abs(a - b))

    def test_one_dimensional_translation(self):
        x = np.random.default_rng(3).standard_normal(1000)
        self.assertAlmostEqual(empirical_distance(x, x + 0.7, 16, np.random.default_rng(4)), 0.7, places=10)

    def test_unequal_sizes(self):
        rng = np.random.default_rng(5)
        d = empirical_distance(rng.standard_normal((300, 2)), rng.standard_normal((700, 2)), 16, rng)
        self.assertLess(d, 0.3)

    def test_dimension_mismatch(self):
        with self.assertRaises(SchedulerError):
            empirical_distance(np.zeros((5, 2)), np.zeros((5, 3)), 4, np.random.default_rng(0))

    def test_symmetric_and_triangle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((1500, 3))
        b = 1.3 * rng.standard_normal((1500, 3)) + np.array([0.5, 0.0, -0.2])
        c = 0.7 * rng.standard_normal((1500, 3)) - 0.4
        self.assertAlmostEqual(empirical_distance(a, b, 32, np.random.default_rng(8)),
                               empirical_distance(b, a, 32, np.random.default_rng(8)), places=12)
        d_ab, s_ab = distance_with_error(a, b, 32, 5, np.random.default_rng(9))
        d_bc, s_bc = distance_with_error(b, c, 32, 5, np.random.default_rng(10))
        d_ac, s_ac = distance_with_error(a, c, 32, 5, np.random.default_rng(11))
        self.assertLessEqual(d_ac, d_ab + d_bc + 3 * max(s_ab, s_bc, s_ac))

    def test_error_estimate(self):
        rng = np.random.default_rng(6)
        x, y = rng.standard_normal((2000, 4)), 1.5 * rng.standard_normal((2000, 4))
        mean, std = distance_with_error(x, y, 16, 5, rng)
        self.assertGreater(mean, 0.0)
        self.assertGreater(std, 0.0)


class TestShortestPath(unittest.TestCase):
    def test_unbounded_epsilon_goes_direct(self):
        points = np.sort(np.random.default_rng(0).uniform(0, 10, 9))
        graph = DistanceGraph(np.abs(points[:, None] - points[None, :]))
        self.assertEqual(shortest_path(graph), [0, 8])

    def test_line_graph_matches_enumeration(self):
        d = np.array([
            [0.0, 1.0, 3.0, 4.5, 9.0],
            [1.0, 0.0, 1.0, 2.0, 6.0],
            [3.0, 1.0, 0.0, 1.0, 2.5],
            [4.5, 2.0, 1.0, 0.0, 1.0],
            [9.0, 6.0, 2.5, 1.0, 0.0],
        ])
        graph = DistanceGraph(d, epsilon=5.0)
        self.assertEqual(len(list(enumerate_paths(5))), 8)
        path = shortest_path(graph)
        self.assertAlmostEqual(path_cost(graph, path), brute_force(graph))
        self.assertEqual(path, [0, 1, 3, 4])

    def test_equal_cost_prefers_fewer_hops(self):
        d = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
        self.assertEqual(shortest_path(DistanceGraph(d, epsilon=5.0)), [0, 2])
        # only the chain survives once the direct edge is over epsilon
        self.assertEqual(shortest_path(DistanceGraph(d, epsilon=1.5)), [0, 1, 2])

    def test_random_graphs_match_enumeration(self):
        rng = np.random.default_rng(1)
        for trial in range(100):
            size = int(rng.integers(2, 13))
            graph = DistanceGraph(random_symmetric(rng, size), epsilon=float(rng.uniform(0.3, 1.2)))
            best = brute_force(graph)
            if best is None:
                with self.assertRaises(SchedulerError):
                    shortest_path(graph)
                continue
            path = shortest_path(graph)
            self.assertEqual(path[0], 0)
            self.assertEqual(path[-1], size - 1)
            self.assertTrue(all(a < b for a, b in zip(path[:-1], path[1:])))
            self.assertAlmostEqual(path_cost(graph, path), best, places=10, msg=f"trial {trial}")

    def test_disconnected_graph(self):
        d = np.abs(np.arange(6)[:, None] - np.arange(6)[None, :]).astype(float)
        with self.assertRaises(ScheduleError):
            shortest_path(DistanceGraph(d, epsilon=0.5))

    def test_rejects_asymmetric_matrix(self):
        with self.assertRaises(SchedulerError):
            DistanceGraph(np.array([[0.0, 1.0], [2.0, 0.0]]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=2, max_value=10), st.integers(min_value=0, max_value=2 ** 31))
    def test_never_worse_than_chain(self, size, seed):
        graph = DistanceGraph(random_symmetric(np.random.default_rng(seed), size))
        self.assertLessEqual(path_cost(graph, shortest_path(graph)), path_cost(graph, list(range(size))) + 1e-12)


class TestCalibration(unittest.TestCase):
    def grid(self, distances):
        size = distances.shape[0]
        return CandidateGrid(thetas=np.linspace(0.0, 3.0, size), distances=distances)

    def test_target_two_uses_direct_edge(self):
        points = np.sort(np.random.default_rng(2).uniform(0, 5, 7))
        result = calibrate_epsilon(self.grid(np.abs(points[:, None] - points[None, :])), 2)
        self.assertEqual(result.path, [0, 6])
        self.assertTrue(result.exact)

    def test_full_chain_when_skips_are_expensive(self):
        idx = np.arange(10)
        result = calibrate_epsilon(self.grid((idx[:, None] - idx[None, :]).astype(float) ** 2), 10)
        self.assertEqual(result.path, list(range(10)))
        self.assertTrue(result.exact)
        self.assertEqual(result.length, 10)

    def test_intermediate_target(self):
        idx = np.arange(13)
        result = calibrate_epsilon(self.grid(np.sqrt(np.abs(idx[:, None] - idx[None, :]).astype(float))), 4)
        self.assertTrue(result.exact)
        self.assertEqual(result.path, [0, 4, 8, 12])
        self.assertAlmostEqual(result.epsilon, 2.0)

    def test_unreachable_target_is_reported(self):
        idx = np.arange(6)
        with self.assertLogs("softdiff.scheduler", level="WARNING"):
            result = calibrate_epsilon(self.grid((idx[:, None] - idx[None, :]).astype(float) ** 2), 3)
        self.assertFalse(result.exact)
        self.assertEqual(result.length, 6)

    def test_schedule_from_path(self):
        grid = CandidateGrid(thetas=np.linspace(0.01, 6.0, 8), sigma_min=1e-3, sigma_max=0.1)
        schedule = schedule_from_path(grid, [0, 3, 5, 7], epsilon=1.5)
        np.testing.assert_allclose(schedule.ts, [0.0, 0.2, 0.2 + 0.8 / 3, 0.2 + 1.6 / 3, 1.0])
        np.testing.assert_allclose(schedule.levels, [0.01, 0.01, grid.thetas[3], grid.thetas[5], 6.0])
        self.assertEqual(schedule.sigmas[0], 1e-3)
        self.assertEqual(schedule.epsilon, 1.5)

    def test_candidate_grid_from_fade(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((2000, 2))
        grid = build_candidate_grid(data, FadeFamily((1.0, 0.5)), np.linspace(0.0, 4.0, 8), 512, 16, rng)
        d = grid.distances
        self.assertEqual(d.shape, (8, 8))
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), 0.0)
        self.assertTrue(np.all(np.diff(d[0]) > 0))
        schedule = calibrate_epsilon(grid, 4).schedule
        self.assertTrue(np.all(np.diff(schedule.levels) >= 0))


class TestMseMatched(unittest.TestCase):
    def setUp(self):
        self.data = np.random.default_rng(4).normal(0.0, 1.5, (20_000, 1))
        self.omega = 0.7
        self.family = FadeFamily((self.omega,))
        self.sigma = 0.05
        self.reference = ve_reference(0.01, 10.0)

    def test_matches_closed_form_inversion(self):
        level_min, level_max = 0.0, 8.0
        result = mse_matched_schedule(self.reference, self.data, self.family, level_min, level_max,
                                      self.sigma, 1e-3, num_points=33)
        m2 = float(np.mean(self.data ** 2))
        c_end = np.exp(-level_max * self.omega)
        mse_end = (1 - c_end) ** 2 * m2 + self.sigma ** 2
        checked = 0
        for entry in result.schedule.entries[1:-1]:
            ratio = self.reference(entry.t) ** 2 / self.reference(1.0) ** 2
            inside = (ratio * mse_end - self.sigma ** 2) / m2
            if inside <= 0:
                self.assertEqual(entry.blur_std, level_min)
                continue
            c = 1.0 - np.sqrt(inside)
            self.assertAlmostEqual(entry.blur_std, -np.log(c) / self.omega, delta=1e-3)
            checked += 1
        self.assertGreater(checked, 5)

    def test_boundaries(self):
        result = mse_matched_schedule(self.reference, self.data, self.family, 0.1, 8.0, self.sigma, 1e-3)
        self.assertEqual(result.schedule.levels[-1], 8.0)
        self.assertEqual(result.schedule.levels[0], 0.1)
        self.assertEqual(result.schedule.sigmas[0], 1e-3)
        self.assertIn(0.0, result.clamped)

    def test_corruption_mse_closed_form(self):
        m2 = float(np.mean(self.data ** 2))
        expected = (1 - np.exp(-2.0 * self.omega)) ** 2 * m2 + self.sigma ** 2
        self.assertAlmostEqual(corruption_mse(self.data, self.family, 2.0, self.sigma), expected, places=10)


if __name__ == "__main__":
    unittest.main()
