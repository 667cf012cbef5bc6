"""Corruption-level scheduling.

Candidate levels theta_0 < ... < theta_{T-1} each define a distribution of
corrupted data. Pairwise distances between them (sliced 2-Wasserstein on
point clouds) become edge weights of a graph where edges longer than
epsilon are dropped; the schedule is the cheapest path from theta_0 to
theta_{T-1}. Paths only move towards stronger corruption, so the resulting
levels are monotone.

The MSE-matched baseline instead picks, for each t, the level whose
corruption MSE grows at the same relative rate as a reference VE schedule.
"""

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from softdiff.operators import OperatorFamily, Schedule, ScheduleEntry, ScheduleError

logger = logging.getLogger(__name__)


class SchedulerError(ScheduleError):
    """Distance or path-search failure."""


# ── Distances ──

def _as_cloud(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise SchedulerError(f"point clouds must be non-empty (num_points, dim) arrays, got {x.shape}")
    return x


def random_directions(dim: int, num_projections: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors as columns, shape (dim, num_projections)."""
    dirs = rng.standard_normal((dim, num_projections))
    return dirs / np.linalg.norm(dirs, axis=0, keepdims=True)


def _sorted_projections(cloud: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    return np.sort(cloud @ dirs, axis=0)


def _projected_w2(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Exact 1-D W2 per projection from sorted samples."""
    if pa.shape[0] != pb.shape[0]:
        k = max(pa.shape[0], pb.shape[0])
        q = (np.arange(k) + 0.5) / k
        pa = np.quantile(pa, q, axis=0)
        pb = np.quantile(pb, q, axis=0)
    return np.sqrt(np.mean((pa - pb) ** 2, axis=0))


def empirical_distance(a: np.ndarray, b: np.ndarray, num_projections: int,
                       rng: np.random.Generator) -> float:
    """Sliced W2: mean over random unit directions of the 1-D W2 distance."""
    a, b = _as_cloud(a), _as_cloud(b)
    if a.shape[1] != b.shape[1]:
        raise SchedulerError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dirs = random_directions(a.shape[1], num_projections, rng)
    return float(np.mean(_projected_w2(_sorted_projections(a, dirs), _sorted_projections(b, dirs))))


def distance_with_error(a: np.ndarray, b: np.ndarray, num_projections: int, repeats: int,
                        rng: np.random.Generator) -> tuple[float, float]:
    """Mean and spread of `repeats` independent sliced-W2 estimates."""
    values = [empirical_distance(a, b, num_projections, rng) for _ in range(repeats)]
    return float(np.mean(values)), float(np.std(values, ddof=1))


# ── Candidate grid and graph ──

@dataclass
class CandidateGrid:
    """Candidate levels and, once computed, their pairwise distance matrix."""
    thetas: np.ndarray
    distances: Optional[np.ndarray] = None
    sigma_min: float = 1e-3
    sigma_max: float = 0.1
    denoise_end: float = 0.2
    dataset: str = ""
    metric: str = "sliced-w2"

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        if self.thetas.ndim != 1 or self.thetas.size < 2 or np.any(np.diff(self.thetas) <= 0):
            raise SchedulerError("candidate levels must be a strictly increasing list of at least two values")

    @property
    def size(self) -> int:
        return self.thetas.size


def build_candidate_grid(data: np.ndarray, family: OperatorFamily, thetas: np.ndarray, sample_size: int,
                         num_projections: int, rng: np.random.Generator, cloud_sigma: float = 1e-3,
                         **grid_fields) -> CandidateGrid:
    """Corrupt one common draw of x_0 (and noise) at every level and measure all pairs."""
    grid = CandidateGrid(thetas=thetas, **grid_fields)
    data = np.asarray(data, dtype=np.float64)
    x0 = data[rng.choice(len(data), size=sample_size, replace=len(data) < sample_size)]
    z = rng.standard_normal(x0.shape)
    dirs = random_directions(x0.shape[1], num_projections, rng)

    projected = np.empty((grid.size, sample_size, num_projections), dtype=np.float32)
    for i, theta in enumerate(grid.thetas):
        cloud = family.apply_levels(np.full(sample_size, theta), x0) + cloud_sigma * z
        projected[i] = _sorted_projections(cloud, dirs)

    grid.distances = pairwise_distances(projected)
    logger.info(f"Candidate grid: {grid.size} levels, {sample_size} points, {num_projections} projections")
    return grid


def pairwise_distances(sorted_projections: np.ndarray) -> np.ndarray:
    count = sorted_projections.shape[0]
    dist = np.zeros((count, count))
    for i in range(count):
        pi = sorted_projections[i].astype(np.float64)
        for j in range(i + 1, count):
            d = float(np.mean(_projected_w2(pi, sorted_projections[j].astype(np.float64))))
            dist[i, j] = dist[j, i] = d
    return dist


@dataclass
class DistanceGraph:
    """weight(i, j) = distance if <= epsilon, else no edge."""
    distances: np.ndarray
    epsilon: float = float("inf")

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        d = self.distances
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 2:
            raise SchedulerError(f"distance matrix must be square with at least 2 nodes, got {d.shape}")
        if not np.allclose(d, d.T) or np.any(np.diag(d) != 0) or np.any(d < 0):
            raise SchedulerError("distance matrix must be symmetric, non-negative, with zero diagonal")

    @property
    def size(self) -> int:
        return self.distances.shape[0]

    def weight(self, i: int, j: int) -> float:
        d = self.distances[i, j]
        return float(d) if d <= self.epsilon else float("inf")


def _better(cost: float, hops: int, via: int, best: tuple[float, int], best_via: int) -> bool:
    """Lower cost wins; near-equal costs prefer fewer hops, then the smaller predecessor."""
    tol = 1e-12 * max(1.0, abs(cost), abs(best[0]))
    if cost < best[0] - tol:
        return True
    if abs(cost - best[0]) <= tol:
        return hops < best[1] or (hops == best[1] and via < best_via)
    return False


def shortest_path(graph: DistanceGraph) -> list[int]:
    """Dijkstra from node 0 to node T-1 over forward edges i -> j (j > i).

    Paths whose costs agree to a relative 1e-12 are ranked by hop count
    first and only then by the smaller predecessor index, so an equal-cost
    graph 0-1-2 with d(0,2) = d(0,1) + d(1,2) returns [0, 2] rather than the
    index-ordered [0, 1, 2].
    """
    target = graph.size - 1
    best = {0: (0.0, 0)}
    pred: dict[int, int] = {0: -1}
    heap = [(0.0, 0, 0)]
    done = set()

    while heap:
        cost, hops, u = heapq.heappop(heap)
        if u in done or (cost, hops) != best[u]:
            continue
        done.add(u)
        if u == target:
            break
        for v in range(u + 1, graph.size):
            if v in done:
                continue
            w = graph.weight(u, v)
            if not np.isfinite(w):
                continue
            cand = (cost + w, hops + 1)
            if v not in best or _better(cand[0], cand[1], u, best[v], pred[v]):
                best[v] = cand
                pred[v] = u
                heapq.heappush(heap, (cand[0], cand[1], v))

    if target not in done:
        raise SchedulerError(f"no finite path from level 0 to level {target} at epsilon={graph.epsilon:.4g}; "
                             f"try a larger epsilon")
    path = [target]
    while path[-1] != 0:
        path.append(pred[path[-1]])
    return path[::-1]


def path_cost(graph: DistanceGraph, path: list[int]) -> float:
    return float(sum(graph.weight(a, b) for a, b in zip(path[:-1], path[1:])))


def schedule_from_path(grid: CandidateGrid, path: list[int], epsilon: Optional[float] = None) -> Schedule:
    """Denoising stage on [0, denoise_end], then path levels evenly spaced in t up to 1."""
    levels = grid.thetas[path]
    entries = [ScheduleEntry(0.0, float(levels[0]), grid.sigma_min)]
    last = len(path) - 1
    for k, level in enumerate(levels):
        t = 1.0 if k == last else grid.denoise_end + (1.0 - grid.denoise_end) * k / last
        entries.append(ScheduleEntry(t, float(level), grid.sigma_max))
    return Schedule(entries, dataset=grid.dataset, metric=grid.metric,
                    epsilon=None if epsilon is None or not np.isfinite(epsilon) else float(epsilon))


@dataclass
class CalibrationResult:
    epsilon: float
    path: list[int]
    schedule: Schedule
    exact: bool

    @property
    def length(self) -> int:
        return len(self.path)


def calibrate_epsilon(grid: CandidateGrid, target_path_len: int) -> CalibrationResult:
    """Bisect epsilon over the sorted pairwise distances for a path of the target length.

    Larger epsilon admits more edges and (on the grids we build) shorter
    paths. When no epsilon hits the target exactly the closest length is
    returned with exact=False.
    """
    if grid.distances is None:
        raise SchedulerError("candidate grid has no distance matrix")
    if not 2 <= target_path_len <= grid.size:
        raise SchedulerError(f"target path length must be in [2, {grid.size}], got {target_path_len}")
    upper = grid.distances[np.triu_indices(grid.size, k=1)]
    candidates = np.unique(upper[np.isfinite(upper)])

    def solve(eps):
        try:
            return shortest_path(DistanceGraph(grid.distances, eps))
        except SchedulerError:
            return None

    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        path = solve(candidates[mid])
        if path is not None and len(path) <= target_path_len:
            hi = mid
        else:
            lo = mid + 1

    options = []
    for idx in (lo - 1, lo):
        if 0 <= idx < len(candidates):
            path = solve(candidates[idx])
            if path is not None:
                options.append((abs(len(path) - target_path_len), idx, path))
    if not options:
        raise SchedulerError("no epsilon yields a finite path")
    _, idx, path = min(options, key=lambda o: (o[0], o[1]))
    eps = float(candidates[idx])
    exact = len(path) == target_path_len
    if exact:
        logger.info(f"Calibrated epsilon={eps:.6g}: path of {len(path)} levels")
    else:
        logger.warning(f"No epsilon gives {target_path_len} levels; closest is {len(path)} at epsilon={eps:.6g}")
    return CalibrationResult(eps, path, schedule_from_path(grid, path, eps), exact)


# ── MSE-matched baseline ──

def ve_reference(sigma_min: float, sigma_max: float) -> Callable[[float], float]:
    """Geometric VE noise schedule sigma'_t."""
    return lambda t: sigma_min * (sigma_max / sigma_min) ** t


def corruption_mse(data: np.ndarray, family: OperatorFamily, level: float, sigma: float) -> float:
    """E||x_0 - x_t||^2: Monte-Carlo over data, exact over the noise."""
    data = np.asarray(data, dtype=np.float64)
    clean_part = data - family.apply_levels(np.full(len(data), level), data)
    return float(np.mean(np.sum(clean_part ** 2, axis=1)) + data.shape[1] * sigma ** 2)


@dataclass
class MseMatchResult:
    schedule: Schedule
    clamped: list[float] = field(default_factory=list)


def mse_matched_schedule(reference_sigma: Callable[[float], float], data: np.ndarray, family: OperatorFamily,
                         level_min: float, level_max: float, sigma: float, sigma_min: float,
                         num_points: int = 32, tol: float = 1e-10, dataset: str = "") -> MseMatchResult:
    """Levels whose normalized corruption MSE matches the reference VE ratio at every t.

    For VE, E||x_0 - x_t||^2 = n sigma'_t^2, so the reference ratio is
    sigma'_t^2 / sigma'_1^2.
    """
    ref_end = reference_sigma(1.0) ** 2
    mse_end = corruption_mse(data, family, level_max, sigma)
    mse_start = corruption_mse(data, family, level_min, sigma)
    result = MseMatchResult(schedule=None)
    entries = []
    for t in np.linspace(0.0, 1.0, num_points):
        target = reference_sigma(t) ** 2 / ref_end
        if t == 1.0 or target >= 1.0:
            level = level_max
        elif target <= mse_start / mse_end:
            level = level_min
            result.clamped.append(float(t))
        else:
            lo, hi = level_min, level_max
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if corruption_mse(data, family, mid, sigma) / mse_end < target:
                    lo = mid
                else:
                    hi = mid
            level = 0.5 * (lo + hi)
        entries.append(ScheduleEntry(float(t), float(level), sigma_min if t == 0.0 else sigma))
    if result.clamped:
        logger.warning(f"MSE matching clamped to the minimal level at {len(result.clamped)} t values")
    result.schedule = Schedule(entries, dataset=dataset, metric="mse-matched")
    return result
