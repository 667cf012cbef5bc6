"""Verification suites behind the `verify` command.

Each check returns (ok, message) and never raises on a numerical miss; the
command turns the collected results into verify.json and the exit code.
"""

import logging
from typing import Callable, Optional

import numpy as np

from softdiff.model import Architecture, ScoreModel
from softdiff.objective import LossConfig, make_batch, ssm_terms
from softdiff.operators import BlurFamily, CorruptionProcess, FadeFamily, Schedule, ScheduleEntry
from softdiff.oracle import (DenseOperator, GaussianMixture, analytic_score, estimate_j1_minus_j2,
                             gaussian_w2, pushforward)
from softdiff.sampler import (SamplerConfig, TerminalDistribution, momentum_sample, momentum_step,
                              oracle_denoiser, ve_step)

logger = logging.getLogger(__name__)

GRADCHECK_ARCHITECTURES = (
    Architecture(data_dim=2, width=8, depth=2, num_frequencies=2, freq_min=1.0, freq_max=10.0),
    Architecture(data_dim=4, width=6, depth=1, num_frequencies=3, freq_min=1.0, freq_max=30.0),
    Architecture(data_dim=3, width=5, depth=3, num_frequencies=1, freq_min=1.0, freq_max=1.0),
)


def geometric_fade_process(dim: int, c_end: float = 0.01, sigma_min: float = 0.01,
                           sigma_max: float = 1.0) -> CorruptionProcess:
    """Fade whose slowest coordinate decays geometrically to c_end at t=1, with geometric noise."""
    base = np.log(1.0 / c_end)
    rates = base * np.linspace(1.0, 1.5, dim)
    schedule = Schedule([ScheduleEntry(0.0, 0.0, sigma_min), ScheduleEntry(1.0, 1.0, sigma_max)],
                        metric="geometric")
    return CorruptionProcess(schedule, FadeFamily(tuple(rates)))


def identity_process(dim: int, sigma_min: float = 0.01, sigma_max: float = 10.0) -> CorruptionProcess:
    """C_t = I with geometric noise: the variance-exploding special case."""
    schedule = Schedule([ScheduleEntry(0.0, 0.0, sigma_min), ScheduleEntry(1.0, 0.0, sigma_max)],
                        metric="ve")
    return CorruptionProcess(schedule, FadeFamily((0.0,) * dim))


def blur_image_process(size: int = 2, level_max: float = 1.0, sigma_min: float = 0.01,
                       sigma_max: float = 3.0, half_size: int = 1) -> CorruptionProcess:
    """Blur of size x size images whose std grows linearly while the noise grows geometrically."""
    schedule = Schedule([ScheduleEntry(0.0, 0.0, sigma_min), ScheduleEntry(1.0, level_max, sigma_max)],
                        metric="geometric")
    return CorruptionProcess(schedule, BlurFamily(size, size, half_size))


def image_benchmark_mixture(component_std: float = 0.4) -> GaussianMixture:
    """Three isotropic components over flattened 2 x 2 images."""
    means = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0], [-1.0, -1.0, 0.5, 0.5]])
    covs = np.broadcast_to(component_std ** 2 * np.eye(4), (3, 4, 4)).copy()
    return GaussianMixture(np.array([0.5, 0.3, 0.2]), means, covs)


def benchmark_mixture() -> GaussianMixture:
    return GaussianMixture(
        weights=np.array([0.5, 0.3, 0.2]),
        means=np.array([[-1.5, 0.0], [1.0, 1.0], [0.5, -1.5]]),
        covs=np.array([[[0.3, 0.1], [0.1, 0.2]], [[0.2, 0.0], [0.0, 0.2]], [[0.15, -0.05], [-0.05, 0.25]]]),
    )


def finite_difference_check(model: ScoreModel, loss_and_grad: Callable[[ScoreModel], tuple[float, np.ndarray]],
                            num_checks: int, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients."""
    _, grads = loss_and_grad(model)
    worst = 0.0
    for idx in rng.choice(model.params.size, size=min(num_checks, model.params.size), replace=False):
        saved = model.params[idx]
        model.params[idx] = saved + h
        up, _ = loss_and_grad(model)
        model.params[idx] = saved - h
        down, _ = loss_and_grad(model)
        model.params[idx] = saved
        numeric = (up - down) / (2.0 * h)
        scale = max(abs(numeric), abs(grads[idx]), 1e-6)
        worst = max(worst, abs(numeric - grads[idx]) / scale)
    return worst


class Validator:
    """Runs the correctness suites against closed-form ground truth."""

    @staticmethod
    def check_score_constancy(rng_seed: int, num_samples: int = 100_000,
                              t_values: tuple = (0.3, 0.6, 0.9)) -> tuple[bool, str]:
        """J1 - J2 must not depend on the score candidate."""
        gmm0 = benchmark_mixture()
        proc = geometric_fade_process(2, c_end=0.05, sigma_min=0.05, sigma_max=1.0)
        worst = 0.0
        for t in t_values:
            gmm_t = pushforward(gmm0, DenseOperator.from_operator(proc.operator_at(t)), proc.sigma_at(t))
            mu, cov = gmm_t.mean(), gmm_t.covariance()
            candidates = {
                "zero": lambda x: np.zeros_like(x),
                "exact": lambda x: analytic_score(gmm_t, x),
                "half-exact": lambda x: 0.5 * analytic_score(gmm_t, x),
                "gaussian-fit": lambda x: -np.linalg.solve(cov, (x - mu).T).T,
                "sine": lambda x: np.sin(x),
            }
            estimates = {name: estimate_j1_minus_j2(gmm0, proc, t, fn, num_samples, np.random.default_rng(rng_seed))
                         for name, fn in candidates.items()}
            names = list(estimates)
            for i, a in enumerate(names):
                for b in names[i + 1:]:
                    ea, eb = estimates[a], estimates[b]
                    combined = np.hypot(ea.std_error, eb.std_error)
                    ratio = abs(ea.difference - eb.difference) / combined
                    worst = max(worst, ratio)
                    if ratio > 4.0:
                        return False, (f"t={t}: J1-J2 differs between {a} ({ea.difference:.4g}) and "
                                       f"{b} ({eb.difference:.4g}) by {ratio:.1f} standard errors")
        return True, f"J1-J2 constant across candidates (worst {worst:.2f} standard errors)"

    @staticmethod
    def check_gradients(rng: np.random.Generator, num_checks: int = 50,
                        tolerance: float = 1e-4) -> tuple[bool, str]:
        """Reverse-mode SSM gradients against central differences on every test architecture."""
        cfg = LossConfig()
        worst = 0.0
        for arch in GRADCHECK_ARCHITECTURES:
            proc = geometric_fade_process(arch.data_dim, c_end=0.1, sigma_min=0.1, sigma_max=1.0)
            model = ScoreModel.init(arch, rng, zero_final=False)
            data = rng.standard_normal((64, arch.data_dim))
            batch = make_batch(data, proc, 16, cfg, rng)

            def loss_and_grad(m):
                loss, upstream, _ = ssm_terms(m, batch, proc, cfg)
                return loss, m.backward(upstream)

            err = finite_difference_check(model, loss_and_grad, num_checks, rng)
            worst = max(worst, err)
            if err > tolerance:
                return False, f"gradient check failed for {arch}: relative error {err:.2e}"
        return True, f"gradients match finite differences (worst relative error {worst:.2e})"

    @staticmethod
    def check_ve_reduction(rng: np.random.Generator, num_states: int = 1000, dim: int = 3) -> tuple[bool, str]:
        """With C_t = I the momentum step must reproduce the VE predictor bit for bit."""
        proc = identity_process(dim)
        cfg = SamplerConfig()
        weights = rng.standard_normal((dim, dim))

        def denoiser(x, t):
            return np.tanh(x @ weights) * (1.0 + t)

        for k in range(num_states):
            x = rng.standard_normal((4, dim)) * 5.0
            t = float(rng.uniform(0.05, 1.0))
            dt = float(rng.uniform(0.0, t))
            seed = int(rng.integers(0, 2 ** 32))
            ours = momentum_step(x, t, dt, denoiser, proc, np.random.default_rng(seed), cfg)
            reference = ve_step(x, t, dt, denoiser, proc, np.random.default_rng(seed))
            if not np.array_equal(ours, reference):
                return False, f"state {k}: max deviation {np.max(np.abs(ours - reference)):.3g} at t={t:.4f}"
        return True, f"momentum step equals the VE predictor on {num_states} states"

    @staticmethod
    def check_oracle_sampler(rng: np.random.Generator, num_samples: int = 10_000, num_steps: int = 64,
                             threshold: float = 0.1) -> tuple[bool, str]:
        """Momentum sampling with the exact denoiser must land on the Gaussian data law."""
        gmm0 = GaussianMixture(np.ones(1), np.array([[0.5, -0.5]]), np.array([[[1.0, 0.4], [0.4, 0.6]]]))
        proc = geometric_fade_process(2)
        p1 = TerminalDistribution(proc.operator_at(1.0).apply(gmm0.mean()), proc.sigma_at(1.0))
        samples = momentum_sample(oracle_denoiser(gmm0, proc), proc, SamplerConfig(num_steps=num_steps),
                                  p1, num_samples, rng)
        w2 = gaussian_w2(samples.mean(axis=0), np.cov(samples.T), gmm0.means[0], gmm0.covs[0])
        if w2 > threshold:
            return False, f"oracle sampler W2 {w2:.4f} exceeds {threshold}"
        return True, f"oracle sampler W2 {w2:.4f} <= {threshold}"

    @classmethod
    def run_all(cls, seed: int, rng_for: Callable[[int, str], np.random.Generator],
                suites: Optional[list[str]] = None) -> dict[str, dict]:
        """Run the named suites (all by default) and collect their results."""
        checks = {
            "score_constancy": lambda: cls.check_score_constancy(seed),
            "gradient_check": lambda: cls.check_gradients(rng_for(seed, "verify.gradients")),
            "ve_reduction": lambda: cls.check_ve_reduction(rng_for(seed, "verify.ve")),
            "oracle_sampler": lambda: cls.check_oracle_sampler(rng_for(seed, "verify.sampler")),
        }
        results = {}
        for name in suites or list(checks):
            ok, msg = checks[name]()
            log = logger.info if ok else logger.error
            log(f"{'✅' if ok else '❌'} {name}: {msg}")
            results[name] = {"ok": ok, "message": msg}
        return results
