"""Reverse-time samplers for x_t = C_t x_0 + sigma_t z.

Both samplers walk a uniform grid from t=1 to t=0 and call the denoiser
(x_t, t) -> x0_hat once per step.

The momentum step's noise estimate is divided by sigma_t^2 in the default
"normalized" mode, which turns it into the score estimate and makes the step
coincide with the VE predictor when C_t = I. "literal" mode leaves it as
y_t - x_t.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from softdiff.operators import CorruptionProcess
from softdiff.oracle import DenseOperator, GaussianMixture, posterior_mean

logger = logging.getLogger(__name__)

Denoiser = Callable[[np.ndarray, float], np.ndarray]


class SamplerError(ValueError):
    """Invalid sampler configuration or an ill-posed reverse step."""


class Normalization(str, Enum):
    NORMALIZED = "normalized"
    LITERAL = "literal"


@dataclass(frozen=True)
class SamplerConfig:
    """Uniform reverse grid with dt = 1 / num_steps.

    num_steps = 1 is accepted even though multi-step grids are the normal
    case: it is the defined one-shot edge case, x_0 = C_0 x0_hat(x_1) + sigma_0 z
    for the naive sampler, with exactly one denoiser call. Zero or negative
    step counts raise SamplerError.
    """
    num_steps: int = 64
    normalization: Normalization = Normalization.NORMALIZED
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        if self.num_steps < 1:
            raise SamplerError(f"num_steps must be positive, got {self.num_steps}")

    @property
    def dt(self) -> float:
        return 1.0 / self.num_steps

    def time_grid(self) -> np.ndarray:
        return np.linspace(1.0, 0.0, self.num_steps + 1)


@dataclass(frozen=True, eq=False)
class TerminalDistribution:
    """p_1 = N(m1, sigma_1^2 I), m1 the data mean pushed through C_1."""
    mean: np.ndarray
    sigma: float

    @classmethod
    def from_data(cls, data: np.ndarray, proc: CorruptionProcess) -> "TerminalDistribution":
        m1 = proc.operator_at(1.0).apply(np.asarray(data, dtype=np.float64).mean(axis=0))
        return cls(m1, proc.sigma_at(1.0))

    def sample(self, num: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.sigma * rng.standard_normal((num, self.mean.size))


def model_denoiser(model) -> Denoiser:
    """x0_hat = phi_theta(x_t | t) + x_t."""
    def denoise(x, t):
        return model.forward(x, t) + x
    return denoise


def oracle_denoiser(gmm0: GaussianMixture, proc: CorruptionProcess) -> Denoiser:
    """x0_hat = E[x_0 | x_t], exact for mixture data."""
    def denoise(x, t):
        C = DenseOperator.from_operator(proc.operator_at(t))
        return posterior_mean(gmm0, C, proc.sigma_at(t), x)
    return denoise


def as_denoiser(denoiser_or_model: Union[Denoiser, object]) -> Denoiser:
    if hasattr(denoiser_or_model, "forward"):
        return model_denoiser(denoiser_or_model)
    return denoiser_or_model


# ── Naive sampler ──

def naive_step(x_t: np.ndarray, t: float, t_next: float, denoiser: Denoiser,
               proc: CorruptionProcess, rng: np.random.Generator) -> np.ndarray:
    """Predict x_0, then corrupt it afresh to level t_next."""
    x0_hat = denoiser(x_t, t)
    noise = rng.standard_normal(x_t.shape)
    return proc.operator_at(t_next).apply(x0_hat) + proc.sigma_at(t_next) * noise


def naive_sample(model, proc: CorruptionProcess, cfg: SamplerConfig, p1: TerminalDistribution,
                 num_samples: int = 1, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    denoiser = as_denoiser(model)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = p1.sample(num_samples, rng)
    ts = cfg.time_grid()
    for k in range(cfg.num_steps):
        x = naive_step(x, ts[k], ts[k + 1], denoiser, proc, rng)
    logger.debug(f"Naive sampler finished: {num_samples} samples, {cfg.num_steps} NFE")
    return x


# ── Momentum sampler ──

def _momentum_update(x_t: np.ndarray, t: float, t_next: float, denoiser: Denoiser,
                     proc: CorruptionProcess, rng: np.random.Generator,
                     normalization: Normalization) -> np.ndarray:
    sigma, sigma_next = proc.sigma_at(t), proc.sigma_at(t_next)
    if sigma < sigma_next:
        raise SamplerError(f"noise decreases across the step: sigma({t})={sigma} < sigma({t_next})={sigma_next}")
    s2, sn2 = sigma ** 2, sigma_next ** 2

    x0_hat = denoiser(x_t, t)
    y_t = proc.operator_at(t).apply(x0_hat)
    eta = rng.standard_normal(x_t.shape)
    eps = y_t - x_t
    if normalization is Normalization.NORMALIZED and s2 > 0:
        eps = eps / s2
    z = x_t - (sn2 - s2) * eps + np.sqrt(s2 - sn2) * eta
    y_next = proc.operator_at(t_next).apply(x0_hat)
    return z + (y_next - y_t)


def momentum_step(x_t: np.ndarray, t: float, dt: float, denoiser, proc: CorruptionProcess,
                  rng: np.random.Generator, cfg: SamplerConfig) -> np.ndarray:
    """One step of the momentum sampler from t to t - dt."""
    t_next = t - dt
    if t_next < -1e-12:
        raise SamplerError(f"step overshoots t=0: t={t}, dt={dt}")
    return _momentum_update(np.asarray(x_t, dtype=np.float64), t, max(t_next, 0.0),
                            as_denoiser(denoiser), proc, rng, cfg.normalization)


def momentum_sample(model, proc: CorruptionProcess, cfg: SamplerConfig, p1: TerminalDistribution,
                    num_samples: int = 1, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    denoiser = as_denoiser(model)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = p1.sample(num_samples, rng)
    ts = cfg.time_grid()
    for k in range(cfg.num_steps):
        x = _momentum_update(x, ts[k], ts[k + 1], denoiser, proc, rng, cfg.normalization)
    logger.debug(f"Momentum sampler finished: {num_samples} samples, {cfg.num_steps} NFE")
    return x


def ve_step(x_t: np.ndarray, t: float, dt: float, denoiser: Denoiser, proc: CorruptionProcess,
            rng: np.random.Generator) -> np.ndarray:
    """Reverse-diffusion predictor of the variance-exploding SDE (no blur)."""
    t_next = max(t - dt, 0.0)
    s2, sn2 = proc.sigma_at(t) ** 2, proc.sigma_at(t_next) ** 2
    x_t = np.asarray(x_t, dtype=np.float64)
    score = (denoiser(x_t, t) - x_t) / s2
    eta = rng.standard_normal(x_t.shape)
    return x_t + (s2 - sn2) * score + np.sqrt(s2 - sn2) * eta
