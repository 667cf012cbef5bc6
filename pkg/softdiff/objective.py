"""Soft Score Matching and the plain denoising-score-matching baseline.

The network predicts the residual r_t = x_0 - x_t and is penalised in the
corrupted space: w(t) * ||C_t (phi_theta(x_t|t) - r_t)||^2 / sigma_t^4 per
sample, with w(t) = sigma_t^4 by default so the trained quantity is the
filtered residual MSE.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np

from softdiff.model import OptimizerSettings, OptimizerState, ScoreModel, optimizer_step

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


class ObjectiveError(ValueError):
    """Loss inputs that make the objective undefined."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class Weighting(str, Enum):
    SIGMA4 = "sigma4"    # w(t) = sigma_t^4, cancels the 1/sigma_t^4 factor
    UNIFORM = "uniform"  # w(t) = 1, the 1/sigma_t^4 factor is kept


class ResidualModel(Protocol):
    def forward(self, x_t: np.ndarray, t) -> np.ndarray: ...


class Process(Protocol):
    def sigmas_at(self, t) -> np.ndarray: ...
    def apply_at(self, t, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class LossConfig:
    weighting: Weighting = Weighting.SIGMA4
    t_min: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "weighting", Weighting(self.weighting))
        if self.t_min <= 0:
            raise ObjectiveError(f"t_min must be positive, got {self.t_min}")

    def sample_weights(self, sigmas: np.ndarray) -> np.ndarray:
        """Per-sample factor multiplying ||C_t(phi - r_t)||^2."""
        if self.weighting is Weighting.SIGMA4:
            return np.ones_like(sigmas)
        return 1.0 / sigmas ** 4


@dataclass
class TrainBatch:
    x0: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        b = self.x0.shape[0]
        if not (self.t.shape == (b,) and self.x_t.shape == self.x0.shape == self.noise.shape):
            raise ObjectiveError("batch arrays must share their leading dimension")

    @property
    def residual(self) -> np.ndarray:
        return self.x0 - self.x_t


def _checked_sigmas(proc: Process, t) -> np.ndarray:
    sigmas = np.asarray(proc.sigmas_at(t), dtype=np.float64)
    if np.any(sigmas < SIGMA_FLOOR):
        raise ObjectiveError(f"sigma_t={sigmas.min():.3g} is below the floor {SIGMA_FLOOR}")
    return sigmas


def make_batch(data: np.ndarray, proc: Process, batch_size: int, cfg: LossConfig,
               rng: np.random.Generator) -> TrainBatch:
    """Draw x_0 from data, t ~ U[0, 1] clamped to [t_min, 1], and perturb."""
    if len(data) == 0:
        raise ObjectiveError("dataset is empty")
    x0 = data[rng.integers(0, len(data), size=batch_size)]
    t = np.clip(rng.uniform(0.0, 1.0, size=batch_size), cfg.t_min, 1.0)
    noise = rng.standard_normal(x0.shape)
    x_t = proc.apply_at(t, x0) + np.asarray(proc.sigmas_at(t))[:, None] * noise
    return TrainBatch(x0=x0, t=t, x_t=x_t, noise=noise)


def score_from_model(model: ResidualModel, x_t: np.ndarray, t, proc: Process) -> np.ndarray:
    """s_theta = (C_t h_theta - x_t) / sigma_t^2 with h_theta = phi_theta + x_t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    sigmas = _checked_sigmas(proc, t)
    h = model.forward(x_t, t) + x_t
    return (proc.apply_at(t, h) - x_t) / (sigmas ** 2)[..., None]


def ssm_terms(model: ResidualModel, batch: TrainBatch, proc: Process,
              cfg: LossConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, dLoss/dphi, and the per-sample weighted terms."""
    sigmas = _checked_sigmas(proc, batch.t)
    if np.any(batch.t < cfg.t_min):
        raise ObjectiveError(f"batch contains t below t_min={cfg.t_min}")
    phi = model.forward(batch.x_t, batch.t)
    filtered = proc.apply_at(batch.t, phi - batch.residual)
    weights = cfg.sample_weights(sigmas)
    per_sample = weights * np.sum(filtered ** 2, axis=1)
    # both operator families are self-adjoint, so C_t^T = C_t
    upstream = (2.0 / len(per_sample)) * weights[:, None] * proc.apply_at(batch.t, filtered)
    return float(per_sample.mean()), upstream, per_sample


def ssm_loss(model: ResidualModel, batch: TrainBatch, proc: Process, cfg: LossConfig) -> float:
    return ssm_terms(model, batch, proc, cfg)[0]


def dsm_loss(score_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], batch: TrainBatch,
             proc: Process) -> float:
    """Mean ||s_theta(x_t|t) - (C_t x_0 - x_t)/sigma_t^2||^2."""
    sigmas = _checked_sigmas(proc, batch.t)
    target = (proc.apply_at(batch.t, batch.x0) - batch.x_t) / (sigmas ** 2)[:, None]
    s = np.asarray(score_fn(batch.x_t, batch.t), dtype=np.float64)
    return float(np.mean(np.sum((s - target) ** 2, axis=1)))


@dataclass
class LossRecord:
    step: int
    loss: float
    t_mean: float


@dataclass
class TrainResult:
    model: ScoreModel
    state: OptimizerState
    trace: list[LossRecord] = field(default_factory=list)


def train(model: ScoreModel, data: np.ndarray, proc: Process, cfg: LossConfig,
          settings: OptimizerSettings, steps: int, batch_size: int, rng: np.random.Generator,
          log_every: int = 100) -> TrainResult:
    """Minibatch Adam on ssm_loss. Updates `model` in place."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ObjectiveError("dataset must be a non-empty (num_points, dim) array")
    state = OptimizerState.zeros(model.params.size)
    result = TrainResult(model=model, state=state)

    for step in range(1, steps + 1):
        batch = make_batch(data, proc, batch_size, cfg, rng)
        loss, upstream, _ = ssm_terms(model, batch, proc, cfg)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        grads = model.backward(upstream)
        optimizer_step(model, grads, state, settings)
        result.trace.append(LossRecord(step, loss, float(batch.t.mean())))
        if log_every and step % log_every == 0:
            recent = np.mean([r.loss for r in result.trace[-log_every:]])
            logger.info(f"Train step {step}/{steps}: loss={recent:.6g}")
    return result
