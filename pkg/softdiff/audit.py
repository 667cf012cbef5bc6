import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from softdiff.config import EvalSpec
from softdiff.objective import score_from_model
from softdiff.operators import CorruptionProcess
from softdiff.oracle import DenseOperator, GaussianMixture, analytic_score, pushforward
from softdiff.scheduler import distance_with_error

logger = logging.getLogger(__name__)


class AuditError(ValueError):
    pass


@dataclass
class ScoreError:
    t: float
    mse: float
    relative_error: float


@dataclass
class EvalReport:
    """Sample quality against held-out data, plus score accuracy when an oracle exists.

    wall_clock_s is logged but left out of to_dict so reports of repeated
    runs compare byte for byte.
    """
    sliced_w2: float
    sliced_w2_std: float
    nfe: int
    num_samples: int
    score_errors: list[ScoreError] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def __post_init__(self):
        values = [self.sliced_w2, self.sliced_w2_std] + [v for e in self.score_errors
                                                         for v in (e.mse, e.relative_error)]
        if not np.all(np.isfinite(values)):
            raise AuditError(f"non-finite metric in report: {values}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("wall_clock_s")
        return data


def score_errors(model, proc: CorruptionProcess, mixture: GaussianMixture, t_values: list[float],
                 num_points: int, rng: np.random.Generator) -> list[ScoreError]:
    """Model score vs the exact marginal score on points drawn from q_t."""
    out = []
    for t in t_values:
        gmm_t = pushforward(mixture, DenseOperator.from_operator(proc.operator_at(t)), proc.sigma_at(t))
        x_t = gmm_t.sample(num_points, rng)
        truth = analytic_score(gmm_t, x_t)
        diff = score_from_model(model, x_t, np.full(num_points, t), proc) - truth
        out.append(ScoreError(
            t=float(t),
            mse=float(np.mean(np.sum(diff ** 2, axis=1))),
            relative_error=float(np.linalg.norm(diff) / np.linalg.norm(truth)),
        ))
    return out


class SampleAuditor:
    """Turns a set of generated samples into an EvalReport."""

    def __init__(self, spec: EvalSpec, reference: np.ndarray, rng: np.random.Generator):
        self.spec = spec
        self.reference = np.asarray(reference, dtype=np.float64)
        self.rng = rng

    def analyze(self, samples: np.ndarray, nfe: int, model=None, proc: Optional[CorruptionProcess] = None,
                mixture: Optional[GaussianMixture] = None) -> EvalReport:
        start = time.monotonic()
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != self.reference.shape[1]:
            raise AuditError(f"samples of shape {samples.shape} do not match data dimension "
                             f"{self.reference.shape[1]}")
        mean, std = distance_with_error(samples, self.reference, self.spec.num_projections,
                                        self.spec.repeats, self.rng)
        errors = []
        if model is not None and proc is not None and mixture is not None:
            errors = score_errors(model, proc, mixture, self.spec.t_values, self.spec.num_points, self.rng)
        report = EvalReport(mean, std, nfe, samples.shape[0], errors, time.monotonic() - start)
        logger.info(f"Eval: sliced W2 {mean:.4f} ± {std:.4f} at {nfe} NFE ({report.wall_clock_s:.1f}s)")
        return report

    @staticmethod
    def generate_report(report: EvalReport) -> str:
        """Human-readable summary of a report."""
        lines = [
            "📈 Sample Quality Report",
            f"Generated at: {time.strftime('%Y-%m-%d %H:%M:%S')}",
            "------------------------------------------",
            f"  - Sliced W2:   {report.sliced_w2:.4f} ± {report.sliced_w2_std:.4f}",
            f"  - NFE:         {report.nfe}",
            f"  - Samples:     {report.num_samples}",
            f"  - Wall clock:  {report.wall_clock_s:.1f}s",
        ]
        if report.score_errors:
            lines.append("\n[SCORE vs ORACLE]")
            for e in report.score_errors:
                lines.append(f"  - t={e.t:.2f}: mse={e.mse:.4g}, relative error={e.relative_error:.2%}")
        return "\n".join(lines)
