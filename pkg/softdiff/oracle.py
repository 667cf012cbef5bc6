"""Closed-form ground truth for Gaussian-mixture data under linear corruption.

If x_0 ~ sum_i pi_i N(mu_i, S_i) and x_t = C x_0 + sigma z then x_t is again a
Gaussian mixture, so its score and E[x_0 | x_t] are available exactly. All
algebra here is dense and meant for n <= 256.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, sqrtm
from scipy.special import logsumexp

from softdiff.operators import CorruptionProcess, LinearOperator

logger = logging.getLogger(__name__)

MAX_DENSE_DIM = 256

ScoreFn = Callable[[np.ndarray], np.ndarray]


class OracleError(ValueError):
    """Raised when the closed-form algebra is undefined for the inputs."""


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        k, n = means.shape
        if weights.shape != (k,) or covs.shape != (k, n, n):
            raise OracleError(f"inconsistent mixture shapes: weights {weights.shape}, "
                              f"means {means.shape}, covs {covs.shape}")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise OracleError(f"weights must be positive and sum to 1, got sum {weights.sum()!r}")

        chols = np.empty_like(covs)
        for i in range(k):
            if not np.allclose(covs[i], covs[i].T, rtol=1e-10, atol=1e-12):
                raise OracleError(f"component {i}: covariance is not symmetric")
            try:
                chols[i] = np.linalg.cholesky(covs[i])
            except np.linalg.LinAlgError:
                raise OracleError(f"component {i}: covariance is not positive definite") from None

        for name, value in (("weights", weights), ("means", means), ("covs", covs), ("_chols", chols)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        centered = self.means - mu
        spread = np.einsum("k,ki,kj->ij", self.weights, centered, centered)
        return np.einsum("k,kij->ij", self.weights, self.covs) + spread

    def component_log_probs(self, x: np.ndarray) -> np.ndarray:
        """log(pi_i) + log N(x; mu_i, S_i), shape (m, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.dim:
            raise OracleError(f"dimension mismatch: mixture has {self.dim}, got {x.shape[-1]}")
        out = np.empty((x.shape[0], self.num_components))
        const = 0.5 * self.dim * np.log(2.0 * np.pi)
        for i in range(self.num_components):
            L = self._chols[i]
            diff = x - self.means[i]
            sol = cho_solve((L, True), diff.T).T
            half_logdet = np.sum(np.log(np.diag(L)))
            out[:, i] = np.log(self.weights[i]) - 0.5 * np.sum(diff * sol, axis=1) - half_logdet - const
        return out

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_probs(x), axis=1)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        logp = self.component_log_probs(x)
        norm = logsumexp(logp, axis=1, keepdims=True)
        if not np.all(np.isfinite(norm)):
            raise OracleError("all responsibilities underflow: point too far in the tails")
        return np.exp(logp - norm)

    def precision_times(self, i: int, v: np.ndarray) -> np.ndarray:
        """S_i^{-1} v for row vectors v."""
        return cho_solve((self._chols[i], True), np.atleast_2d(v).T).T

    def sample(self, num: int, rng: np.random.Generator) -> np.ndarray:
        comps = rng.choice(self.num_components, size=num, p=self.weights)
        z = rng.standard_normal((num, self.dim))
        return self.means[comps] + np.einsum("mij,mj->mi", self._chols[comps], z)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        try:
            return cls(np.array(data["weights"]), np.array(data["means"]), np.array(data["covs"]))
        except KeyError as e:
            raise OracleError(f"mixture JSON is missing {e}") from e


@dataclass(frozen=True, eq=False)
class DenseOperator:
    """An n x n matrix standing in for a structured operator."""
    matrix: np.ndarray

    @classmethod
    def from_operator(cls, op: LinearOperator) -> "DenseOperator":
        if op.dim > MAX_DENSE_DIM:
            raise OracleError(f"dense oracle limited to n <= {MAX_DENSE_DIM}, got {op.dim}")
        # row i of apply(I) is C e_i, i.e. column i of C
        return cls(op.apply(np.eye(op.dim)).T)

    @classmethod
    def identity(cls, n: int) -> "DenseOperator":
        return cls(np.eye(n))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.matrix.T


def pushforward(gmm: GaussianMixture, C: DenseOperator, sigma: float) -> GaussianMixture:
    """Exact law of C x_0 + sigma z for x_0 ~ gmm."""
    if sigma < 0:
        raise OracleError(f"sigma must be non-negative, got {sigma}")
    M = C.matrix
    covs = np.einsum("ij,kjl,ml->kim", M, gmm.covs, M) + sigma ** 2 * np.eye(gmm.dim)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    try:
        return GaussianMixture(gmm.weights, gmm.means @ M.T, covs)
    except OracleError as e:
        raise OracleError(f"pushforward: {e}") from e


def analytic_score(gmm_t: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """grad_x log q_t(x) = sum_i w_i(x) S_i^{-1} (m_i - x)."""
    x = np.asarray(x, dtype=np.float64)
    xs = np.atleast_2d(x)
    if not np.all(np.isfinite(xs)):
        raise OracleError("score requested at a non-finite point")
    resp = gmm_t.responsibilities(xs)
    score = np.zeros_like(xs)
    for i in range(gmm_t.num_components):
        score += resp[:, i:i + 1] * gmm_t.precision_times(i, gmm_t.means[i] - xs)
    return score.reshape(x.shape)


def posterior_mean(gmm0: GaussianMixture, C: DenseOperator, sigma: float, x_t: np.ndarray) -> np.ndarray:
    """E[x_0 | x_t] by per-component Gaussian conditioning mixed by responsibilities."""
    if sigma <= 0:
        raise OracleError(f"posterior mean needs sigma > 0, got {sigma}")
    x_t = np.asarray(x_t, dtype=np.float64)
    xs = np.atleast_2d(x_t)
    gmm_t = pushforward(gmm0, C, sigma)
    resp = gmm_t.responsibilities(xs)
    out = np.zeros_like(xs)
    for i in range(gmm0.num_components):
        innovation = gmm_t.precision_times(i, xs - gmm_t.means[i])
        # mu_i + S_i C^T (C S_i C^T + sigma^2 I)^{-1} (x_t - C mu_i)
        out += resp[:, i:i + 1] * (gmm0.means[i] + innovation @ C.matrix @ gmm0.covs[i])
    return out.reshape(x_t.shape)


def gaussian_w2(mean1: np.ndarray, cov1: np.ndarray, mean2: np.ndarray, cov2: np.ndarray) -> float:
    """Closed-form 2-Wasserstein distance between two Gaussians."""
    root2 = np.real(sqrtm(cov2))
    cross = np.real(sqrtm(root2 @ cov1 @ root2))
    value = np.sum((np.asarray(mean1) - np.asarray(mean2)) ** 2) + np.trace(cov1 + cov2 - 2.0 * cross)
    return float(np.sqrt(max(value, 0.0)))


@dataclass(frozen=True)
class J1J2Estimate:
    difference: float
    std_error: float
    j1: float
    j2: float
    num_samples: int


def estimate_j1_minus_j2(gmm0: GaussianMixture, proc: CorruptionProcess, t: float, score_fn: ScoreFn,
                         num_samples: int, rng: np.random.Generator) -> J1J2Estimate:
    """Monte-Carlo J1 - J2 for one score candidate.

    J1 compares the candidate with the exact marginal score, J2 with the
    conditional score (C_t x_0 - x_t) / sigma_t^2. Passing generators seeded
    identically gives common random numbers across candidates.
    """
    if t <= 0:
        raise OracleError(f"t must be positive, got {t}")
    if num_samples < 10_000:
        raise OracleError(f"need at least 10^4 samples, got {num_samples}")
    sigma = proc.sigma_at(t)
    if sigma <= 0:
        raise OracleError(f"conditional score undefined at t={t}: sigma_t = 0")

    C = DenseOperator.from_operator(proc.operator_at(t))
    gmm_t = pushforward(gmm0, C, sigma)
    x0 = gmm0.sample(num_samples, rng)
    clean = C.apply(x0)
    x_t = clean + sigma * rng.standard_normal(x0.shape)

    true_score = analytic_score(gmm_t, x_t)
    cond_score = (clean - x_t) / sigma ** 2
    s = np.asarray(score_fn(x_t), dtype=np.float64)

    j1 = 0.5 * np.sum((s - true_score) ** 2, axis=1)
    j2 = 0.5 * np.sum((s - cond_score) ** 2, axis=1)
    diff = j1 - j2
    return J1J2Estimate(
        difference=float(diff.mean()),
        std_error=float(diff.std(ddof=1) / np.sqrt(num_samples)),
        j1=float(j1.mean()),
        j2=float(j2.mean()),
        num_samples=num_samples,
    )
