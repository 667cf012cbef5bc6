"""Linear corruption operators and the continuous corruption process.

x_t = C_t x_0 + sigma_t z, where C_t is picked from an operator family by
interpolating the family level ("blur_std") over a Schedule grid and sigma_t
follows the same grid.

Tensors are float64 numpy arrays whose last axis is the data dimension n;
any leading axes are batch axes.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)


class OperatorError(ValueError):
    """Dimension or parameter problems with an operator."""


class ScheduleError(ValueError):
    """A schedule violates ordering or monotonicity rules."""


class OperatorKind(str, Enum):
    IDENTITY = "identity"
    GAUSSIAN_BLUR = "gaussian_blur"
    DIAGONAL_FADE = "diagonal_fade"
    COMPOSED = "composed"


def _check_dim(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != dim:
        actual = x.shape[-1] if x.ndim else 0
        raise OperatorError(f"dimension mismatch: operator expects {dim}, got {actual}")
    return x


class LinearOperator:
    """A deterministic linear map on R^n."""

    kind: OperatorKind
    dim: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_adjoint(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def compose(self, inner: "LinearOperator") -> "LinearOperator":
        """Return self ∘ inner."""
        if inner.dim != self.dim:
            raise OperatorError(f"cannot compose dim {self.dim} with dim {inner.dim}")
        return ComposedOperator(outer=self, inner=inner)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)


@dataclass(frozen=True, eq=False)
class Identity(LinearOperator):
    dim: int
    kind: OperatorKind = field(default=OperatorKind.IDENTITY, init=False)

    def apply(self, x):
        return _check_dim(x, self.dim).copy()

    apply_adjoint = apply


@dataclass(frozen=True, eq=False)
class DiagonalFade(LinearOperator):
    """Per-coordinate scaling by values in [0, 1]."""
    scales: np.ndarray
    kind: OperatorKind = field(default=OperatorKind.DIAGONAL_FADE, init=False)

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float64).ravel()
        if scales.size == 0 or np.any(scales < 0) or np.any(scales > 1):
            raise OperatorError("fade scales must be a non-empty vector in [0, 1]")
        scales.setflags(write=False)
        object.__setattr__(self, "scales", scales)

    @property
    def dim(self) -> int:
        return self.scales.size

    def apply(self, x):
        return _check_dim(x, self.dim) * self.scales

    apply_adjoint = apply


def gaussian_kernel_1d(std: float, half_size: int) -> np.ndarray:
    """Sampled 1-D Gaussian on [-half_size, half_size], normalized to sum 1."""
    offsets = np.arange(-half_size, half_size + 1, dtype=np.float64)
    if std <= 0:
        kernel = (offsets == 0).astype(np.float64)
    else:
        kernel = np.exp(-0.5 * (offsets / std) ** 2)
    return kernel / kernel.sum()


@dataclass(frozen=True, eq=False)
class GaussianBlur(LinearOperator):
    """Zero-padded 2-D Gaussian blur of an height x width image.

    The 2-D kernel is the outer product of the normalized 1-D kernel, so it
    sums to 1 and the blur runs as two 1-D passes; with zero padding outside
    the image this equals the dense 2-D convolution exactly.
    """
    height: int
    width: int
    std: float
    half_size: int
    kind: OperatorKind = field(default=OperatorKind.GAUSSIAN_BLUR, init=False)

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.half_size < 1:
            raise OperatorError("blur needs positive image size and kernel half-size")
        if not np.isfinite(self.std) or self.std < 0:
            raise OperatorError(f"blur std must be finite and non-negative, got {self.std}")

    @property
    def dim(self) -> int:
        return self.height * self.width

    @property
    def kernel_1d(self) -> np.ndarray:
        return gaussian_kernel_1d(self.std, self.half_size)

    @property
    def kernel_2d(self) -> np.ndarray:
        k = np.outer(self.kernel_1d, self.kernel_1d)
        return k / k.sum()

    def apply(self, x):
        x = _check_dim(x, self.dim)
        lead = x.shape[:-1]
        images = x.reshape(-1, self.height, self.width)
        k = self.kernel_1d
        out = ndimage.convolve1d(images, k, axis=-1, mode="constant", cval=0.0)
        out = ndimage.convolve1d(out, k, axis=-2, mode="constant", cval=0.0)
        return out.reshape(lead + (self.dim,))

    # symmetric kernel with zero padding gives a symmetric matrix
    apply_adjoint = apply


@dataclass(frozen=True, eq=False)
class ComposedOperator(LinearOperator):
    outer: LinearOperator
    inner: LinearOperator
    kind: OperatorKind = field(default=OperatorKind.COMPOSED, init=False)

    @property
    def dim(self) -> int:
        return self.inner.dim

    def apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def apply_adjoint(self, x):
        return self.inner.apply_adjoint(self.outer.apply_adjoint(x))


def apply_operator(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    """C x for a single vector or a batch; raises OperatorError on a dimension mismatch."""
    return op.apply(np.asarray(x, dtype=np.float64))


# ── Operator families: level -> operator ──

@dataclass(frozen=True)
class BlurFamily:
    """Gaussian blur with a fixed kernel half-size; the level is the std."""
    height: int
    width: int
    half_size: int
    name: str = "blur"

    @property
    def dim(self) -> int:
        return self.height * self.width

    def operator(self, level: float) -> GaussianBlur:
        return GaussianBlur(self.height, self.width, float(level), self.half_size)

    def apply_levels(self, levels: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Blur row i of x with std levels[i], all rows in one batched product."""
        x = _check_dim(x, self.dim)
        levels = np.broadcast_to(np.asarray(levels, dtype=np.float64), x.shape[:-1]).ravel()
        if levels.size and np.all(levels == levels[0]):
            return self.operator(levels[0]).apply(x)
        images = x.reshape(-1, self.height, self.width)
        rows = banded_blur_matrices(levels, self.height, self.half_size)
        cols = rows if self.width == self.height else banded_blur_matrices(levels, self.width, self.half_size)
        out = rows @ images @ np.swapaxes(cols, 1, 2)
        return out.reshape(x.shape)


def banded_blur_matrices(stds: np.ndarray, size: int, half_size: int) -> np.ndarray:
    """One zero-padded 1-D convolution matrix per std, shape (len(stds), size, size)."""
    stds = np.asarray(stds, dtype=np.float64)
    offsets = np.arange(-half_size, half_size + 1, dtype=np.float64)
    safe = np.where(stds > 0, stds, 1.0)
    kernels = np.where(stds[:, None] > 0, np.exp(-0.5 * (offsets / safe[:, None]) ** 2),
                       (offsets == 0).astype(np.float64))
    kernels /= kernels.sum(axis=1, keepdims=True)
    shift = np.arange(size)[None, :] - np.arange(size)[:, None]
    taps = kernels[:, np.clip(shift + half_size, 0, 2 * half_size)]
    return np.where(np.abs(shift) <= half_size, taps, 0.0)


@dataclass(frozen=True)
class FadeFamily:
    """Diagonal fade with scales exp(-level * rate_i).

    Coordinates with larger rates vanish first, the way blur removes high
    frequencies before low ones.
    """
    rates: tuple
    name: str = "fade"

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if any(r < 0 for r in self.rates):
            raise OperatorError("fade rates must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.rates)

    def scales(self, level: Union[float, np.ndarray]) -> np.ndarray:
        level = np.asarray(level, dtype=np.float64)
        return np.exp(-level[..., None] * np.asarray(self.rates))

    def operator(self, level: float) -> DiagonalFade:
        return DiagonalFade(self.scales(float(level)))

    def apply_levels(self, levels: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.dim)
        return x * self.scales(np.asarray(levels, dtype=np.float64))


OperatorFamily = Union[BlurFamily, FadeFamily]


# ── Schedules ──

@dataclass(frozen=True)
class ScheduleEntry:
    t: float
    blur_std: float
    sigma: float


@dataclass
class Schedule:
    """Ordered corruption parameters over t in [0, 1]."""
    entries: list[ScheduleEntry]
    dataset: str = ""
    metric: str = ""
    epsilon: Optional[float] = None
    config_hash: str = ""

    def __post_init__(self):
        self.entries = [e if isinstance(e, ScheduleEntry) else ScheduleEntry(**e) for e in self.entries]
        self.validate()

    def validate(self):
        if len(self.entries) < 2:
            raise ScheduleError("a schedule needs at least two entries")
        ts, levels, sigmas = self.ts, self.levels, self.sigmas
        if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(levels)) and np.all(np.isfinite(sigmas))):
            raise ScheduleError("schedule entries must be finite")
        if ts[0] != 0.0 or ts[-1] != 1.0:
            raise ScheduleError(f"schedule must start at t=0 and end at t=1, got {ts[0]}..{ts[-1]}")
        if np.any(np.diff(ts) <= 0):
            raise ScheduleError("schedule t values must be strictly increasing")
        if np.any(sigmas < 0) or np.any(levels < 0):
            raise ScheduleError("schedule sigma and blur_std must be non-negative")
        if np.any(np.diff(sigmas) < 0):
            raise ScheduleError("schedule sigma values must be non-decreasing")
        if np.any(np.diff(levels) < 0):
            raise ScheduleError("schedule blur_std values must be non-decreasing")

    @property
    def ts(self) -> np.ndarray:
        return np.array([e.t for e in self.entries], dtype=np.float64)

    @property
    def levels(self) -> np.ndarray:
        return np.array([e.blur_std for e in self.entries], dtype=np.float64)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([e.sigma for e in self.entries], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "metric": self.metric,
            "epsilon": self.epsilon,
            "config_hash": self.config_hash,
            "entries": [{"t": e.t, "blur_std": e.blur_std, "sigma": e.sigma} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Schedule":
        try:
            return cls(
                entries=[ScheduleEntry(float(e["t"]), float(e["blur_std"]), float(e["sigma"]))
                         for e in data["entries"]],
                dataset=data.get("dataset", ""),
                metric=data.get("metric", ""),
                epsilon=data.get("epsilon"),
                config_hash=data.get("config_hash", ""),
            )
        except (KeyError, TypeError) as e:
            raise ScheduleError(f"malformed schedule: {e}") from e


def default_schedule(level_min: float, level_max: float, sigma_min: float, sigma_max: float,
                     denoise_end: float = 0.2, num_levels: int = 32, dataset: str = "") -> Schedule:
    """Geometric denoising stage on [0, denoise_end], then evenly spaced levels at constant noise."""
    entries = [ScheduleEntry(0.0, level_min, sigma_min), ScheduleEntry(denoise_end, level_min, sigma_max)]
    for k in range(1, num_levels):
        frac = k / (num_levels - 1)
        t = 1.0 if k == num_levels - 1 else denoise_end + (1.0 - denoise_end) * frac
        entries.append(ScheduleEntry(t, level_min + (level_max - level_min) * frac, sigma_max))
    return Schedule(entries, dataset=dataset, metric="uniform")


@dataclass(frozen=True, eq=False)
class CorruptionProcess:
    """t -> (C_t, sigma_t), interpolated over a schedule grid.

    Levels are interpolated linearly. Noise is interpolated geometrically
    between two positive entries and linearly otherwise, so a schedule with
    (0, sigma_min) and (denoise_end, sigma_max) yields the usual geometric
    noise progression.
    """
    schedule: Schedule
    family: OperatorFamily

    @property
    def dim(self) -> int:
        return self.family.dim

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
            raise OperatorError(f"t must lie in [0, 1], got {t if t.ndim == 0 else (t.min(), t.max())}")
        return t

    def levels_at(self, t) -> np.ndarray:
        t = self._check_t(t)
        return np.interp(t, self.schedule.ts, self.schedule.levels)

    def sigmas_at(self, t) -> np.ndarray:
        t = self._check_t(t)
        grid, sig = self.schedule.ts, self.schedule.sigmas
        idx = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, len(grid) - 2)
        lo, hi = sig[idx], sig[idx + 1]
        w = (t - grid[idx]) / (grid[idx + 1] - grid[idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            geometric = lo * (hi / lo) ** w
        linear = lo + (hi - lo) * w
        out = np.where((lo > 0) & (hi > 0), geometric, linear)
        out = np.where(lo == hi, lo, out)
        return np.where(w >= 1.0, hi, out)

    def level_at(self, t: float) -> float:
        return float(self.levels_at(t))

    def sigma_at(self, t: float) -> float:
        return float(self.sigmas_at(t))

    def operator_at(self, t: float) -> LinearOperator:
        return self.family.operator(self.level_at(t))

    def apply_at(self, t, x: np.ndarray) -> np.ndarray:
        """Apply C_{t_i} to row i of x (t scalar or one value per row)."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
        return self.family.apply_levels(self.levels_at(t), x)


def operator_at(proc: CorruptionProcess, t: float) -> LinearOperator:
    return proc.operator_at(t)


def sample_perturbation(proc: CorruptionProcess, x0: np.ndarray, t: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw x_t ~ N(C_t x0, sigma_t^2 I)."""
    x0 = _check_dim(x0, proc.dim)
    z = rng.standard_normal(x0.shape)
    return apply_operator(proc.operator_at(t), x0) + proc.sigma_at(t) * z
