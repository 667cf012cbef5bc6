"""Experiment configuration.

A run is described by one YAML file. Every section maps onto a dataclass
below; unknown keys are rejected by name and every value is checked
against its field type, so typos never silently fall back to defaults.
Environment variables override the output and log locations the same way
the container setup passes DATA_DIR / LOG_DIR.
"""

import dataclasses
import hashlib
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np
import yaml

logger = logging.getLogger(__name__)

DATASET_KINDS = ("gaussian", "gmm", "blobs", "blob_gmm")
FAMILIES = ("blur", "fade")
SCHEDULE_SOURCES = ("uniform", "auto", "file", "mse-matched")
WEIGHTINGS = ("sigma4", "uniform")
LR_SCHEDULES = ("cosine", "constant")
SAMPLER_METHODS = ("momentum", "naive")
NORMALIZATIONS = ("normalized", "literal")
DENOISERS = ("model", "oracle")


class ConfigError(ValueError):
    """Raised when a configuration does not validate."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


@dataclass
class DatasetSpec:
    kind: str = "gmm"
    dim: int = 2
    num_components: int = 4
    image_size: int = 8
    spread: float = 2.0
    component_std: float = 0.3
    train_size: int = 4096
    test_size: int = 2048

    @property
    def data_dim(self) -> int:
        if self.kind in ("blobs", "blob_gmm"):
            return self.image_size ** 2
        return self.dim


@dataclass
class CorruptionSpec:
    family: str = "fade"
    kernel_half_size: int = 8
    fade_rates: list[float] = field(default_factory=lambda: [0.8, 1.0])
    level_min: float = 0.01
    level_max: float = 6.0
    sigma_min: float = 1e-3
    sigma_max: float = 0.1
    denoise_end: float = 0.2


@dataclass
class ScheduleSpec:
    source: str = "uniform"
    path: Optional[str] = None
    num_levels: int = 32
    num_candidates: int = 256
    target_length: int = 32
    sample_size: int = 2048
    num_projections: int = 64
    reference_sigma_min: float = 0.01
    reference_sigma_max: float = 10.0


@dataclass
class ModelSpec:
    width: int = 128
    depth: int = 3
    num_frequencies: int = 16
    freq_min: float = 1.0
    freq_max: float = 1000.0


@dataclass
class TrainSpec:
    steps: int = 2000
    batch_size: int = 128
    learning_rate: float = 2e-4
    warmup_steps: int = 500
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "cosine"
    weighting: str = "sigma4"
    t_min: float = 1e-3
    log_every: int = 100


@dataclass
class SamplerSpec:
    method: str = "momentum"
    num_steps: int = 64
    normalization: str = "normalized"
    num_samples: int = 2048
    denoiser: str = "model"


@dataclass
class EvalSpec:
    num_projections: int = 64
    repeats: int = 5
    t_values: list[float] = field(default_factory=lambda: [0.3, 0.6, 0.9])
    num_points: int = 1000
    nfe_steps: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128])


@dataclass
class ExperimentConfig:
    """Full description of one experiment; serializable and hashable."""
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    # ── Loading ──

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "ExperimentConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError([f"config file not found: {path}"])
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError([f"{path}: not valid YAML ({e})"]) from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        config = cls.from_dict(data)
        logger.info(f"Loaded config {path} (hash {config.config_hash()})")
        return config

    @classmethod
    def from_env(cls, path: Optional[str] = None) -> "ExperimentConfig":
        """Load the file (or defaults) and apply environment overrides."""
        config = cls.from_file(path) if path else cls()
        out_dir = os.environ.get("SOFTDIFF_OUT_DIR")
        if out_dir:
            config.out_dir = out_dir
        return config

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # ── Identity ──

    def config_hash(self) -> str:
        """Hash of everything that determines results (output location excluded)."""
        payload = self.to_dict()
        payload.pop("out_dir", None)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    # ── Validation ──

    def validate(self) -> list[str]:
        """Return a list of problems, each naming the offending field."""
        problems = []
        d, c, s, m, tr, sp, ev = (self.dataset, self.corruption, self.schedule,
                                  self.model, self.train, self.sampler, self.eval)

        if self.seed < 0 or self.seed >= 2 ** 64:
            problems.append("seed: must be an unsigned 64-bit integer")

        if d.kind not in DATASET_KINDS:
            problems.append(f"dataset.kind: expected one of {DATASET_KINDS}, got {d.kind!r}")
        if d.kind == "gmm" and not 2 <= d.num_components <= 8:
            problems.append("dataset.num_components: must be in [2, 8]")
        if d.kind == "blob_gmm" and d.num_components < 1:
            problems.append("dataset.num_components: a mixture needs at least 1 component")
        if d.dim < 1:
            problems.append("dataset.dim: must be positive")
        if d.image_size < 2:
            problems.append("dataset.image_size: must be at least 2")
        if d.train_size < 1 or d.test_size < 1:
            problems.append("dataset.train_size/test_size: must be positive")
        if d.component_std <= 0:
            problems.append("dataset.component_std: must be positive")

        if c.family not in FAMILIES:
            problems.append(f"corruption.family: expected one of {FAMILIES}, got {c.family!r}")
        if c.family == "blur" and d.kind in ("gaussian", "gmm"):
            problems.append("corruption.family: blur needs an image dataset (blobs or blob_gmm)")
        if c.family == "fade" and len(c.fade_rates) != d.data_dim:
            problems.append(f"corruption.fade_rates: expected {d.data_dim} rates, got {len(c.fade_rates)}")
        if any(r < 0 for r in c.fade_rates):
            problems.append("corruption.fade_rates: must be non-negative")
        if c.kernel_half_size < 1:
            problems.append("corruption.kernel_half_size: must be positive")
        if not 0 <= c.level_min < c.level_max:
            problems.append("corruption.level_min/level_max: need 0 <= level_min < level_max")
        if not 0 < c.sigma_min <= c.sigma_max:
            problems.append("corruption.sigma_min/sigma_max: need 0 < sigma_min <= sigma_max")
        if not 0 < c.denoise_end < 1:
            problems.append("corruption.denoise_end: must be in (0, 1)")

        if s.source not in SCHEDULE_SOURCES:
            problems.append(f"schedule.source: expected one of {SCHEDULE_SOURCES}, got {s.source!r}")
        if s.source == "file" and not s.path:
            problems.append("schedule.path: required when schedule.source is 'file'")
        if s.num_levels < 2:
            problems.append("schedule.num_levels: must be at least 2")
        if not 2 <= s.target_length <= s.num_candidates:
            problems.append("schedule.target_length: must be in [2, num_candidates]")
        if s.sample_size < 2 or s.num_projections < 1:
            problems.append("schedule.sample_size/num_projections: too small")
        if not 0 < s.reference_sigma_min < s.reference_sigma_max:
            problems.append("schedule.reference_sigma_min/max: need 0 < min < max")

        if m.width < 1 or m.depth < 1 or m.num_frequencies < 1:
            problems.append("model.width/depth/num_frequencies: must be positive")
        if not 0 < m.freq_min <= m.freq_max:
            problems.append("model.freq_min/freq_max: need 0 < min <= max")

        if tr.steps < 0:
            problems.append("train.steps: must be non-negative")
        if tr.batch_size < 1:
            problems.append("train.batch_size: must be positive")
        if tr.learning_rate <= 0:
            problems.append("train.learning_rate: must be positive")
        if tr.lr_schedule not in LR_SCHEDULES:
            problems.append(f"train.lr_schedule: expected one of {LR_SCHEDULES}, got {tr.lr_schedule!r}")
        if tr.weighting not in WEIGHTINGS:
            problems.append(f"train.weighting: expected one of {WEIGHTINGS}, got {tr.weighting!r}")
        if not 0 < tr.t_min < 1:
            problems.append("train.t_min: must be in (0, 1)")
        if tr.grad_clip <= 0:
            problems.append("train.grad_clip: must be positive")

        if sp.method not in SAMPLER_METHODS:
            problems.append(f"sampler.method: expected one of {SAMPLER_METHODS}, got {sp.method!r}")
        if sp.normalization not in NORMALIZATIONS:
            problems.append(f"sampler.normalization: expected one of {NORMALIZATIONS}, got {sp.normalization!r}")
        if sp.denoiser not in DENOISERS:
            problems.append(f"sampler.denoiser: expected one of {DENOISERS}, got {sp.denoiser!r}")
        if sp.denoiser == "oracle" and d.kind == "blobs":
            problems.append("sampler.denoiser: no oracle exists for the blobs dataset")
        if sp.num_steps < 1 or sp.num_samples < 1:
            problems.append("sampler.num_steps/num_samples: must be positive")

        if any(not 0 < t <= 1 for t in ev.t_values):
            problems.append("eval.t_values: must lie in (0, 1]")
        if any(n < 1 for n in ev.nfe_steps):
            problems.append("eval.nfe_steps: must be positive")
        if ev.repeats < 2:
            problems.append("eval.repeats: need at least 2 for a spread estimate")
        return problems

    def ensure_valid(self) -> "ExperimentConfig":
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self


def _build(cls, data: dict, prefix: str):
    """Instantiate a (nested) config dataclass, rejecting unknown keys and mistyped values."""
    if not isinstance(data, dict):
        raise ConfigError([f"{prefix.rstrip('.') or 'config'}: expected a mapping"])
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError([f"{prefix}{k}: unknown field" for k in unknown])

    hints = typing.get_type_hints(cls)
    kwargs: dict[str, Any] = {}
    problems: list[str] = []
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            try:
                kwargs[name] = _build(hint, value or {}, f"{prefix}{name}.")
            except ConfigError as e:
                problems.extend(e.problems)
        else:
            kwargs[name] = _coerce(value, hint, f"{prefix}{name}", problems)
    if problems:
        raise ConfigError(problems)
    return cls(**kwargs)


def _coerce(value: Any, hint: Any, where: str, problems: list[str]) -> Any:
    """Check a YAML scalar or list against its field annotation; ints widen to float."""
    if typing.get_origin(hint) is Union:
        if value is None:
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if typing.get_origin(hint) is list:
        if not isinstance(value, list):
            problems.append(f"{where}: expected list, got {type(value).__name__}")
            return value
        (item,) = typing.get_args(hint)
        return [_coerce(v, item, f"{where}[{i}]", problems) for i, v in enumerate(value)]
    # bool is an int subclass but never a valid number here
    if isinstance(value, bool) or not isinstance(value, (int, float) if hint is float else hint):
        problems.append(f"{where}: expected {hint.__name__}, got {type(value).__name__}")
        return value
    return float(value) if hint is float else value


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Independent random stream for one purpose, derived from the root seed."""
    key = int.from_bytes(hashlib.sha256(purpose.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
