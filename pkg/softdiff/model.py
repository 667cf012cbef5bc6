"""Time-conditioned residual network phi_theta(x_t | t).

A small MLP over [x_t, sinusoidal(t)] with SiLU hidden layers, written
directly in numpy with an explicit reverse pass. Parameters live in one
flat vector; each layer's weight and bias are views into it, so the
optimizer and the checkpoint format only ever see the flat vector.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SDM1"


class ModelError(RuntimeError):
    """Misuse of the model (e.g. backward without forward)."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match its architecture."""


@dataclass(frozen=True)
class Architecture:
    data_dim: int
    width: int = 128
    depth: int = 3
    num_frequencies: int = 16
    freq_min: float = 1.0
    freq_max: float = 1000.0

    @property
    def input_dim(self) -> int:
        return self.data_dim + 2 * self.num_frequencies

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.width] * self.depth + [self.data_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


def time_embedding(t: np.ndarray, arch: Architecture) -> np.ndarray:
    freqs = np.geomspace(arch.freq_min, arch.freq_max, arch.num_frequencies)
    angles = np.asarray(t, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


class ScoreModel:
    """phi_theta with derived views h_theta = phi + x and (via objective) s_theta."""

    def __init__(self, arch: Architecture, params: Optional[np.ndarray] = None):
        self.arch = arch
        if params is None:
            self.params = np.zeros(arch.num_params)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (arch.num_params,):
                raise ModelError(f"expected {arch.num_params} parameters, got {params.shape}")
            self.params = params.copy()
        self.layers = self.split(self.params)
        self._cache = None
        self.input_grad: Optional[np.ndarray] = None

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator, zero_final: bool = True) -> "ScoreModel":
        """LeCun-normal weights, zero biases; a zero final layer makes h_theta = x_t."""
        model = cls(arch)
        for k, (W, _) in enumerate(model.layers):
            last = k == len(model.layers) - 1
            if not (last and zero_final):
                W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
        return model

    def split(self, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into a flat vector with this model's layout."""
        views, offset = [], 0
        for i, o in self.arch.layer_shapes:
            W = flat[offset:offset + i * o].reshape(i, o)
            offset += i * o
            b = flat[offset:offset + o]
            offset += o
            views.append((W, b))
        return views

    # ── Forward / backward ──

    def forward(self, x_t: np.ndarray, t) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[-1] != self.arch.data_dim:
            raise ModelError(f"model expects dimension {self.arch.data_dim}, got {x_t.shape[-1]}")
        xs = x_t.reshape(-1, self.arch.data_dim)
        ts = np.broadcast_to(np.asarray(t, dtype=np.float64), (xs.shape[0],))

        h = np.concatenate([xs, time_embedding(ts, self.arch)], axis=1)
        inputs, pre = [], []
        for k, (W, b) in enumerate(self.layers):
            inputs.append(h)
            z = h @ W + b
            if k < len(self.layers) - 1:
                pre.append(z)
                h = _silu(z)
            else:
                h = z
        self._cache = (inputs, pre, x_t.shape)
        return h.reshape(x_t.shape)

    __call__ = forward

    def denoise(self, x_t: np.ndarray, t) -> np.ndarray:
        """h_theta(x_t | t) = phi_theta(x_t | t) + x_t."""
        return self.forward(x_t, t) + x_t

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. the flat parameters.

        `upstream` is dLoss/dOutput for the last forward pass. The gradient
        w.r.t. x_t is left in `self.input_grad`.
        """
        if self._cache is None:
            raise ModelError("backward called before any forward pass")
        inputs, pre, shape = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != shape:
            raise ModelError(f"upstream gradient shape {g.shape} does not match output {shape}")
        g = g.reshape(-1, self.arch.data_dim)

        grads = np.zeros_like(self.params)
        grad_layers = self.split(grads)
        for k in reversed(range(len(self.layers))):
            W, _ = self.layers[k]
            dW, db = grad_layers[k]
            if k < len(self.layers) - 1:
                g = g * _silu_grad(pre[k])
            dW[...] = inputs[k].T @ g
            db[...] = g.sum(axis=0)
            g = g @ W.T
        self.input_grad = g[:, :self.arch.data_dim].reshape(shape)
        return grads

    # ── Serialization ──

    def to_bytes(self, config_hash: str = "") -> bytes:
        header = json.dumps({"architecture": asdict(self.arch), "config_hash": config_hash},
                            sort_keys=True).encode("utf-8")
        return b"".join([
            CHECKPOINT_MAGIC,
            struct.pack("<I", len(header)),
            header,
            struct.pack("<Q", self.params.size),
            self.params.astype("<f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ScoreModel", dict]:
        if blob[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
        try:
            (hlen,) = struct.unpack_from("<I", blob, 4)
            header = json.loads(blob[8:8 + hlen].decode("utf-8"))
            arch = Architecture(**header["architecture"])
            (count,) = struct.unpack_from("<Q", blob, 8 + hlen)
        except (struct.error, ValueError, KeyError, TypeError) as e:
            raise CheckpointError(f"unreadable checkpoint header: {e}") from e
        if count != arch.num_params:
            raise CheckpointError(f"checkpoint holds {count} parameters, architecture needs {arch.num_params}")
        payload = blob[16 + hlen:]
        if len(payload) != 8 * count:
            raise CheckpointError(f"checkpoint payload is {len(payload)} bytes, expected {8 * count}")
        params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return cls(arch, params), header


def save_checkpoint(model: ScoreModel, path: str, config_hash: str = "") -> None:
    with open(path, "wb") as f:
        f.write(model.to_bytes(config_hash))
    logger.info(f"Saved checkpoint {path} ({model.arch.num_params} params)")


def load_checkpoint(path: str, expected_dim: Optional[int] = None) -> tuple[ScoreModel, dict]:
    with open(path, "rb") as f:
        model, header = ScoreModel.from_bytes(f.read())
    if expected_dim is not None and model.arch.data_dim != expected_dim:
        raise CheckpointError(f"checkpoint is for dimension {model.arch.data_dim}, expected {expected_dim}")
    return model, header


# ── Optimizer ──

@dataclass(frozen=True)
class OptimizerSettings:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    warmup_steps: int = 500
    # cosine decay to zero at this step; 0 keeps the rate constant after warmup
    decay_steps: int = 0


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, num_params: int) -> "OptimizerState":
        return cls(np.zeros(num_params), np.zeros(num_params))


def clip_by_norm(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads, norm


def learning_rate_at(settings: OptimizerSettings, step: int) -> float:
    """Linear warmup, then either constant or cosine-decayed to zero at decay_steps."""
    lr = settings.learning_rate
    if step < settings.warmup_steps:
        return lr * step / settings.warmup_steps
    if settings.decay_steps <= settings.warmup_steps:
        return lr
    progress = min(1.0, (step - settings.warmup_steps) / (settings.decay_steps - settings.warmup_steps))
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(model: ScoreModel, grads: np.ndarray, state: OptimizerState,
                   settings: OptimizerSettings) -> OptimizerState:
    """One bias-corrected Adam update (after global-norm clipping), in place."""
    if grads.shape != model.params.shape or state.m.shape != model.params.shape:
        raise ModelError(f"gradient/state shape mismatch with {model.params.shape} parameters")
    grads, _ = clip_by_norm(grads, settings.grad_clip)
    state.step += 1
    state.m = settings.beta1 * state.m + (1.0 - settings.beta1) * grads
    state.v = settings.beta2 * state.v + (1.0 - settings.beta2) * grads ** 2
    m_hat = state.m / (1.0 - settings.beta1 ** state.step)
    v_hat = state.v / (1.0 - settings.beta2 ** state.step)
    model.params -= learning_rate_at(settings, state.step) * m_hat / (np.sqrt(v_hat) + settings.eps)
    return state
