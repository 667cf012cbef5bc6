"""Run artifacts on disk.

Every command writes into one output directory:

  schedule.json    Schedule (operators format) with config_hash
  distances.csv    candidate distance matrix, header row of candidate levels
  model.ckpt       checkpoint (model format)
  loss.csv         step,loss,t_mean
  samples.sdt      generated samples as a tensor file
  samples.json     sidecar: config_hash, method, nfe, num_samples
  report.json      evaluation report
  verify.json      verification suites
  nfe.csv          nfe,sliced_w2,sliced_w2_std

Tensor files: magic "SDT1", u32 rank, rank x u64 dims, float32 little-endian
payload in row-major order.
"""

import csv
import json
import logging
import os
import struct
from typing import Any, Iterable, Optional

import numpy as np

from softdiff.operators import Schedule, ScheduleError
from softdiff.oracle import GaussianMixture, OracleError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"SDT1"


class ArtifactError(ValueError):
    """Missing, malformed, or mismatched artifact."""


def write_tensor(path: str, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes())


def read_tensor(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ArtifactError(f"tensor file not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TENSOR_MAGIC:
        raise ArtifactError(f"{path}: bad tensor magic {blob[:4]!r}")
    try:
        (rank,) = struct.unpack_from("<I", blob, 4)
        dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    except struct.error as e:
        raise ArtifactError(f"{path}: truncated tensor header") from e
    offset = 8 + 8 * rank
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) - offset != expected:
        raise ArtifactError(f"{path}: payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(dims).astype(np.float64)


class ArtifactStore:
    """Reads and writes the artifacts of one run directory, stamping the config hash."""

    def __init__(self, out_dir: str, config_hash: str):
        self.out_dir = out_dir
        self.config_hash = config_hash
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    # ── JSON ──

    def write_json(self, name: str, payload: dict) -> str:
        path = self.path(name)
        payload = {**payload, "config_hash": self.config_hash}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"Wrote {path}")
        return path

    def read_json(self, name_or_path: str) -> dict:
        path = name_or_path if os.path.exists(name_or_path) else self.path(name_or_path)
        if not os.path.exists(path):
            raise ArtifactError(f"artifact not found: {path}")
        try:
            with open(path, "r") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ArtifactError(f"{path}: invalid JSON ({e})") from e

    def check_hash(self, recorded: Optional[str], what: str) -> None:
        if recorded != self.config_hash:
            raise ArtifactError(f"{what} was produced by config {recorded}, current config is {self.config_hash}")

    # ── Schedules and mixtures ──

    def save_schedule(self, schedule: Schedule, name: str = "schedule.json") -> str:
        schedule.config_hash = self.config_hash
        return self.write_json(name, schedule.to_dict())

    def load_schedule(self, path: str) -> Schedule:
        try:
            return Schedule.from_dict(self.read_json(path))
        except ScheduleError as e:
            raise ArtifactError(f"{path}: {e}") from e

    def save_mixture(self, mixture: GaussianMixture, name: str = "mixture.json") -> str:
        return self.write_json(name, mixture.to_dict())

    def load_mixture(self, path: str) -> GaussianMixture:
        try:
            return GaussianMixture.from_dict(self.read_json(path))
        except OracleError as e:
            raise ArtifactError(f"{path}: {e}") from e

    # ── Tensors ──

    def write_samples(self, samples: np.ndarray, metadata: dict, name: str = "samples.sdt") -> str:
        path = self.path(name)
        write_tensor(path, samples)
        self.write_json(os.path.splitext(name)[0] + ".json", {**metadata, "num_samples": int(samples.shape[0])})
        return path

    def read_samples(self, path: str) -> tuple[np.ndarray, dict]:
        sidecar = os.path.splitext(path)[0] + ".json"
        return read_tensor(path), self.read_json(sidecar)

    # ── CSV ──

    def write_csv(self, name: str, header: list[str], rows: Iterable[Iterable[Any]]) -> str:
        path = self.path(name)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        logger.info(f"Wrote {path}")
        return path

    def write_distances(self, thetas: np.ndarray, distances: np.ndarray, name: str = "distances.csv") -> str:
        header = ["level"] + [_fmt(t) for t in thetas]
        rows = ([theta, *row] for theta, row in zip(thetas, distances))
        return self.write_csv(name, header, rows)


def _fmt(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    if not os.path.exists(path):
        raise ArtifactError(f"CSV not found: {path}")
    with open(path, "r", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ArtifactError(f"{path}: empty CSV")
    return rows[0], rows[1:]
