"""Built-in synthetic datasets.

Nothing is downloaded. Low-dimensional sets come from a known Gaussian
mixture so the oracle applies; the 8x8 blob images give blur something to
act on, and blob_gmm is a mixture whose component means are blob images.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from softdiff.config import DatasetSpec
from softdiff.oracle import GaussianMixture

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    train: np.ndarray
    test: np.ndarray
    mixture: Optional[GaussianMixture] = None
    image_shape: Optional[tuple[int, int]] = None

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    @property
    def has_oracle(self) -> bool:
        return self.mixture is not None


def correlated_gaussian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> GaussianMixture:
    """Single Gaussian with a random mean and a well-conditioned correlated covariance."""
    a = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    cov = scale ** 2 * (a @ a.T + 0.25 * np.eye(dim))
    mean = rng.uniform(-1.0, 1.0, size=dim)
    return GaussianMixture(np.ones(1), mean[None], cov[None])


def ring_mixture(num_components: int, dim: int, spread: float, component_std: float,
                 rng: np.random.Generator) -> GaussianMixture:
    """Equal-weight isotropic components; means on a circle in 2-D, random directions otherwise."""
    if num_components < 1:
        raise DatasetError(f"need at least one component, got {num_components}")
    if dim == 2:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        angles = phase + 2.0 * np.pi * np.arange(num_components) / num_components
        means = spread * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        dirs = rng.standard_normal((num_components, dim))
        means = spread * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    covs = np.broadcast_to(component_std ** 2 * np.eye(dim), (num_components, dim, dim)).copy()
    # weights computed by division can miss sum == 1 by an ulp
    weights = np.full(num_components, 1.0 / num_components)
    weights[-1] = 1.0 - weights[:-1].sum()
    return GaussianMixture(weights, means, covs)


def blob_images(num: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Flattened size x size images, each a sum of 1-3 Gaussian bumps scaled to max 1."""
    grid = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.zeros((num, size, size))
    counts = rng.integers(1, 4, size=num)
    for i in range(num):
        for _ in range(counts[i]):
            cy, cx = rng.uniform(1.0, size - 2.0, size=2)
            width = rng.uniform(0.8, 2.0)
            amp = rng.uniform(0.5, 1.0)
            images[i] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
        images[i] /= images[i].max()
    return images.reshape(num, size * size)


def blob_mixture(num_components: int, size: int, component_std: float,
                 rng: np.random.Generator) -> GaussianMixture:
    if num_components < 1:
        raise DatasetError(f"need at least one component, got {num_components}")
    means = blob_images(num_components, size, rng)
    dim = size * size
    covs = np.broadcast_to(component_std ** 2 * np.eye(dim), (num_components, dim, dim)).copy()
    weights = np.full(num_components, 1.0 / num_components)
    weights[-1] = 1.0 - weights[:-1].sum()
    return GaussianMixture(weights, means, covs)


def make_dataset(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    """Synthesize train/test splits for one dataset spec."""
    total = spec.train_size + spec.test_size
    mixture = None
    image_shape = None

    if spec.kind == "gaussian":
        mixture = correlated_gaussian(spec.dim, rng)
    elif spec.kind == "gmm":
        mixture = ring_mixture(spec.num_components, spec.dim, spec.spread, spec.component_std, rng)
    elif spec.kind == "blob_gmm":
        mixture = blob_mixture(spec.num_components, spec.image_size, spec.component_std, rng)
        image_shape = (spec.image_size, spec.image_size)
    elif spec.kind == "blobs":
        image_shape = (spec.image_size, spec.image_size)
    else:
        raise DatasetError(f"unknown dataset kind {spec.kind!r}")

    points = mixture.sample(total, rng) if mixture is not None else blob_images(total, spec.image_size, rng)
    dataset = Dataset(spec.kind, points[:spec.train_size], points[spec.train_size:], mixture, image_shape)
    logger.info(f"Dataset {spec.kind}: dim={dataset.dim}, train={spec.train_size}, test={spec.test_size}")
    return dataset
