"""
Probabilistic reconstruction from a posterior field.

Noise comes from a counter-based generator: the normal deviate used for a
coefficient depends only on (seed, global coefficient index), never on the
order in which coefficients are visited.
"""

import logging
from typing import Iterator, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from lifting_transform import SubbandPyramid
from posterior import GaussianField
from quantization import round_half_away

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.0, 0.3, 0.5, 0.7, 1.0)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_64 = 2.0 ** 64


class SampleSpec(BaseModel):
    """Variance scale, seed and number of reconstructions to draw."""
    alpha: float = Field(default=0.0, ge=0.0)
    seed: int = 0
    count: int = Field(default=1, ge=1)


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """SplitMix64 output for each counter under a 64-bit seed."""
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (counters + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def uniform01(seed: int, counters: np.ndarray) -> np.ndarray:
    """Uniforms in (0, 1] derived from (seed, counter)."""
    return (splitmix64(seed, counters).astype(np.float64) + 1.0) / (_TWO_64 + 1.0)


def standard_normals(seed: int, start: int, count: int) -> np.ndarray:
    """Normals for global indices start..start+count-1 (Box-Muller on counters 2i, 2i+1)."""
    index = np.arange(start, start + count, dtype=np.uint64)
    u1 = uniform01(seed, index * np.uint64(2))
    u2 = uniform01(seed, index * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sample_coefficients(field: GaussianField, alpha: float, seed: int,
                        index_offset: int = 0) -> SubbandPyramid:
    """
    y~ = mean + alpha * scale * eps.

    `index_offset` is the global index of the field's first coefficient, so
    the planes of a colour image draw disjoint noise.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    mean = field.mean.flatten()
    if alpha == 0:
        return SubbandPyramid.from_flat(mean, field.mean)
    eps = standard_normals(seed, index_offset, mean.size)
    return SubbandPyramid.from_flat(mean + alpha * field.scale.flatten() * eps, field.mean)


def to_pixels(plane: np.ndarray) -> np.ndarray:
    """Round and clamp a reconstructed plane to 8-bit samples."""
    return np.clip(round_half_away(plane), 0, 255).astype(np.uint8)


def reconstruct(y_tilde: SubbandPyramid, transform) -> np.ndarray:
    return to_pixels(transform.inverse(y_tilde))


def alpha_sweep(field: GaussianField, alphas: Sequence[float] = DEFAULT_ALPHAS,
                seeds: Sequence[int] = (0,), index_offset: int = 0
                ) -> Iterator[Tuple[float, int, SubbandPyramid]]:
    for alpha in alphas:
        for seed in seeds:
            yield alpha, seed, sample_coefficients(field, alpha, seed, index_offset)
