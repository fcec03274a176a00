"""
Quantization of transform coefficients.

Inference rounds half away from zero onto the signed 16-bit alphabet;
training replaces rounding with additive uniform noise whose gradient is the
identity (straight-through).
"""

import logging
from typing import Dict, Sequence, Union

import numpy as np

import nn_core as nn
from codec_errors import RangeOverflowError
from lifting_transform import SubbandPyramid
from nn_core import Tensor

logger = logging.getLogger(__name__)

ALPHABET_MIN = -(2 ** 15)
ALPHABET_MAX = 2 ** 15  # exclusive


def round_half_away(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize_hard(y: SubbandPyramid) -> SubbandPyramid:
    """Round every coefficient to the nearest integer, ties away from zero."""
    bands = []
    for (level, orientation), band in zip(y.layout, y.bands):
        if not np.all(np.isfinite(band)):
            raise RangeOverflowError(f"Non-finite coefficient in subband {orientation}_{level}")
        q = round_half_away(band)
        if q.size and (q.min() < ALPHABET_MIN or q.max() >= ALPHABET_MAX):
            logger.error(f"Subband {orientation}_{level} spans [{q.min():.0f}, {q.max():.0f}]")
            raise RangeOverflowError(
                f"Coefficient outside [{ALPHABET_MIN}, {ALPHABET_MAX}) in subband {orientation}_{level}"
            )
        bands.append(q.astype(np.int64))
    return SubbandPyramid(y.levels, bands)


def dequantize(q: SubbandPyramid) -> SubbandPyramid:
    return q.map(lambda b: b.astype(np.float64))


def quantize_soft(y: Union[SubbandPyramid, Tensor, Sequence[Tensor]],
                  rng: np.random.Generator):
    """
    Training surrogate: y + u with u ~ U(-0.5, 0.5) per coefficient.

    Tensors keep their graph connection (the noise is a constant), so the
    gradient with respect to y is the identity.
    """
    if isinstance(y, SubbandPyramid):
        return y.map(lambda b: b + rng.uniform(-0.5, 0.5, size=b.shape))
    if isinstance(y, Tensor):
        return nn.add(y, rng.uniform(-0.5, 0.5, size=y.shape))
    return [quantize_soft(t, rng) for t in y]


def quantization_error_stats(y: SubbandPyramid, q: SubbandPyramid) -> Dict[str, float]:
    diff = np.abs(y.flatten() - q.flatten())
    return {
        "max_abs_error": float(diff.max()) if diff.size else 0.0,
        "mean_abs_error": float(diff.mean()) if diff.size else 0.0,
        "nonzero_fraction": float(np.count_nonzero(q.flatten()) / max(q.num_coefficients(), 1)),
    }
