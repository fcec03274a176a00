"""
Posterior synthesis: decoded pyramid -> factorised Gaussian field.

For every subband a small convolutional head reads the decoded values
(plus the reconstructed LL plane of the same level for detail bands) and
predicts a mean and a scale per coefficient. The mean is the decoded value
plus a residual bounded to +-0.5, so the mode never leaves the quantisation
cell it came from.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import nn_core as nn
from codec_errors import InvalidShapeError
from entropy_model import S_MIN, reference_tensors
from lifting_transform import SubbandPyramid, band_layout
from model_params import ModelParams, uniform_init
from nn_core import Tensor

logger = logging.getLogger(__name__)

RESIDUAL_BOUND = 0.5
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianField:
    mean: SubbandPyramid
    scale: SubbandPyramid

    def __post_init__(self):
        if [b.shape for b in self.mean.bands] != [b.shape for b in self.scale.bands]:
            raise InvalidShapeError("Posterior mean and scale pyramids differ in shape")

    @property
    def levels(self) -> int:
        return self.mean.levels


def band_name(level: int, orientation: str) -> str:
    return f"{orientation}_{level}"


def init_posterior_params(params: ModelParams, rng: np.random.Generator, levels: int,
                          hidden: int = 32, kernel: int = 3) -> None:
    for index in range(3 * levels + 1):
        prefix = f"post.b{index}"
        params.add(f"{prefix}.conv1.w", uniform_init(rng, (hidden, 2, kernel, kernel), 2 * kernel * kernel))
        params.add(f"{prefix}.conv1.b", uniform_init(rng, (hidden,), 2 * kernel * kernel))
        params.add(f"{prefix}.conv2.w", uniform_init(rng, (hidden, hidden, kernel, kernel), hidden * kernel * kernel))
        params.add(f"{prefix}.conv2.b", uniform_init(rng, (hidden,), hidden * kernel * kernel))
        params.add(f"{prefix}.conv3.w", np.zeros((2, hidden, kernel, kernel)))
        params.add(f"{prefix}.conv3.b", np.zeros((2,)))


class PosteriorSynthesizer:
    """g_s: one convolutional head per subband."""

    def __init__(self, params: ModelParams, input_scale: float = 1.0 / 64):
        self.params = params
        self.input_scale = input_scale

    @classmethod
    def from_params(cls, params: ModelParams) -> "PosteriorSynthesizer":
        arch = params.architecture.get("posterior", {})
        return cls(params, input_scale=arch.get("input_scale", 1.0 / 64))

    def _head(self, index: int):
        prefix = f"post.b{index}"
        return [(self.params[f"{prefix}.conv{i}.w"], self.params[f"{prefix}.conv{i}.b"]) for i in (1, 2, 3)]

    def band_field(self, index: int, band: Tensor, reference: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
        if reference is None:
            reference = Tensor(np.zeros(band.shape))
        h = nn.mul(nn.concat([band, reference], axis=0), self.input_scale)
        layers = self._head(index)
        for n, (w, b) in enumerate(layers):
            h = nn.conv2d(h, w, b, padding="reflect")
            if n < len(layers) - 1:
                h = nn.tanh(h)
        mean = nn.add(band, nn.mul(nn.tanh(nn.select(h, 0, 1)), RESIDUAL_BOUND))
        scale = nn.add(nn.softplus(nn.select(h, 1, 2)), S_MIN)
        return mean, scale

    def field_tensors(self, bands: Sequence[Tensor], levels: int,
                      references: Optional[Dict[int, Tensor]] = None,
                      transform=None) -> Tuple[List[Tensor], List[Tensor]]:
        if references is None:
            references = reference_tensors(bands, levels, transform)
        means, scales = [], []
        for index, ((level, orientation), band) in enumerate(zip(band_layout(levels), bands)):
            reference = None if orientation == "LL" else references[level]
            mean, scale = self.band_field(index, band, reference)
            means.append(mean)
            scales.append(scale)
        return means, scales


def predict_posterior(q: SubbandPyramid, synthesizer: PosteriorSynthesizer, transform) -> GaussianField:
    """GaussianField for a decoded pyramid (deterministic)."""
    bands = [Tensor(np.asarray(b, dtype=np.float64)[None]) for b in q.bands]
    means, scales = synthesizer.field_tensors(bands, q.levels, transform=transform)
    return GaussianField(
        SubbandPyramid(q.levels, [m.data[0] for m in means]),
        SubbandPyramid(q.levels, [s.data[0] for s in scales]),
    )


def gaussian_log_likelihood(y: Tensor, mean: Tensor, scale: Tensor) -> Tensor:
    """Sum of log N(y | mean, scale) over all entries."""
    z = nn.div(nn.sub(y, mean), scale)
    per_entry = nn.add(nn.add(nn.mul(nn.square(z), -0.5), nn.neg(nn.log(scale))), -_HALF_LOG_2PI)
    return nn.sum(per_entry)


def posterior_log_likelihood(y: Union[SubbandPyramid, Sequence[Tensor]],
                             field: Union[GaussianField, Tuple[Sequence[Tensor], Sequence[Tensor]]]):
    """log q(y | field) summed over every coefficient; float for arrays, Tensor for tensors."""
    if isinstance(y, SubbandPyramid):
        if not isinstance(field, GaussianField):
            raise TypeError("Array pyramids need a GaussianField")
        if [b.shape for b in y.bands] != [b.shape for b in field.mean.bands]:
            raise InvalidShapeError("Pyramid and posterior field differ in shape")
        y_flat = y.flatten()
        mu = field.mean.flatten()
        s = field.scale.flatten()
        return float(np.sum(-0.5 * ((y_flat - mu) / s) ** 2 - np.log(s) - _HALF_LOG_2PI))

    means, scales = field
    total = None
    for band, mean, scale in zip(y, means, scales):
        term = gaussian_log_likelihood(band, mean, scale)
        total = term if total is None else nn.add(total, term)
    return total


def field_statistics(field: GaussianField) -> List[Dict[str, float]]:
    """Per-subband summary of the posterior scales."""
    rows = []
    for (level, orientation), mean, scale in zip(field.mean.layout, field.mean.bands, field.scale.bands):
        rows.append({
            "band": band_name(level, orientation),
            "level": level,
            "orientation": orientation,
            "mean_scale": float(scale.mean()),
            "std_scale": float(scale.std()),
            "max_scale": float(scale.max()),
        })
    return rows
