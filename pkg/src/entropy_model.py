"""
Context-conditioned Gaussian-mixture model over quantised coefficients.

Each coefficient is coded under a 3-component Gaussian mixture whose
parameters come from a small network looking at its causal neighbours in the
same subband and at the co-located block of the reconstructed LL plane of
the same level. The network is evaluated two ways from one weight set:

- predict_mixture: one coefficient at a time from an explicit ContextWindow
  (encoder and decoder both use this path so they see identical mixtures)
- ContextModel.band_log_likelihood: all coefficients of a subband at once
  with masked convolutions (differentiable rate estimate for training)
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

import nn_core as nn
from codec_errors import InvalidShapeError, SequencingError
from lifting_transform import ORIENTATIONS, SubbandPyramid, band_index, band_layout
from model_params import ModelParams, uniform_init
from nn_core import Tensor
from quantization import ALPHABET_MAX, ALPHABET_MIN, round_half_away
from range_coder import CodedCdf, quantize_cdf

logger = logging.getLogger(__name__)

MIXTURE_COMPONENTS = 3
P_MIN = 2.0 ** -16
S_MIN = 1e-3
LEVEL_FEATURE_SCALE = 0.25
LITERAL_BITS = 16


def causal_offsets(context_size: int) -> List[Tuple[int, int]]:
    """(dy, dx) of the same-subband neighbours that precede the target in raster order."""
    r = context_size // 2
    offsets = []
    for dy in range(-r, 1):
        for dx in range(-r, r + 1):
            if dy < 0 or dx < 0:
                offsets.append((dy, dx))
    return offsets


def block_offsets(context_size: int) -> List[Tuple[int, int]]:
    r = context_size // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def context_features(context_size: int) -> int:
    return len(causal_offsets(context_size)) + context_size * context_size + 1


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class MixtureParams:
    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))


@dataclass
class ContextWindow:
    """Causal same-subband neighbours plus the co-located reference block."""
    same_subband: np.ndarray
    reference: np.ndarray
    level: int
    orientation: str

    def features(self, input_scale: float) -> np.ndarray:
        return np.concatenate([
            self.same_subband * input_scale,
            self.reference * input_scale,
            [self.level * LEVEL_FEATURE_SCALE],
        ])


def _window_values(plane: np.ndarray, i: int, j: int, offsets: Sequence[Tuple[int, int]]) -> np.ndarray:
    h, w = plane.shape
    values = np.zeros(len(offsets))
    for n, (dy, dx) in enumerate(offsets):
        y, x = i + dy, j + dx
        if 0 <= y < h and 0 <= x < w:
            values[n] = plane[y, x]
    return values


def extract_context(band: np.ndarray, position: Tuple[int, int], reference: Optional[np.ndarray],
                    level: int, orientation: str, context_size: int = 5) -> ContextWindow:
    """
    Gather the context of `band[position]`.

    Only positions strictly before the target in raster order are read from
    `band`. Detail subbands need the reconstructed LL of their level.
    """
    i, j = position
    if orientation != "LL":
        if reference is None:
            raise SequencingError(
                f"Reference LL_{level} not reconstructed before decoding {orientation}_{level}"
            )
        if reference.shape != band.shape:
            raise SequencingError(
                f"Reference LL_{level} has shape {reference.shape}, subband has {band.shape}"
            )
        block = _window_values(reference, i, j, block_offsets(context_size))
    else:
        block = np.zeros(context_size * context_size)
    same = _window_values(band, i, j, causal_offsets(context_size))
    return ContextWindow(same, block, level, orientation)


# ---------------------------------------------------------------------------
# Mixture probabilities
# ---------------------------------------------------------------------------

def mixture_probabilities(values: np.ndarray, mixture: MixtureParams) -> np.ndarray:
    """Probability mass of each integer in `values` (no flooring)."""
    values = np.asarray(values, dtype=np.float64)[:, None]
    distance = np.abs(values - mixture.means[None, :])
    upper = ndtr((0.5 - distance) / mixture.scales[None, :])
    lower = ndtr((-0.5 - distance) / mixture.scales[None, :])
    return (upper - lower) @ mixture.weights


def coeff_probability(value: int, mixture: MixtureParams) -> float:
    return float(mixture_probabilities(np.array([value]), mixture)[0])


@dataclass
class CodingDistribution:
    """Windowed alphabet [low, high] plus a trailing escape symbol."""
    low: int
    high: int
    cdf: CodedCdf

    @property
    def escape_symbol(self) -> int:
        return self.high - self.low + 1

    def symbol_for(self, value: int) -> int:
        if self.low <= value <= self.high:
            return value - self.low
        return self.escape_symbol

    def value_for(self, symbol: int) -> Optional[int]:
        if symbol == self.escape_symbol:
            return None
        return self.low + symbol


def window_bounds(weights: np.ndarray, means: np.ndarray, scales: np.ndarray, tail_sigmas: float = 8.0,
                  min_radius: int = 8, max_radius: int = 4095) -> Tuple[np.ndarray, np.ndarray]:
    """
    Coding window [low, high] of one or many mixtures (components on axis 0).

    The window is centred on the rounded mixture mean and reaches
    `tail_sigmas` scales past every component mean.
    """
    center = round_half_away(np.sum(weights * means, axis=0))
    center = np.clip(center, ALPHABET_MIN, ALPHABET_MAX - 1)
    spread = np.max(np.abs(means - center) + tail_sigmas * scales, axis=0)
    radius = np.clip(np.ceil(spread), min_radius, max_radius)
    return np.maximum(center - radius, ALPHABET_MIN), np.minimum(center + radius, ALPHABET_MAX - 1)


def coding_distribution(mixture: MixtureParams, tail_sigmas: float = 8.0,
                        min_radius: int = 8, max_radius: int = 4095) -> CodingDistribution:
    """Quantised CDF over the coefficients a mixture makes plausible, plus escape."""
    low, high = window_bounds(mixture.weights, mixture.means, mixture.scales,
                              tail_sigmas, min_radius, max_radius)
    low, high = int(low), int(high)
    p = mixture_probabilities(np.arange(low, high + 1), mixture)
    escape = max(1.0 - float(p.sum()), P_MIN)
    p = np.maximum(p, P_MIN)
    return CodingDistribution(low, high, quantize_cdf(np.append(p, escape)))


def symbol_bits(distribution: CodingDistribution, value: int) -> float:
    """Ideal code length of `value` under the quantised coding CDF."""
    symbol = distribution.symbol_for(value)
    bits = -math.log2(distribution.cdf.frequencies[symbol] / 65536.0)
    if symbol == distribution.escape_symbol:
        bits += LITERAL_BITS
    return bits


# ---------------------------------------------------------------------------
# Context network
# ---------------------------------------------------------------------------

def init_context_params(params: ModelParams, rng: np.random.Generator,
                        context_size: int = 5, hidden: int = 64) -> None:
    """Add one context head per orientation (output layers zeroed)."""
    n_in = context_features(context_size)
    n_out = 3 * MIXTURE_COMPONENTS
    for orientation in ORIENTATIONS:
        prefix = f"ctx.{orientation}"
        params.add(f"{prefix}.fc1.w", uniform_init(rng, (hidden, n_in), n_in))
        params.add(f"{prefix}.fc1.b", uniform_init(rng, (hidden,), n_in))
        params.add(f"{prefix}.fc2.w", uniform_init(rng, (hidden, hidden), hidden))
        params.add(f"{prefix}.fc2.b", uniform_init(rng, (hidden,), hidden))
        params.add(f"{prefix}.fc3.w", np.zeros((n_out, hidden)))
        params.add(f"{prefix}.fc3.b", np.zeros((n_out,)))


class ContextModel:
    """Per-orientation mixture heads shared across levels."""

    def __init__(self, params: ModelParams, context_size: int = 5,
                 input_scale: float = 1.0 / 64, output_gain: float = 1.0):
        if context_size % 2 == 0:
            raise ValueError(f"Context size must be odd, got {context_size}")
        self.params = params
        self.context_size = context_size
        self.input_scale = input_scale
        self.output_gain = output_gain
        self._causal = causal_offsets(context_size)
        self._n_causal = len(self._causal)
        self._kernel_index, self._kernel_mask = self._build_kernel_layout()

    @classmethod
    def from_params(cls, params: ModelParams) -> "ContextModel":
        arch = params.architecture.get("context", {})
        return cls(params, context_size=params.context_size,
                   input_scale=arch.get("input_scale", 1.0 / 64),
                   output_gain=arch.get("output_gain", 1.0))

    def head(self, orientation: str) -> List[nn.Parameter]:
        prefix = f"ctx.{orientation}"
        return [self.params[f"{prefix}.{layer}.{kind}"] for layer in ("fc1", "fc2", "fc3") for kind in ("w", "b")]

    def _mixture_from_raw(self, raw: np.ndarray) -> MixtureParams:
        k = MIXTURE_COMPONENTS
        logits = raw[:k] - raw[:k].max()
        weights = np.exp(logits) / np.exp(logits).sum()
        means = self.output_gain * raw[k:2 * k]
        scales = self.output_gain * np.logaddexp(0.0, raw[2 * k:]) + S_MIN
        return MixtureParams(weights, means, scales)

    def predict_mixture(self, window: ContextWindow) -> MixtureParams:
        w1, b1, w2, b2, w3, b3 = self.head(window.orientation)
        h = nn.tanh(nn.affine(Tensor(window.features(self.input_scale)), w1, b1))
        h = nn.tanh(nn.affine(h, w2, b2))
        raw = nn.affine(h, w3, b3)
        return self._mixture_from_raw(raw.data)

    # -- vectorised form ------------------------------------------------

    def _build_kernel_layout(self) -> Tuple[np.ndarray, np.ndarray]:
        """Where each first-layer weight column lands in a (2, s, s) conv kernel."""
        s, r = self.context_size, self.context_size // 2
        column = np.zeros((2, s, s), dtype=np.int64)
        mask = np.zeros((2, s, s))
        for n, (dy, dx) in enumerate(self._causal):
            column[0, dy + r, dx + r] = n
            mask[0, dy + r, dx + r] = 1.0
        for n, (dy, dx) in enumerate(block_offsets(s)):
            column[1, dy + r, dx + r] = self._n_causal + n
            mask[1, dy + r, dx + r] = 1.0
        return column, mask

    def mixture_tensors(self, band: Tensor, reference: Optional[Tensor], level: int,
                        orientation: str) -> Tuple[Tensor, Tensor, Tensor]:
        """(weights, means, scales), each (3, h, w), for every coefficient of a subband."""
        w1, b1, w2, b2, w3, b3 = self.head(orientation)
        hidden, n_in = w1.shape
        if reference is None:
            reference = Tensor(np.zeros(band.shape))
        elif reference.shape != band.shape:
            raise InvalidShapeError(f"Reference {reference.shape} does not match subband {band.shape}")

        rows = np.arange(hidden)[:, None, None, None] * n_in
        kernel = nn.gather(w1, rows + self._kernel_index[None])
        level_column = nn.gather(w1, np.arange(hidden) * n_in + (n_in - 1))
        bias = nn.add(b1, nn.mul(level_column, level * LEVEL_FEATURE_SCALE))

        inputs = nn.mul(nn.concat([band, reference], axis=0), self.input_scale)
        h = nn.tanh(nn.conv2d(inputs, kernel, bias, padding="zero", mask=self._kernel_mask[None]))
        h = nn.tanh(nn.conv2d(h, nn.reshape(w2, w2.shape + (1, 1)), b2, padding="zero"))
        raw = nn.conv2d(h, nn.reshape(w3, w3.shape + (1, 1)), b3, padding="zero")

        k = MIXTURE_COMPONENTS
        weights = nn.softmax(nn.select(raw, 0, k), axis=0)
        means = nn.mul(nn.select(raw, k, 2 * k), self.output_gain)
        scales = nn.add(nn.mul(nn.softplus(nn.select(raw, 2 * k, 3 * k)), self.output_gain), S_MIN)
        return weights, means, scales

    def band_log_likelihood(self, band: Tensor, reference: Optional[Tensor], level: int,
                            orientation: str, coding=None) -> Tensor:
        """
        Sum of ln p over a subband, priced the way the range coder prices it.

        Probabilities are bounded below by P_MIN. A value outside its coding
        window (see window_bounds; `coding` supplies tail_sigmas, min_radius
        and max_radius) is charged the window's tail mass for the escape
        symbol plus LITERAL_BITS for the raw value.
        """
        weights, means, scales = self.mixture_tensors(band, reference, level, orientation)
        values = nn.repeat_channels(band, MIXTURE_COMPONENTS)
        diff = nn.sub(values, means)
        distance = nn.mul(diff, np.where(diff.data < 0, -1.0, 1.0))
        upper = nn.normal_cdf(nn.div(nn.sub(distance, 0.5), scales) * -1.0)
        lower = nn.normal_cdf(nn.div(nn.add(distance, 0.5), scales) * -1.0)
        p = nn.channel_sum(nn.mul(nn.sub(upper, lower), weights))

        window = (coding.tail_sigmas, coding.min_radius, coding.max_radius) if coding is not None else ()
        low, high = window_bounds(weights.data, means.data, scales.data, *window)
        escaped = (band.data < low) | (band.data > high)
        escapes = int(escaped.sum())
        if escapes:
            below = nn.normal_cdf(nn.div(nn.sub(means, np.broadcast_to(low - 0.5, means.shape)), scales) * -1.0)
            above = nn.normal_cdf(nn.div(nn.sub(means, np.broadcast_to(high + 0.5, means.shape)), scales))
            tail = nn.channel_sum(nn.mul(nn.add(below, above), weights))
            mask = escaped.astype(np.float64)
            p = nn.add(nn.mul(p, 1.0 - mask), nn.mul(tail, mask))
        ll = nn.sum(nn.log(nn.lower_bound(p, P_MIN)))
        if escapes:
            ll = nn.sub(ll, escapes * LITERAL_BITS * math.log(2.0))
        return ll


# ---------------------------------------------------------------------------
# Rate
# ---------------------------------------------------------------------------

def reference_tensors(bands: Sequence[Tensor], levels: int, transform) -> Dict[int, Tensor]:
    """LL_k for every level, rebuilt from the coarser subbands as the decoder would."""
    refs = {levels: bands[0]}
    LL = bands[0]
    for level in range(levels, 1, -1):
        i = band_index(levels, level, "HL")
        LL = transform.inverse_level(LL, bands[i], bands[i + 1], bands[i + 2])
        refs[level - 1] = LL
    return refs


def rate_estimate(bands, model: ContextModel, transform, levels: Optional[int] = None,
                  per_band: bool = False, coding=None):
    """
    Estimated bits of a (soft or hard) quantised pyramid.

    `bands` is a SubbandPyramid or a list of (1, h, w) Tensors; with Tensors
    recorded on a tape the result is differentiable. Returns a scalar Tensor
    of bits, or a list of per-band bit counts when `per_band` is set. Escaped
    values cost what the coder spends on them under the `coding` window.
    """
    if isinstance(bands, SubbandPyramid):
        levels = bands.levels
        bands = [Tensor(np.asarray(b, dtype=np.float64)[None]) for b in bands.bands]
    if levels is None:
        levels = (len(bands) - 1) // 3
    refs = reference_tensors(bands, levels, transform)
    totals = []
    for (level, orientation), band in zip(band_layout(levels), bands):
        reference = None if orientation == "LL" else refs[level]
        ll = model.band_log_likelihood(band, reference, level, orientation, coding)
        totals.append(nn.mul(ll, -1.0 / math.log(2.0)))
    if per_band:
        return [t.item() for t in totals]
    total = totals[0]
    for t in totals[1:]:
        total = nn.add(total, t)
    return total


def decode_order(levels: int) -> Iterator[Tuple[int, int, str]]:
    """(band index, level, orientation) in coding order; LL_k is rebuilt before level k details."""
    for index, (level, orientation) in enumerate(band_layout(levels)):
        yield index, level, orientation


def sequential_rate(q: SubbandPyramid, model: ContextModel, transform,
                    tail_sigmas: float = 8.0, min_radius: int = 8, max_radius: int = 4095) -> float:
    """Ideal bits along the coder's own per-coefficient path (quantised CDFs and escapes)."""
    bits = 0.0
    references: Dict[int, np.ndarray] = {q.levels: np.asarray(q.bands[0], dtype=np.float64)}
    for index, level, orientation in decode_order(q.levels):
        band = np.asarray(q.bands[index], dtype=np.float64)
        if orientation == "HL" and level not in references:
            references[level] = transform.partial_inverse(q.map(lambda b: b.astype(np.float64)), level)
        reference = None if orientation == "LL" else references[level]
        for i in range(band.shape[0]):
            for j in range(band.shape[1]):
                window = extract_context(band, (i, j), reference, level, orientation, model.context_size)
                dist = coding_distribution(model.predict_mixture(window), tail_sigmas, min_radius, max_radius)
                bits += symbol_bits(dist, int(band[i, j]))
    return bits
