"""
Exactly reversible wavelet-like transform built from neural lifting steps.

One decomposition level splits a plane by rows, runs two lifting pairs and a
scaling step, then repeats the same on the columns of each half, giving the
LL, HL, LH and HH subbands. LL is decomposed again K times:

    pyramid = [LL_K, HL_K, LH_K, HH_K, HL_{K-1}, ..., HL_1, LH_1, HH_1]

Every lifting operator is the classical CDF 9/7 step plus a learned residual
network whose last layer starts at zero, so an untrained model computes the
CDF 9/7 transform exactly. Inversion subtracts the identical operator
outputs, which makes the transform invertible for any weights.

The classical transform (cdf97_forward / cdf97_inverse) is implemented
separately on the interleaved signal and is used as an oracle and baseline.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

import nn_core as nn
from codec_errors import InvalidShapeError
from model_params import ModelParams, uniform_init
from nn_core import Tensor

logger = logging.getLogger(__name__)

# CDF 9/7 lifting factorisation
CDF97_ALPHA = -1.586134342
CDF97_BETA = -0.052980118
CDF97_GAMMA = 0.882911076
CDF97_DELTA = 0.443506852
CDF97_ZETA = 1.230174105

ORIENTATIONS = ("LL", "HL", "LH", "HH")
STAGES = ("rows", "cols_low", "cols_high")
PAIR_CONSTANTS = ((CDF97_ALPHA, CDF97_BETA), (CDF97_GAMMA, CDF97_DELTA))

PlaneLike = Union[np.ndarray, Tensor]


# ---------------------------------------------------------------------------
# Pyramid container
# ---------------------------------------------------------------------------

def band_layout(levels: int) -> List[Tuple[int, str]]:
    """(level, orientation) of every subband in pyramid order."""
    layout = [(levels, "LL")]
    for level in range(levels, 0, -1):
        layout.extend((level, o) for o in ("HL", "LH", "HH"))
    return layout


def band_index(levels: int, level: int, orientation: str) -> int:
    if orientation == "LL":
        if level != levels:
            raise ValueError(f"Only LL_{levels} is stored in a {levels}-level pyramid")
        return 0
    return 1 + 3 * (levels - level) + ("HL", "LH", "HH").index(orientation)


@dataclass
class SubbandPyramid:
    """The 3K+1 subbands of one plane, each a 2-D float array."""
    levels: int
    bands: List[np.ndarray]

    def __post_init__(self):
        if len(self.bands) != 3 * self.levels + 1:
            raise InvalidShapeError(
                f"A {self.levels}-level pyramid needs {3 * self.levels + 1} subbands, got {len(self.bands)}"
            )
        for (level, orientation), band in zip(band_layout(self.levels), self.bands):
            if band.ndim != 2:
                raise InvalidShapeError(f"Subband {orientation}_{level} is not 2-D")
        lowest = self.bands[0].shape
        for (level, orientation), band in zip(band_layout(self.levels), self.bands):
            scale = 2 ** (self.levels - level)
            expected = (lowest[0] * scale, lowest[1] * scale)
            if band.shape != expected:
                raise InvalidShapeError(
                    f"Subband {orientation}_{level} has shape {band.shape}, expected {expected}"
                )

    @property
    def layout(self) -> List[Tuple[int, str]]:
        return band_layout(self.levels)

    @property
    def image_shape(self) -> Tuple[int, int]:
        h, w = self.bands[0].shape
        return h * 2 ** self.levels, w * 2 ** self.levels

    def band(self, level: int, orientation: str) -> np.ndarray:
        return self.bands[band_index(self.levels, level, orientation)]

    def num_coefficients(self) -> int:
        return int(sum(b.size for b in self.bands))

    def flatten(self) -> np.ndarray:
        return np.concatenate([b.reshape(-1) for b in self.bands])

    def map(self, fn) -> "SubbandPyramid":
        return SubbandPyramid(self.levels, [fn(b) for b in self.bands])

    def copy(self) -> "SubbandPyramid":
        return self.map(np.copy)

    @classmethod
    def zeros(cls, height: int, width: int, levels: int) -> "SubbandPyramid":
        bands = []
        for level, _ in band_layout(levels):
            bands.append(np.zeros((height >> level, width >> level)))
        return cls(levels, bands)

    @classmethod
    def from_flat(cls, values: np.ndarray, like: "SubbandPyramid") -> "SubbandPyramid":
        bands, offset = [], 0
        for b in like.bands:
            bands.append(np.asarray(values[offset:offset + b.size], dtype=np.float64).reshape(b.shape))
            offset += b.size
        return cls(like.levels, bands)


# ---------------------------------------------------------------------------
# Neural lifting operators
# ---------------------------------------------------------------------------

def init_lifting_params(params: ModelParams, rng: np.random.Generator,
                        hidden: int = 16, kernel: int = 3) -> None:
    """Add all lifting operator weights to `params` (residual output layers zeroed)."""
    for stage in STAGES:
        for pair in range(len(PAIR_CONSTANTS)):
            for role in ("t_L", "t_H"):
                prefix = f"lift.{stage}.{pair}.{role}"
                params.add(f"{prefix}.conv1.w", uniform_init(rng, (hidden, 1, kernel, kernel), kernel * kernel))
                params.add(f"{prefix}.conv1.b", uniform_init(rng, (hidden,), kernel * kernel))
                params.add(f"{prefix}.conv2.w", uniform_init(rng, (hidden, hidden, kernel, kernel), hidden * kernel * kernel))
                params.add(f"{prefix}.conv2.b", uniform_init(rng, (hidden,), hidden * kernel * kernel))
                params.add(f"{prefix}.conv3.w", np.zeros((1, hidden, kernel, kernel)))
                params.add(f"{prefix}.conv3.b", np.zeros((1,)))


class LiftingOperator:
    """
    t(v) = c * neighbour_sum(v) + gain * net(scale * v)

    Operates on (1, n, W) planes and lifts along axis 1. The predict
    operator (t_L) looks at the next sample, the update operator (t_H) at the
    previous one, both with edge replication.
    """

    def __init__(self, params: ModelParams, prefix: str, coefficient: float,
                 direction: str, input_scale: float, output_gain: float):
        self.prefix = prefix
        self.coefficient = coefficient
        self.direction = direction
        self.input_scale = input_scale
        self.output_gain = output_gain
        self.layers = [(params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"]) for i in (1, 2, 3)]

    def _residual_is_zero(self) -> bool:
        w3, b3 = self.layers[-1]
        if np.any(w3.data) or np.any(b3.data):
            return False
        # an all-zero output layer still needs a graph when it is being trained
        return nn.active_tape() is None or not any(w.requires_grad or b.requires_grad for w, b in self.layers)

    def __call__(self, v: Tensor) -> Tensor:
        base = nn.mul(nn.neighbor_sum(v, axis=1, direction=self.direction), self.coefficient)
        if self._residual_is_zero():
            return base
        h = nn.mul(v, self.input_scale)
        for i, (w, b) in enumerate(self.layers):
            h = nn.conv2d(h, w, b, padding="reflect")
            if i < len(self.layers) - 1:
                h = nn.activation(h, "tanh")
        return nn.add(base, nn.mul(h, self.output_gain))


class LiftingOperatorPair:
    """Predict (t_L) and update (t_H) operators shared by forward and inverse."""

    def __init__(self, t_L: LiftingOperator, t_H: LiftingOperator):
        self.t_L = t_L
        self.t_H = t_H

    def lift_forward(self, L: Tensor, H: Tensor) -> Tuple[Tensor, Tensor]:
        if L.shape != H.shape:
            raise InvalidShapeError(f"lift_forward: L {L.shape} and H {H.shape} differ")
        H = nn.add(H, self.t_L(L))
        L = nn.add(L, self.t_H(H))
        return L, H

    def lift_inverse(self, L: Tensor, H: Tensor) -> Tuple[Tensor, Tensor]:
        if L.shape != H.shape:
            raise InvalidShapeError(f"lift_inverse: L {L.shape} and H {H.shape} differ")
        L = nn.sub(L, self.t_H(H))
        H = nn.sub(H, self.t_L(L))
        return L, H


class LiftingStage:
    """Split along axis 1, two lifting pairs, then the unit-determinant scaling."""

    def __init__(self, pairs: Sequence[LiftingOperatorPair]):
        self.pairs = list(pairs)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if x.shape[1] % 2:
            raise InvalidShapeError(f"Cannot split {x.shape[1]} rows into even/odd halves")
        L, H = split_rows(x)
        for pair in self.pairs:
            L, H = pair.lift_forward(L, H)
        return nn.div(L, CDF97_ZETA), nn.mul(H, CDF97_ZETA)

    def inverse(self, L: Tensor, H: Tensor) -> Tensor:
        L, H = nn.mul(L, CDF97_ZETA), nn.div(H, CDF97_ZETA)
        for pair in reversed(self.pairs):
            L, H = pair.lift_inverse(L, H)
        return interleave_rows(L, H)


def split_rows(x: PlaneLike) -> Tuple[PlaneLike, PlaneLike]:
    """Even rows (L) and odd rows (H). Accepts (H, W) arrays or (C, H, W) tensors."""
    if isinstance(x, np.ndarray):
        if x.ndim != 2 or x.shape[0] % 2:
            raise InvalidShapeError(f"split_rows needs a 2-D array with an even row count, got {x.shape}")
        return x[0::2].copy(), x[1::2].copy()
    if x.shape[1] % 2:
        raise InvalidShapeError(f"split_rows needs an even row count, got {x.shape}")
    return nn.take_phase(x, 1, 0), nn.take_phase(x, 1, 1)


def interleave_rows(L: PlaneLike, H: PlaneLike) -> PlaneLike:
    if isinstance(L, np.ndarray):
        if L.shape != H.shape:
            raise InvalidShapeError(f"interleave_rows: {L.shape} vs {H.shape}")
        out = np.empty((2 * L.shape[0],) + L.shape[1:])
        out[0::2], out[1::2] = L, H
        return out
    return nn.interleave(L, H, axis=1)


# ---------------------------------------------------------------------------
# Learned transform
# ---------------------------------------------------------------------------

class LiftingTransform:
    """f_a and its inverse for a given parameter set."""

    def __init__(self, params: ModelParams, input_scale: float = 1.0 / 64, output_gain: float = 4.0):
        self.params = params
        self.stages: Dict[str, LiftingStage] = {}
        for stage in STAGES:
            pairs = []
            for pair, (c_predict, c_update) in enumerate(PAIR_CONSTANTS):
                prefix = f"lift.{stage}.{pair}"
                pairs.append(LiftingOperatorPair(
                    LiftingOperator(params, f"{prefix}.t_L", c_predict, "next", input_scale, output_gain),
                    LiftingOperator(params, f"{prefix}.t_H", c_update, "prev", input_scale, output_gain),
                ))
            self.stages[stage] = LiftingStage(pairs)

    @classmethod
    def from_params(cls, params: ModelParams) -> "LiftingTransform":
        arch = params.architecture.get("lifting", {})
        return cls(params, input_scale=arch.get("input_scale", 1.0 / 64),
                   output_gain=arch.get("output_gain", 4.0))

    @staticmethod
    def log_abs_det_jacobian() -> float:
        """Every step is a lifting step or a reciprocal scaling pair."""
        return 0.0

    def forward_level(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        L, H = self.stages["rows"].forward(x)
        low_even, low_odd = self.stages["cols_low"].forward(nn.transpose_hw(L))
        high_even, high_odd = self.stages["cols_high"].forward(nn.transpose_hw(H))
        return (nn.transpose_hw(low_even), nn.transpose_hw(low_odd),
                nn.transpose_hw(high_even), nn.transpose_hw(high_odd))

    def inverse_level(self, LL: Tensor, HL: Tensor, LH: Tensor, HH: Tensor) -> Tensor:
        """Reconstruct LL_{k-1} from the four level-k subbands."""
        for name, band in (("HL", HL), ("LH", LH), ("HH", HH)):
            if band.shape != LL.shape:
                raise InvalidShapeError(f"inverse_level: {name} {band.shape} does not match LL {LL.shape}")
        L = nn.transpose_hw(self.stages["cols_low"].inverse(nn.transpose_hw(LL), nn.transpose_hw(HL)))
        H = nn.transpose_hw(self.stages["cols_high"].inverse(nn.transpose_hw(LH), nn.transpose_hw(HH)))
        return self.stages["rows"].inverse(L, H)

    def forward_tensors(self, x: Tensor, levels: int) -> List[Tensor]:
        _check_divisible(x.shape[1:], levels)
        details = []
        LL = x
        for _ in range(levels):
            LL, HL, LH, HH = self.forward_level(LL)
            details.append((HL, LH, HH))
        bands = [LL]
        for HL, LH, HH in reversed(details):
            bands.extend((HL, LH, HH))
        return bands

    def inverse_tensors(self, bands: Sequence[Tensor], levels: int, stop_level: int = 0) -> Tensor:
        if len(bands) != 3 * levels + 1:
            raise InvalidShapeError(f"Expected {3 * levels + 1} subbands, got {len(bands)}")
        LL = bands[0]
        for level in range(levels, stop_level, -1):
            i = band_index(levels, level, "HL")
            LL = self.inverse_level(LL, bands[i], bands[i + 1], bands[i + 2])
        return LL

    def forward(self, x: PlaneLike, levels: int) -> SubbandPyramid:
        bands = self.forward_tensors(_as_plane_tensor(x), levels)
        return SubbandPyramid(levels, [b.data[0] for b in bands])

    def inverse(self, pyramid: SubbandPyramid) -> np.ndarray:
        bands = [Tensor(b[None]) for b in pyramid.bands]
        return self.inverse_tensors(bands, pyramid.levels).data[0]

    def partial_inverse(self, pyramid: SubbandPyramid, level: int) -> np.ndarray:
        """LL_level reconstructed from the subbands of levels > `level`."""
        if not 0 <= level <= pyramid.levels:
            raise ValueError(f"Level {level} outside 0..{pyramid.levels}")
        bands = [Tensor(b[None]) for b in pyramid.bands]
        return self.inverse_tensors(bands, pyramid.levels, stop_level=level).data[0]


def forward_transform(x: PlaneLike, levels: int, params: ModelParams) -> SubbandPyramid:
    return LiftingTransform.from_params(params).forward(x, levels)


def inverse_transform(pyramid: SubbandPyramid, params: ModelParams) -> np.ndarray:
    return LiftingTransform.from_params(params).inverse(pyramid)


def _as_plane_tensor(x: PlaneLike) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.ndim != 3 or x.shape[0] != 1:
            raise InvalidShapeError(f"Expected a (1, H, W) plane, got {x.shape}")
        return x
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidShapeError(f"Expected a 2-D plane, got shape {x.shape}")
    return Tensor(x[None])


def _check_divisible(shape: Tuple[int, ...], levels: int) -> None:
    block = 2 ** levels
    if levels < 1 or any(d % block for d in shape):
        raise InvalidShapeError(f"Plane {tuple(shape)} is not divisible by 2^{levels}; pad first")


# ---------------------------------------------------------------------------
# Classical CDF 9/7 (oracle and baseline)
# ---------------------------------------------------------------------------

_CDF97_STEPS = ((CDF97_ALPHA, 1), (CDF97_BETA, 0), (CDF97_GAMMA, 1), (CDF97_DELTA, 0))


def _symmetric_neighbours(s: np.ndarray, parity: int) -> np.ndarray:
    """s[i-1] + s[i+1] for i = parity, parity+2, ... with whole-sample symmetric extension."""
    n = s.shape[0]
    padded = np.concatenate([s[1:2], s, s[n - 2:n - 1]], axis=0)
    count = len(range(parity, n, 2))
    left = padded[parity:parity + 2 * count:2]
    right = padded[parity + 2:parity + 2 + 2 * count:2]
    return left + right


def _cdf97_analysis(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    s = np.array(x, dtype=np.float64)
    if s.shape[0] % 2:
        raise InvalidShapeError(f"CDF 9/7 needs an even length, got {s.shape[0]}")
    for coefficient, parity in _CDF97_STEPS:
        s[parity::2] += coefficient * _symmetric_neighbours(s, parity)
    return s[0::2] / CDF97_ZETA, s[1::2] * CDF97_ZETA


def _cdf97_synthesis(low: np.ndarray, high: np.ndarray) -> np.ndarray:
    s = np.empty((2 * low.shape[0],) + low.shape[1:])
    s[0::2] = low * CDF97_ZETA
    s[1::2] = high / CDF97_ZETA
    for coefficient, parity in reversed(_CDF97_STEPS):
        s[parity::2] -= coefficient * _symmetric_neighbours(s, parity)
    return s


def cdf97_forward(x: np.ndarray, levels: int) -> SubbandPyramid:
    x = np.asarray(x, dtype=np.float64)
    _check_divisible(x.shape, levels)
    details = []
    LL = x
    for _ in range(levels):
        L, H = _cdf97_analysis(LL)
        LL, HL = (b.T for b in _cdf97_analysis(L.T))
        LH, HH = (b.T for b in _cdf97_analysis(H.T))
        details.append((HL, LH, HH))
    bands = [LL]
    for HL, LH, HH in reversed(details):
        bands.extend((HL, LH, HH))
    return SubbandPyramid(levels, bands)


def cdf97_inverse(pyramid: SubbandPyramid) -> np.ndarray:
    LL = pyramid.bands[0]
    for level in range(pyramid.levels, 0, -1):
        HL, LH, HH = (pyramid.band(level, o) for o in ("HL", "LH", "HH"))
        L = _cdf97_synthesis(LL.T, HL.T).T
        H = _cdf97_synthesis(LH.T, HH.T).T
        LL = _cdf97_synthesis(L, H)
    return LL
