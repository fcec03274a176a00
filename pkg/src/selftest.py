"""
Fast in-process property checks run by `pcodec selftest`.

Each check builds a tiny model so the whole suite finishes in seconds and
reports pass/fail with a one-line detail.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

import nn_core as nn
from codec import analyze, debug_hash, decode_pyramids, encode
from codec_config import ArchitectureConfig
from codec_model import CodecModel
from entropy_model import MixtureParams, coding_distribution
from image_io import Image
from lifting_transform import cdf97_forward
from posterior import posterior_log_likelihood
from range_coder import CDF_TOTAL, decode_symbols, encode_symbols, quantize_cdf

logger = logging.getLogger(__name__)

SELFTEST_ARCHITECTURE = ArchitectureConfig(levels=2, context_size=3, lifting_hidden=4,
                                           posterior_hidden=4, context_hidden=8)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check_model(seed: int, randomized: bool = True) -> CodecModel:
    model = CodecModel.initialize(SELFTEST_ARCHITECTURE, seed=seed)
    if randomized:
        model.randomize_output_layers(np.random.default_rng(seed + 1), scale=0.05)
    return model


def check_invertibility(seed: int) -> Tuple[bool, str]:
    model = _check_model(seed)
    x = np.random.default_rng(seed).uniform(0, 255, size=(32, 32))
    pyramid = model.transform.forward(x, model.levels)
    error = float(np.max(np.abs(model.transform.inverse(pyramid) - x)))
    return error < 1e-9, f"max |x - T^-1(T(x))| = {error:.2e}"


def check_cdf97_initialisation(seed: int) -> Tuple[bool, str]:
    model = _check_model(seed, randomized=False)
    x = np.random.default_rng(seed).uniform(0, 255, size=(32, 32))
    ours = model.transform.forward(x, model.levels).flatten()
    reference = cdf97_forward(x, model.levels).flatten()
    error = float(np.max(np.abs(ours - reference)))
    return error < 1e-9, f"max deviation from CDF 9/7 = {error:.2e}"


def check_log_determinant(seed: int) -> Tuple[bool, str]:
    model = _check_model(seed)
    x = np.random.default_rng(seed).uniform(0, 255, size=(8, 8))
    step = 1e-4
    jacobian = np.zeros((x.size, x.size))
    flat = x.reshape(-1)
    for i in range(x.size):
        original = flat[i]
        flat[i] = original + step
        upper = model.transform.forward(x, 1).flatten()
        flat[i] = original - step
        lower = model.transform.forward(x, 1).flatten()
        flat[i] = original
        jacobian[:, i] = (upper - lower) / (2 * step)
    sign, logdet = np.linalg.slogdet(jacobian)
    declared = model.transform.log_abs_det_jacobian()
    return sign != 0 and abs(logdet - declared) < 1e-6, f"log|det J| = {logdet:.2e} (declared {declared})"


def check_range_coder(seed: int) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    cdfs, symbols = [], []
    for _ in range(2000):
        size = int(rng.integers(2, 40))
        cdf = quantize_cdf(rng.dirichlet(np.full(size, 0.3)))
        cdfs.append(cdf)
        symbols.append(int(rng.choice(size, p=cdf.probabilities())))
    payload = encode_symbols(symbols, cdfs)
    decoded = decode_symbols(payload, cdfs)
    return decoded == symbols, f"{len(symbols)} symbols in {len(payload)} bytes"


def check_normalisation(seed: int) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        weights = rng.dirichlet(np.ones(3))
        mixture = MixtureParams(weights, rng.normal(0, 20, size=3), rng.uniform(0.01, 30, size=3))
        distribution = coding_distribution(mixture)
        frequencies = distribution.cdf.frequencies
        if int(frequencies.sum()) != CDF_TOTAL or frequencies.min() < 1:
            return False, "coded CDF does not sum to 2^16"
        worst = max(worst, abs(float(distribution.cdf.probabilities().sum()) - 1.0))
    return worst < 1e-12, f"max |sum p - 1| = {worst:.1e}"


def check_codec_round_trip(seed: int) -> Tuple[bool, str]:
    model = _check_model(seed)
    image = Image(np.random.default_rng(seed).integers(0, 256, size=(16, 20), dtype=np.uint8))
    container = encode(image, model)
    decoded = decode_pyramids(container, model)
    same = debug_hash(decoded) == debug_hash(analyze(image, model))
    return same, f"{container.bpp():.3f} bpp, quantised pyramid {'identical' if same else 'differs'}"


def check_gradients(seed: int) -> Tuple[bool, str]:
    model = _check_model(seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 255, size=(8, 8))
    q = model.transform.forward(x, model.levels)
    bands = [nn.Tensor(np.rint(b)[None]) for b in q.bands]
    targets = [nn.Tensor(np.rint(b)[None] + rng.uniform(-0.5, 0.5, size=(1,) + b.shape)) for b in q.bands]

    def loss():
        field = model.posterior.field_tensors(bands, model.levels, transform=model.transform)
        return nn.mul(posterior_log_likelihood(targets, field), -1.0)

    params = [model.params["post.b0.conv1.w"], model.params["post.b0.conv3.w"], model.params["post.b1.conv3.b"]]
    errors = nn.gradient_check(loss, params, step=1e-6, rng=rng)
    worst = max(errors.values())
    return worst < 1e-4, f"max relative gradient error = {worst:.1e}"


AVAILABLE_CHECKS: Dict[str, Callable[[int], Tuple[bool, str]]] = {
    "invertibility": check_invertibility,
    "cdf97_initialisation": check_cdf97_initialisation,
    "log_determinant": check_log_determinant,
    "range_coder": check_range_coder,
    "normalisation": check_normalisation,
    "codec_round_trip": check_codec_round_trip,
    "gradients": check_gradients,
}


def run_selftest(seed: int = 0, names: Optional[List[str]] = None) -> List[CheckResult]:
    results = []
    for name in names or list(AVAILABLE_CHECKS):
        if name not in AVAILABLE_CHECKS:
            raise ValueError(f"Unknown check '{name}'. Available: {list(AVAILABLE_CHECKS)}")
        try:
            passed, detail = AVAILABLE_CHECKS[name](seed)
        except Exception as e:
            logger.exception(f"Self-test '{name}' raised")
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(passed), detail))
    return results
