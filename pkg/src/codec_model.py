"""
Assembles the three trainable parts of the codec from one parameter set:
the lifting transform, the posterior synthesizer and the context model.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from codec_config import ArchitectureConfig, CodingConfig
from entropy_model import ContextModel, init_context_params
from lifting_transform import LiftingTransform, init_lifting_params
from model_params import ModelParams
from posterior import PosteriorSynthesizer, init_posterior_params

logger = logging.getLogger(__name__)


class CodecModel:
    """Transform + posterior + context model sharing one ModelParams."""

    def __init__(self, params: ModelParams, coding: Optional[CodingConfig] = None):
        self.params = params
        self.coding = coding or CodingConfig()
        self.transform = LiftingTransform.from_params(params)
        self.posterior = PosteriorSynthesizer.from_params(params)
        self.context = ContextModel.from_params(params)

    @property
    def levels(self) -> int:
        return self.params.levels

    def fingerprint(self) -> bytes:
        return self.params.fingerprint()

    @classmethod
    def initialize(cls, arch: Optional[ArchitectureConfig] = None, seed: int = 0,
                   coding: Optional[CodingConfig] = None) -> "CodecModel":
        """
        Fresh model whose transform is exactly CDF 9/7 and whose posterior and
        context heads output their neutral values (zeroed output layers).
        """
        arch = arch or ArchitectureConfig()
        rng = np.random.default_rng(seed)
        params = ModelParams(levels=arch.levels, context_size=arch.context_size,
                             architecture=arch.to_dict())
        init_lifting_params(params, rng, hidden=arch.lifting_hidden, kernel=arch.lifting_kernel)
        init_posterior_params(params, rng, arch.levels, hidden=arch.posterior_hidden,
                              kernel=arch.posterior_kernel)
        init_context_params(params, rng, context_size=arch.context_size, hidden=arch.context_hidden)
        logger.info(f"Initialised model: K={arch.levels}, {len(params)} tensors, {params.num_values()} weights")
        return cls(params, coding)

    @classmethod
    def load(cls, path: Path, coding: Optional[CodingConfig] = None) -> "CodecModel":
        return cls(ModelParams.load(path), coding)

    def save(self, path: Path) -> None:
        self.params.save(path)

    def randomize_output_layers(self, rng: np.random.Generator, scale: float = 0.1,
                                prefixes=("lift.", "post.", "ctx.")) -> None:
        """Give the zero-initialised output layers random values (self-checks and tests)."""
        for p in self.params:
            if p.identifier.startswith(tuple(prefixes)) and (".conv3." in p.identifier or ".fc3." in p.identifier):
                p.data[...] = rng.uniform(-scale, scale, size=p.shape)
