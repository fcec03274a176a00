"""
Centralized codec configuration management.

Provides a single source of truth for architecture, coding, training and
sampling settings with support for named training presets, experiments and
environment variable overrides.
"""

import os
import yaml
from pathlib import Path
from typing import Dict, Any, List, Optional
from dataclasses import dataclass, field

from pydantic import BaseModel, ConfigDict, Field, model_validator


@dataclass
class ArchitectureConfig:
    """Network sizes and scalings; copied into each model file."""
    levels: int = 4
    context_size: int = 5
    lifting_hidden: int = 16
    lifting_kernel: int = 3
    lifting_input_scale: float = 1.0 / 64
    lifting_output_gain: float = 4.0
    posterior_hidden: int = 32
    posterior_kernel: int = 3
    posterior_input_scale: float = 1.0 / 64
    context_hidden: int = 64
    context_input_scale: float = 1.0 / 64
    context_output_gain: float = 4.0

    def to_dict(self) -> Dict[str, Any]:
        """Nested form stored in model metadata."""
        return {
            "lifting": {
                "hidden": self.lifting_hidden,
                "kernel": self.lifting_kernel,
                "input_scale": self.lifting_input_scale,
                "output_gain": self.lifting_output_gain,
            },
            "posterior": {
                "hidden": self.posterior_hidden,
                "kernel": self.posterior_kernel,
                "input_scale": self.posterior_input_scale,
            },
            "context": {
                "hidden": self.context_hidden,
                "input_scale": self.context_input_scale,
                "output_gain": self.context_output_gain,
            },
        }

    @classmethod
    def from_dict(cls, levels: int, context_size: int, nested: Dict[str, Any]) -> "ArchitectureConfig":
        """Inverse of to_dict (plus K and s), e.g. from a model file's metadata."""
        arch = cls(levels=levels, context_size=context_size)
        for section in ("lifting", "posterior", "context"):
            for key, value in (nested or {}).get(section, {}).items():
                name = f"{section}_{key}"
                if hasattr(arch, name):
                    setattr(arch, name, value)
        return arch


@dataclass
class CodingConfig:
    tail_sigmas: float = 8.0
    min_radius: int = 8
    max_radius: int = 4095


@dataclass
class SamplingConfig:
    alphas: List[float] = field(default_factory=lambda: [0.0, 0.3, 0.5, 0.7, 1.0])
    seeds: int = 8
    variance_dump_gain: float = 7.0


class TrainConfig(BaseModel):
    """Validated training settings (YAML key `lambda` maps to `lambda_`)."""
    model_config = ConfigDict(populate_by_name=True, extra="ignore")

    lambda_: float = Field(default=8.0, alias="lambda", gt=0)
    steps: int = Field(default=25000, ge=0)
    warmstart_steps: int = Field(default=5000, ge=0)
    batch: int = Field(default=8, ge=1)
    patch: int = Field(default=128, ge=2)
    levels: int = Field(default=4, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    seed: int = 0
    distortion: str = "mse"
    checkpoint_every: int = Field(default=1000, ge=1)
    log_every: int = Field(default=50, ge=1)
    prefetch: int = Field(default=2, ge=1)
    description: str = ""

    @model_validator(mode="after")
    def _check_consistency(self) -> "TrainConfig":
        if self.patch % (2 ** self.levels):
            raise ValueError(f"patch {self.patch} is not divisible by 2^{self.levels}")
        if self.distortion not in ("mse", "mae"):
            raise ValueError(f"distortion must be 'mse' or 'mae', got '{self.distortion}'")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(by_alias=True)


class CodecConfigManager:
    """Manages codec configuration with preset and experiment support."""

    def __init__(self, config_path: Optional[Path] = None):
        """Initialize with config file path."""
        if config_path is None:
            # Default to config/codec.yaml relative to project root
            project_root = Path(__file__).parent.parent
            config_path = project_root / "config" / "codec.yaml"

        self.config_path = Path(config_path)
        self._config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file."""
        try:
            with open(self.config_path, 'r') as f:
                return yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise FileNotFoundError(
                f"Codec configuration file not found: {self.config_path}"
            )
        except yaml.YAMLError as e:
            raise ValueError(f"Invalid YAML in codec config: {e}")

    def get_default_settings(self) -> Dict[str, Any]:
        return self._config.get("default", {})

    def get_architecture_config(self) -> ArchitectureConfig:
        """Architecture used when initialising a new model."""
        default = self.get_default_settings()
        arch = self._config.get("architecture", {})
        lifting = arch.get("lifting", {})
        posterior = arch.get("posterior", {})
        context = arch.get("context", {})
        base = ArchitectureConfig()
        return ArchitectureConfig(
            levels=default.get("levels", base.levels),
            context_size=default.get("context_size", base.context_size),
            lifting_hidden=lifting.get("hidden", base.lifting_hidden),
            lifting_kernel=lifting.get("kernel", base.lifting_kernel),
            lifting_input_scale=lifting.get("input_scale", base.lifting_input_scale),
            lifting_output_gain=lifting.get("output_gain", base.lifting_output_gain),
            posterior_hidden=posterior.get("hidden", base.posterior_hidden),
            posterior_kernel=posterior.get("kernel", base.posterior_kernel),
            posterior_input_scale=posterior.get("input_scale", base.posterior_input_scale),
            context_hidden=context.get("hidden", base.context_hidden),
            context_input_scale=context.get("input_scale", base.context_input_scale),
            context_output_gain=context.get("output_gain", base.context_output_gain),
        )

    def get_coding_config(self) -> CodingConfig:
        return CodingConfig(**self._config.get("coding", {}))

    def get_sampling_config(self) -> SamplingConfig:
        return SamplingConfig(**self._config.get("sampling", {}))

    def get_training_config(self, preset: Optional[str] = None) -> TrainConfig:
        """Training defaults merged with a named preset."""
        training = self._config.get("training", {})
        merged = {"levels": self.get_default_settings().get("levels", 4)}
        merged.update(training.get("default", {}))

        preset = preset or self.get_default_settings().get("preset", "default")
        if preset != "default":
            presets = training.get("presets", {})
            if preset not in presets:
                raise ValueError(f"Training preset '{preset}' not found in configuration")
            merged.update(presets[preset])
        return TrainConfig(**merged)

    def get_experiment_config(self, experiment_name: str) -> Dict[str, Any]:
        """Get configuration for a specific experiment."""
        if experiment_name not in self._config.get("experiments", {}):
            raise ValueError(f"Experiment '{experiment_name}' not found in configuration")
        return dict(self._config["experiments"][experiment_name])

    def get_runtime_config(self) -> Dict[str, Any]:
        return self._config.get("runtime", {})

    def list_training_presets(self) -> Dict[str, str]:
        """List all training presets with descriptions."""
        presets = {"default": "Default training configuration"}
        for name, config in self._config.get("training", {}).get("presets", {}).items():
            presets[name] = config.get("description", "")
        return presets

    def list_available_experiments(self) -> Dict[str, str]:
        """List all available experiment configurations."""
        experiments = {}
        for name, config in self._config.get("experiments", {}).items():
            experiments[name] = config.get("description", "No description")

        return experiments


# Global instance for easy access
_config_manager = None


def get_config_manager() -> CodecConfigManager:
    """Get the global configuration manager instance (PCODEC_CONFIG selects the file)."""
    global _config_manager
    if _config_manager is None:
        override = os.getenv("PCODEC_CONFIG")
        _config_manager = CodecConfigManager(Path(override) if override else None)
    return _config_manager


def reset_config_manager() -> None:
    global _config_manager
    _config_manager = None


def get_training_config(preset: Optional[str] = None) -> TrainConfig:
    """
    Training configuration with optional preset.

    Falls back to PCODEC_TRAINING_PRESET, then to the YAML default preset.
    """
    return get_config_manager().get_training_config(preset or os.getenv("PCODEC_TRAINING_PRESET"))


def get_thread_count() -> int:
    """Worker count for batch jobs: PCODEC_THREADS, else runtime.threads, else 1."""
    value = os.getenv("PCODEC_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ValueError(f"PCODEC_THREADS must be an integer, got '{value}'")
    return max(1, int(get_config_manager().get_runtime_config().get("threads", 1)))


def use_config_file(config_path: Path) -> CodecConfigManager:
    """Replace the global manager with one reading `config_path`."""
    global _config_manager
    _config_manager = CodecConfigManager(Path(config_path))
    return _config_manager
