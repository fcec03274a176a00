"""
Shared pytest fixtures and test configuration for the codec test suite.
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage

from codec_config import ArchitectureConfig
from codec_model import CodecModel
from image_io import Image


@pytest.fixture
def small_arch() -> ArchitectureConfig:
    """Two levels, tiny networks, unit context gain."""
    return ArchitectureConfig(
        levels=2,
        context_size=3,
        lifting_hidden=4,
        posterior_hidden=4,
        context_hidden=8,
        context_output_gain=1.0,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_plane(rng) -> np.ndarray:
    """32x32 smooth gradient with mild noise, values in [0, 255]."""
    yy, xx = np.mgrid[0:32, 0:32]
    plane = 60 + 3 * yy + 2 * xx + rng.normal(0, 4, size=(32, 32))
    return np.clip(plane, 0, 255)


@pytest.fixture
def gray_image(smooth_plane) -> Image:
    return Image(np.rint(smooth_plane).astype(np.uint8))


@pytest.fixture
def color_image(rng) -> Image:
    """Odd-sized RGB image (exercises padding and cropping)."""
    return Image(rng.integers(0, 256, size=(13, 18, 3), dtype=np.uint8))


@pytest.fixture
def init_model(small_arch) -> CodecModel:
    """Untrained model: exact CDF 9/7 transform, neutral posterior and context heads."""
    return CodecModel.initialize(small_arch, seed=0)


@pytest.fixture
def random_model(small_arch) -> CodecModel:
    """Model with non-zero residual/output layers everywhere."""
    model = CodecModel.initialize(small_arch, seed=1)
    model.randomize_output_layers(np.random.default_rng(7), scale=0.05)
    return model


@pytest.fixture
def image_dir(tmp_path, rng) -> Path:
    """Directory of three 32x32 PNGs (two grayscale, one RGB)."""
    directory = tmp_path / "images"
    directory.mkdir()
    for n in range(2):
        pixels = rng.integers(0, 256, size=(32, 32), dtype=np.uint8)
        PILImage.fromarray(pixels).save(directory / f"gray_{n}.png")
    PILImage.fromarray(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)).save(directory / "rgb.png")
    return directory


@pytest.fixture
def temp_config_yaml():
    """Create a temporary codec YAML config file for testing."""
    import yaml

    config_data = {
        'default': {
            'levels': 2,
            'context_size': 3,
            'preset': 'default'
        },
        'architecture': {
            'lifting': {'hidden': 4, 'kernel': 3, 'input_scale': 0.015625, 'output_gain': 4.0},
            'posterior': {'hidden': 4, 'kernel': 3, 'input_scale': 0.015625},
            'context': {'hidden': 8, 'input_scale': 0.015625, 'output_gain': 1.0}
        },
        'coding': {'tail_sigmas': 8.0, 'min_radius': 8, 'max_radius': 4095},
        'training': {
            'default': {
                'lambda': 8.0,
                'steps': 4,
                'warmstart_steps': 2,
                'batch': 2,
                'patch': 16,
                'lr': 0.001,
                'checkpoint_every': 2,
                'log_every': 1
            },
            'presets': {
                'tiny': {
                    'description': 'Test preset',
                    'batch': 1,
                    'steps': 2
                },
                'broken': {
                    'patch': 18
                }
            }
        },
        'experiments': {
            'test_experiment': {
                'description': 'Test experiment',
                'preset': 'tiny',
                'lambdas': [4.0, 16.0]
            }
        },
        'sampling': {'alphas': [0.0, 0.5, 1.0], 'seeds': 2, 'variance_dump_gain': 7.0},
        'runtime': {'threads': 3, 'runs_dir': 'runs'}
    }

    with tempfile.NamedTemporaryFile(mode='w', suffix='.yaml', delete=False) as f:
        yaml.dump(config_data, f)
        temp_path = Path(f.name)

    yield temp_path

    # Cleanup
    if temp_path.exists():
        temp_path.unlink()


@pytest.fixture(autouse=True)
def reset_config_manager(monkeypatch):
    """Reset the global config manager and codec env vars before each test."""
    import codec_config
    for name in ("PCODEC_CONFIG", "PCODEC_THREADS", "PCODEC_TRAINING_PRESET"):
        monkeypatch.delenv(name, raising=False)
    codec_config._config_manager = None
    yield
    codec_config._config_manager = None
