"""
Tests for the rate/fidelity and diversity analyses.
"""

import json

import numpy as np
import pytest

from evaluation import (CodecEvaluator, baseline_model, evaluate_alpha_sweep,
                        evaluate_rate_distortion, evaluate_variance_vs_rate, high_frequency_energy,
                        load_images, save_evaluation_results)
from image_io import Image


@pytest.fixture
def images(gray_image, image_dir):
    return [("gray", gray_image)] + load_images(sorted(image_dir.glob("rgb*.png")))


class TestHelpers:
    def test_flat_image_has_no_detail_energy(self):
        assert high_frequency_energy(Image(np.full((16, 16), 90, dtype=np.uint8))) < 1e-12

    def test_checkerboard_has_detail_energy(self):
        pixels = (np.indices((16, 16)).sum(axis=0) % 2 * 255).astype(np.uint8)
        assert high_frequency_energy(Image(pixels)) > 1000

    def test_odd_sizes_are_trimmed(self, color_image):
        assert high_frequency_energy(color_image) > 0

    def test_baseline_shares_architecture(self, random_model):
        baseline = baseline_model(random_model)
        assert baseline.levels == random_model.levels
        assert baseline.params.architecture == random_model.params.architecture
        assert baseline.fingerprint() != random_model.fingerprint()


class TestAnalyses:
    """Test each analysis frame."""

    def test_rate_distortion(self, init_model, images):
        frame = evaluate_rate_distortion(init_model, images)
        assert list(frame["image"]) == ["gray", "rgb.png"]
        assert np.all(frame["model_bpp"] > 0)
        # an untrained model is the baseline
        np.testing.assert_allclose(frame["model_bpp"], frame["baseline_bpp"])

    def test_alpha_sweep(self, init_model, gray_image):
        frame = evaluate_alpha_sweep(init_model, [("gray", gray_image)], alphas=(1.0, 0.0), seeds=(0, 1))
        assert list(frame["alpha"]) == [0.0, 1.0]
        assert list(frame["samples"]) == [1, 2]
        assert frame["bpp"].nunique() == 1
        assert frame["best_alpha"].iloc[0] in (0.0, 1.0)
        assert frame["mse"].iloc[1] > frame["mse"].iloc[0]

    def test_variance_vs_rate(self, init_model, random_model, gray_image):
        frame = evaluate_variance_vs_rate({"a": init_model, "b": random_model}, [("gray", gray_image)])
        assert list(frame["model"]) == ["a", "b"]
        assert np.all(frame["mean_scale"] > 0)


class TestCodecEvaluator:
    """Test analysis registry and summary."""

    def test_run_and_summarize(self, init_model, images, tmp_path):
        evaluator = CodecEvaluator(init_model, alphas=(0.0, 0.5), seeds=(0,))
        results = evaluator.run_analyses(images)
        assert set(results) == {"rate_distortion", "alpha_sweep", "variance_vs_rate"}

        summary = evaluator.summarize(results)
        assert summary["rate_distortion"]["images"] == 2
        assert set(summary["alpha_sweep"]["mean_mse_by_alpha"]) == {"0.0", "0.5"}
        assert "model" in summary["variance_vs_rate"]

        path = save_evaluation_results(tmp_path / "eval", results, summary)
        assert json.loads(path.read_text())["rate_distortion"]["images"] == 2
        assert (tmp_path / "eval" / "alpha_sweep.csv").exists()

    def test_subset(self, init_model, gray_image):
        results = CodecEvaluator(init_model).run_analyses([("gray", gray_image)], ["variance_vs_rate"])
        assert list(results) == ["variance_vs_rate"]
        assert "rate_distortion" not in CodecEvaluator.summarize(results)

    def test_unknown_analysis(self, init_model, gray_image):
        with pytest.raises(ValueError, match="Unknown analyses"):
            CodecEvaluator(init_model).run_analyses([("gray", gray_image)], ["lpips"])
