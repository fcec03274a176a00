"""
Tests for the training objective, the two-stage trainer and run artifacts.
"""

import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

import nn_core as nn
from codec_config import TrainConfig
from codec_errors import DataError, InvalidShapeError, TrainingDivergedError
from codec_model import CodecModel
from nn_core import Tape, Tensor
from quantization import quantize_soft
from run_manager import RunManager
from training import (METRIC_COLUMNS, PatchDataset, Trainer, compute_loss, config_hash,
                      image_objective, invertibility_error, summarize_training, train)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(**{"lambda": 8.0, "steps": 4, "warmstart_steps": 2, "batch": 2, "patch": 16,
                          "levels": 2, "lr": 1e-3, "checkpoint_every": 2, "log_every": 1})


@pytest.fixture
def run(tmp_path) -> RunManager:
    return RunManager("train", runs_dir=tmp_path / "runs")


@pytest.fixture
def patches(rng):
    return [rng.uniform(0, 255, size=(16, 16)) for _ in range(2)]


class TestTrainConfig:
    """Test validated training settings."""

    def test_lambda_alias(self):
        config = TrainConfig(**{"lambda": 4.0, "patch": 32, "levels": 2})
        assert config.lambda_ == 4.0
        assert config.to_dict()["lambda"] == 4.0

    def test_patch_must_divide_levels(self):
        with pytest.raises(ValidationError, match="not divisible"):
            TrainConfig(patch=20, levels=3)

    def test_unknown_distortion(self):
        with pytest.raises(ValidationError):
            TrainConfig(distortion="ssim")

    @pytest.mark.parametrize("field,value", [("lambda", 0.0), ("lr", -1.0), ("batch", 0)])
    def test_ranges(self, field, value):
        with pytest.raises(ValidationError):
            TrainConfig(**{field: value})

    def test_config_hash_is_stable(self, tiny_config):
        assert config_hash(tiny_config) == config_hash(TrainConfig(**tiny_config.to_dict()))
        assert config_hash(tiny_config) != config_hash(TrainConfig(**{**tiny_config.to_dict(), "lambda": 2.0}))


class TestObjective:
    """Test the per-pixel regularised loss."""

    def test_reconstruction_term_at_init_is_noise_power(self, init_model, rng):
        """With neutral heads x0 = f^-1(y + u), so the MSE is about Var(u) = 1/12."""
        plane = rng.uniform(0, 255, size=(32, 32))
        _, terms = image_objective(init_model, plane, 8.0, rng)
        assert 0.04 < terms["reg_mse"] < 0.2
        assert terms["bpp_est"] > 0

    def test_loss_combines_terms(self, init_model, rng):
        """loss = nll + MSE / N + lambda * ln2 * bpp_est, the regulariser entering with weight 1."""
        plane = rng.uniform(0, 255, size=(16, 16))
        loss, terms = image_objective(init_model, plane, 4.0, rng)
        expected = terms["nll"] + terms["reg_mse"] / plane.size + 4.0 * np.log(2.0) * terms["bpp_est"]
        assert loss.item() == pytest.approx(expected, rel=1e-9)

    def test_regulariser_is_mean_squared_error(self, init_model):
        plane = np.random.default_rng(0).uniform(0, 255, size=(16, 16))
        _, terms = image_objective(init_model, plane, 8.0, np.random.default_rng(5))

        transform = init_model.transform
        y_soft = quantize_soft(transform.forward_tensors(Tensor(plane[None]), 2), np.random.default_rng(5))
        x0 = transform.inverse_tensors(y_soft, 2).data[0]
        assert terms["reg_mse"] == pytest.approx(np.mean((plane - x0) ** 2), rel=1e-6)

    def test_higher_lambda_weights_rate_more(self, init_model):
        plane = np.random.default_rng(0).uniform(0, 255, size=(16, 16))
        low, _ = image_objective(init_model, plane, 1.0, np.random.default_rng(5))
        high, _ = image_objective(init_model, plane, 10.0, np.random.default_rng(5))
        assert high.item() > low.item()

    def test_indivisible_patch(self, init_model, rng):
        with pytest.raises(InvalidShapeError):
            image_objective(init_model, np.zeros((18, 16)), 8.0, rng)

    def test_mae_distortion(self, init_model, patches, rng):
        _, mse_terms = compute_loss(init_model, patches, 8.0, np.random.default_rng(1), "mse")
        _, mae_terms = compute_loss(init_model, patches, 8.0, np.random.default_rng(1), "mae")
        assert mae_terms["reg_mse"] != mse_terms["reg_mse"]

    def test_batch_average(self, init_model, patches):
        _, both = compute_loss(init_model, patches, 8.0, np.random.default_rng(3))
        rng = np.random.default_rng(3)
        _, first = compute_loss(init_model, patches[:1], 8.0, rng)
        _, second = compute_loss(init_model, patches[1:], 8.0, rng)
        assert both["loss"] == pytest.approx((first["loss"] + second["loss"]) / 2)


class TestGradients:
    """Test which parameters receive gradients in each stage."""

    def _gradients(self, model, patches, rng):
        with Tape():
            loss, _ = compute_loss(model, patches, 8.0, rng)
        nn.backward(loss, model.params)
        return {p.identifier: p.gradient.copy() for p in model.params}

    def test_stage_one_freezes_transform(self, init_model, tiny_config, run, patches, rng):
        trainer = Trainer(init_model, tiny_config, run)
        assert trainer.set_stage(0) == 1
        grads = self._gradients(init_model, patches, rng)
        assert all(not np.any(g) for name, g in grads.items() if name.startswith("lift."))
        assert any(np.any(g) for name, g in grads.items() if name.startswith("post."))
        assert any(np.any(g) for name, g in grads.items() if name.startswith("ctx."))

    def test_stage_two_trains_transform(self, init_model, tiny_config, run, patches, rng):
        trainer = Trainer(init_model, tiny_config, run)
        assert trainer.set_stage(tiny_config.warmstart_steps) == 2
        grads = self._gradients(init_model, patches, rng)
        assert any(np.any(grads[p.identifier]) for p in init_model.params.group("lift.") if ".conv3." in p.identifier)

    def test_full_objective_matches_finite_differences(self, random_model):
        """Every parameter group agrees with central differences on a 16x16 image.

        Low-amplitude pixels keep every coefficient probability above the floor.
        """
        plane = np.random.default_rng(2).normal(0, 0.5, size=(16, 16))
        groups = ["lift.rows.0.t_L.conv3.", "post.b0.conv3.", "post.b4.conv1.", "ctx.HL.fc3.", "ctx.HL.fc1."]
        params = [p for prefix in groups for p in random_model.params.group(prefix)]

        def loss():
            value, _ = image_objective(random_model, plane, 8.0, np.random.default_rng(9))
            return value

        errors = nn.gradient_check(loss, params, step=1e-5, samples=3, rng=np.random.default_rng(0))
        assert max(errors.values()) <= 1e-3


class TestTrainer:
    """Test the optimisation loop and its artifacts."""

    def test_fit_writes_metrics_and_checkpoints(self, init_model, tiny_config, run, image_dir):
        result = Trainer(init_model, tiny_config, run).fit(PatchDataset(image_dir, 16))
        assert list(result.metrics.columns) == METRIC_COLUMNS
        assert list(result.metrics["step"]) == [1, 2, 3, 4]
        assert [p.name for p in result.checkpoints] == ["step-000002", "step-000004"]
        assert np.all(np.isfinite(result.metrics["loss"]))
        saved = pd.read_csv(run.outputs_dir / "metrics.csv")
        assert len(saved) == 4
        state = json.loads((result.checkpoints[-1] / "state.json").read_text())
        assert state["step"] == 4
        assert state["invertibility_error"] <= 1e-9

    def test_model_changes_and_stays_invertible(self, init_model, tiny_config, run, image_dir, rng):
        before = init_model.fingerprint()
        Trainer(init_model, tiny_config, run).fit(PatchDataset(image_dir, 16))
        assert init_model.fingerprint() != before
        assert invertibility_error(init_model, 16, rng) <= 1e-9
        assert not any(p.frozen for p in init_model.params)

    def test_resume_continues_from_checkpoint(self, small_arch, tiny_config, run, image_dir):
        first = Trainer(CodecModel.initialize(small_arch, seed=0), tiny_config, run)
        first.fit(PatchDataset(image_dir, 16))

        longer = TrainConfig(**{**tiny_config.to_dict(), "steps": 6})
        second = Trainer(CodecModel.initialize(small_arch, seed=0), longer, run)
        second.resume(first.checkpoints[-1])
        assert second.step == 4
        assert second.model.fingerprint() == first.model.fingerprint()
        result = second.fit(PatchDataset(image_dir, 16))
        assert list(result.metrics["step"]) == [1, 2, 3, 4, 5, 6]

    def test_resume_from_missing_checkpoint(self, init_model, tiny_config, run, tmp_path):
        with pytest.raises(DataError):
            Trainer(init_model, tiny_config, run).resume(tmp_path / "nope")

    def test_divergence_dumps_diagnostics(self, init_model, tiny_config, run, patches, rng, mocker):
        mocker.patch("training.compute_loss",
                     return_value=(nn.Tensor([np.nan]), {"loss": float("nan"), "nll": 0.0,
                                                         "reg_mse": 0.0, "bpp_est": 0.0}))
        trainer = Trainer(init_model, tiny_config, run)
        with pytest.raises(TrainingDivergedError) as excinfo:
            trainer.train_step(patches, rng)
        dump = json.loads((run.outputs_dir / "divergence.json").read_text())
        assert dump["step"] == 0
        assert "lift.rows.0.t_L.conv3.w" in dump["parameter_norms"]
        assert excinfo.value.diagnostics["step"] == 0

    def test_level_mismatch(self, init_model, run):
        with pytest.raises(ValueError, match="K="):
            Trainer(init_model, TrainConfig(levels=3, patch=16), run)


class TestPatchDataset:
    """Test training data loading."""

    def test_loads_planes(self, image_dir, rng):
        dataset = PatchDataset(image_dir, 16)
        assert len(dataset.files) == 3
        assert len(dataset) == 2 + 3
        patch = dataset.sample(rng)
        assert patch.shape == (16, 16)
        assert len(dataset.batch(rng, 4)) == 4

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            PatchDataset(tmp_path / "missing", 16)

    def test_no_usable_images(self, image_dir):
        """Images smaller than the patch are skipped."""
        with pytest.raises(DataError, match="No usable"):
            PatchDataset(image_dir, 64)

    def test_corrupt_file_skipped(self, image_dir):
        (image_dir / "broken.png").write_bytes(b"not a png")
        assert len(PatchDataset(image_dir, 16).files) == 3


class TestTrainEntryPoint:
    def test_train_writes_report(self, init_model, tiny_config, run, image_dir):
        result = train(tiny_config, image_dir, model=init_model, run=run)
        assert (run.outputs_dir / "training_summary.md").exists()
        summary = json.loads((run.run_dir / "metadata" / "run_summary.json").read_text())
        assert summary["status"] == "completed"
        assert summary["steps"] == 4
        assert result.run_dir == run.run_dir
        snapshot = json.loads((run.run_dir / "config" / "run_config.json").read_text())
        assert snapshot["training"]["lambda"] == 8.0

    def test_summary_markdown(self):
        frame = pd.DataFrame([{"step": 1, "loss": 2.0, "nll": 1.0, "reg_mse": 0.5, "bpp_est": 0.3}])
        text = summarize_training(frame)
        assert "Steps: 1" in text
        assert "| bpp_est | 0.30000 |" in text

    def test_summary_of_empty_metrics(self):
        assert "No steps recorded" in summarize_training(pd.DataFrame(columns=METRIC_COLUMNS))
