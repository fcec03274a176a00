"""
Training of all codec parameters under the regularised objective

    loss = -[ log q(y | field(y_soft)) - d(x, x0) + lambda * ln q(y_soft) ] / N

where y = f(x), y_soft is y plus uniform noise, field is the posterior
predicted from y_soft, x0 = f^-1(field mean), d is the mean squared (or
absolute) pixel error with weight 1 and N is the pixel count. The
Jacobian term vanishes for a lifting transform.

Two stages: the transform is frozen at CDF 9/7 for the first
`warmstart_steps` steps, then everything trains jointly.
"""

import hashlib
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import nn_core as nn
from codec_config import TrainConfig, get_config_manager
from codec_errors import DataError, InvalidShapeError, TrainingDivergedError
from codec_model import CodecModel
from entropy_model import reference_tensors
from image_io import load_image
from lifting_transform import band_layout
from nn_core import AdamState, Tape, Tensor
from posterior import posterior_log_likelihood
from quantization import quantize_soft
from run_manager import RunManager

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "loss", "nll", "reg_mse", "bpp_est"]
INVERTIBILITY_TOLERANCE = 1e-9
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class PatchDataset:
    """Image planes from a directory, served as random augmented patches."""

    def __init__(self, data_dir: Path, patch: int):
        self.data_dir = Path(data_dir)
        self.patch = patch
        self.planes: List[np.ndarray] = []
        self.files: List[str] = []

        if not self.data_dir.is_dir():
            raise DataError(f"Dataset directory not found: {self.data_dir}")
        for path in sorted(self.data_dir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                image = load_image(path)
            except DataError as e:
                logger.warning(f"Skipping {path.name}: {e}")
                continue
            if image.height < patch or image.width < patch:
                logger.warning(f"Skipping {path.name}: smaller than {patch}x{patch}")
                continue
            self.planes.extend(image.planes())
            self.files.append(path.name)

        if not self.planes:
            raise DataError(f"No usable training images in {self.data_dir}")
        logger.info(f"Loaded {len(self.files)} images ({len(self.planes)} planes) from {self.data_dir}")

    def __len__(self) -> int:
        return len(self.planes)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Random crop with random horizontal/vertical flips."""
        plane = self.planes[rng.integers(len(self.planes))]
        top = rng.integers(plane.shape[0] - self.patch + 1)
        left = rng.integers(plane.shape[1] - self.patch + 1)
        crop = plane[top:top + self.patch, left:left + self.patch]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        if rng.random() < 0.5:
            crop = crop[::-1, :]
        return np.ascontiguousarray(crop)

    def batch(self, rng: np.random.Generator, size: int) -> List[np.ndarray]:
        return [self.sample(rng) for _ in range(size)]


class BatchPrefetcher:
    """Background thread preparing batches while the optimizer runs."""

    def __init__(self, dataset: PatchDataset, batch_size: int, seed: int, depth: int = 2):
        self.dataset = dataset
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._queue: "queue.Queue[List[np.ndarray]]" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="batch-prefetch", daemon=True)
        self._thread.start()

    def _run(self):
        while not self._stop.is_set():
            batch = self.dataset.batch(self._rng, self.batch_size)
            while not self._stop.is_set():
                try:
                    self._queue.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def next(self) -> List[np.ndarray]:
        return self._queue.get()

    def close(self):
        self._stop.set()
        self._thread.join(timeout=1.0)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _distortion(x: Tensor, x0: Tensor, kind: str) -> Tensor:
    """Mean distortion over pixels."""
    diff = nn.sub(x, x0)
    if kind == "mae":
        return nn.mean(nn.mul(diff, np.where(diff.data < 0, -1.0, 1.0)))
    return nn.mean(nn.square(diff))


def image_objective(model: CodecModel, plane: np.ndarray, lambda_: float,
                    rng: np.random.Generator, distortion: str = "mse") -> Tuple[Tensor, Dict[str, Any]]:
    """Per-pixel loss of one plane plus its terms."""
    levels = model.levels
    if plane.shape[0] % 2 ** levels or plane.shape[1] % 2 ** levels:
        raise InvalidShapeError(f"Patch {plane.shape} not divisible by 2^{levels}")
    n_pixels = float(plane.size)
    transform = model.transform

    x = Tensor(np.asarray(plane, dtype=np.float64)[None])
    y = transform.forward_tensors(x, levels)
    y_soft = quantize_soft(y, rng)
    references = reference_tensors(y_soft, levels, transform)
    means, scales = model.posterior.field_tensors(y_soft, levels, references)

    log_likelihood = posterior_log_likelihood(y, (means, scales))
    x0 = transform.inverse_tensors(means, levels)
    d = _distortion(x, x0, distortion)

    log_rate = None
    for (level, orientation), band in zip(band_layout(levels), y_soft):
        reference = None if orientation == "LL" else references[level]
        term = model.context.band_log_likelihood(band, reference, level, orientation, model.coding)
        log_rate = term if log_rate is None else nn.add(log_rate, term)

    objective = nn.add(nn.sub(log_likelihood, d), nn.mul(log_rate, lambda_))
    loss = nn.mul(objective, -1.0 / n_pixels)
    terms = {
        "nll": -log_likelihood.item() / n_pixels,
        "reg_mse": d.item(),
        "bpp_est": -log_rate.item() / (n_pixels * math.log(2.0)),
    }
    return loss, terms


def compute_loss(model: CodecModel, batch: Sequence[np.ndarray], lambda_: float,
                 rng: np.random.Generator, distortion: str = "mse") -> Tuple[Tensor, Dict[str, float]]:
    """Batch-averaged loss; record it on a Tape to differentiate it."""
    if model.transform.log_abs_det_jacobian() != 0.0:
        raise TrainingDivergedError("Transform is no longer volume preserving")
    total, sums = None, {"nll": 0.0, "reg_mse": 0.0, "bpp_est": 0.0}
    for plane in batch:
        loss, terms = image_objective(model, plane, lambda_, rng, distortion)
        total = loss if total is None else nn.add(total, loss)
        for key in sums:
            sums[key] += terms[key]
    count = len(batch)
    total = nn.mul(total, 1.0 / count)
    diagnostics = {key: value / count for key, value in sums.items()}
    diagnostics["loss"] = total.item()
    return total, diagnostics


def invertibility_error(model: CodecModel, size: int, rng: np.random.Generator) -> float:
    """Max |f^-1(f(x)) - x| on a random image."""
    image = rng.uniform(0, 255, size=(size, size))
    pyramid = model.transform.forward(image, model.levels)
    return float(np.max(np.abs(model.transform.inverse(pyramid) - image)))


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CodecModel
    metrics: pd.DataFrame
    checkpoints: List[Path] = field(default_factory=list)
    run_dir: Optional[Path] = None


class Trainer:
    """Two-stage optimisation with checkpoints, metrics and resume."""

    def __init__(self, model: CodecModel, config: TrainConfig, run: RunManager):
        if config.levels != model.levels:
            raise ValueError(f"Config uses K={config.levels} but model has K={model.levels}")
        self.model = model
        self.config = config
        self.run = run
        self.state = AdamState()
        self.step = 0
        self.rows: List[Dict[str, float]] = []
        self.checkpoints: List[Path] = []
        self.model.params.training_hash = config_hash(config)

    @property
    def metrics_path(self) -> Path:
        return self.run.outputs_dir / "metrics.csv"

    def set_stage(self, step: int) -> int:
        stage = 1 if step < self.config.warmstart_steps else 2
        self.model.params.set_frozen("lift.", frozen=(stage == 1))
        return stage

    def train_step(self, batch: Sequence[np.ndarray], rng: np.random.Generator) -> Dict[str, float]:
        with Tape():
            loss, diagnostics = compute_loss(self.model, batch, self.config.lambda_, rng,
                                             self.config.distortion)
        if not np.isfinite(diagnostics["loss"]):
            self._abort(diagnostics)
        nn.backward(loss, self.model.params)
        nn.adam_step(self.model.params, self.state, lr=self.config.lr,
                     beta1=self.config.beta1, beta2=self.config.beta2)
        return diagnostics

    def _abort(self, diagnostics: Dict[str, float]):
        dump = {
            "step": self.step,
            "terms": diagnostics,
            "parameter_norms": self.model.params.parameter_norms(),
        }
        path = self.run.write_json("outputs/divergence.json", dump)
        logger.error(f"Non-finite loss at step {self.step}; diagnostics written to {path}")
        raise TrainingDivergedError(f"Non-finite loss at step {self.step}", dump)

    def save_checkpoint(self, rng: np.random.Generator) -> Path:
        error = invertibility_error(self.model, self.config.patch, rng)
        if not error <= INVERTIBILITY_TOLERANCE:
            raise TrainingDivergedError(
                f"Transform lost invertibility at step {self.step} (error {error:.3e})",
                {"step": self.step, "invertibility_error": error},
            )
        path = self.run.checkpoint_dir / f"step-{self.step:06d}"
        path.mkdir(parents=True, exist_ok=True)
        self.model.save(path / "model.pcmp")
        self.state.save(path / "optimizer.npz")
        with open(path / "state.json", "w") as f:
            json.dump({"step": self.step, "invertibility_error": error}, f, indent=2)
        self.write_metrics()
        self.checkpoints.append(path)
        logger.info(f"Checkpoint at step {self.step}: {path}")
        return path

    def resume(self, checkpoint: Path) -> None:
        checkpoint = Path(checkpoint)
        try:
            with open(checkpoint / "state.json") as f:
                self.step = int(json.load(f)["step"])
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"Cannot resume from {checkpoint}: {e}") from e
        loaded = CodecModel.load(checkpoint / "model.pcmp", self.model.coding)
        for p in self.model.params:
            p.data[...] = loaded.params[p.identifier].data
        self.state = AdamState.load(checkpoint / "optimizer.npz")
        if self.metrics_path.exists():
            previous = pd.read_csv(self.metrics_path)
            self.rows = previous[previous["step"] <= self.step].to_dict("records")
        logger.info(f"Resumed from {checkpoint} at step {self.step}")

    def write_metrics(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=METRIC_COLUMNS)
        frame.to_csv(self.metrics_path, index=False)
        return frame

    def fit(self, dataset: PatchDataset) -> TrainResult:
        config = self.config
        rng = np.random.default_rng(config.seed + self.step)
        prefetcher = BatchPrefetcher(dataset, config.batch, config.seed + self.step, config.prefetch)
        start = time.time()
        try:
            while self.step < config.steps:
                stage = self.set_stage(self.step)
                diagnostics = self.train_step(prefetcher.next(), rng)
                self.step += 1
                self.rows.append({"step": self.step, **{k: diagnostics[k] for k in METRIC_COLUMNS[1:]}})
                if self.step % config.log_every == 0:
                    logger.info(
                        f"step {self.step}/{config.steps} stage {stage}: loss={diagnostics['loss']:.4f} "
                        f"nll={diagnostics['nll']:.4f} mse={diagnostics['reg_mse']:.3f} "
                        f"bpp~{diagnostics['bpp_est']:.3f}"
                    )
                if self.step % config.checkpoint_every == 0:
                    self.save_checkpoint(rng)
        finally:
            prefetcher.close()

        if not self.checkpoints or self.checkpoints[-1].name != f"step-{self.step:06d}":
            self.save_checkpoint(rng)
        self.model.params.set_frozen("lift.", frozen=False)
        metrics = self.write_metrics()
        logger.info(f"Training finished: {self.step} steps in {time.time() - start:.1f}s")
        return TrainResult(self.model, metrics, list(self.checkpoints), self.run.run_dir)


def summarize_training(metrics: pd.DataFrame, window: int = 100) -> str:
    """Markdown summary of a metrics table."""
    lines = ["# Training summary", ""]
    if metrics.empty:
        lines.append("No steps recorded.")
        return "\n".join(lines)
    tail = metrics.tail(window)
    lines.append(f"Steps: {int(metrics['step'].iloc[-1])}")
    lines.append("")
    lines.append(f"| metric | last {len(tail)} steps (mean) |")
    lines.append("|---|---|")
    for column in METRIC_COLUMNS[1:]:
        lines.append(f"| {column} | {tail[column].mean():.5f} |")
    return "\n".join(lines)


def train(config: TrainConfig, data_dir: Path, model: Optional[CodecModel] = None,
          run: Optional[RunManager] = None, resume: Optional[Path] = None) -> TrainResult:
    """Train a model on the images in `data_dir`."""
    dataset = PatchDataset(data_dir, config.patch)
    run = run or RunManager("train", runs_dir=Path(get_config_manager().get_runtime_config().get("runs_dir", "runs")))
    if model is None:
        arch = get_config_manager().get_architecture_config()
        arch.levels = config.levels
        model = CodecModel.initialize(arch, seed=config.seed)

    run.snapshot_config({"training": config.to_dict(), "architecture": model.params.architecture,
                         "levels": model.levels, "context_size": model.params.context_size})
    run.snapshot_inputs({"data_dir": str(data_dir), "count": len(dataset.files), "files": dataset.files})

    trainer = Trainer(model, config, run)
    if resume:
        trainer.resume(resume)
    try:
        result = trainer.fit(dataset)
    except TrainingDivergedError as e:
        run.finalize_run(status="diverged", error=str(e))
        raise
    run.write_report("Training", summarize_training(result.metrics), name="training_summary")
    run.finalize_run(steps=trainer.step)
    return result
