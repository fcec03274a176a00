#!/usr/bin/env python3
"""
Evaluation Engine for Codec Models

Rate/fidelity and diversity analyses over a set of images. Every analysis
returns a pandas DataFrame (one row per image, or per image and alpha) and
a JSON-ready summary; results can be saved into a run directory.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from codec import decode_fields, encode, mse, psnr_from_mse, render
from codec_config import ArchitectureConfig
from codec_model import CodecModel
from image_io import Image, load_image
from lifting_transform import cdf97_forward
from sampler import DEFAULT_ALPHAS

logger = logging.getLogger(__name__)

NamedImages = Sequence[Tuple[str, Image]]


def baseline_model(model: CodecModel) -> CodecModel:
    """The CDF 9/7-initialised model with the same architecture as `model`."""
    params = model.params
    arch = ArchitectureConfig.from_dict(params.levels, params.context_size, params.architecture)
    return CodecModel.initialize(arch, coding=model.coding)


def high_frequency_energy(image: Image) -> float:
    """Mean squared level-1 detail coefficient of the classical CDF 9/7 analysis."""
    energies = []
    for plane in image.planes():
        h, w = plane.shape
        plane = plane[:h - h % 2, :w - w % 2]
        pyramid = cdf97_forward(plane, 1)
        details = [pyramid.band(1, o) for o in ("HL", "LH", "HH")]
        energies.append(sum(float(np.sum(d * d)) for d in details) / plane.size)
    return float(np.mean(energies))


def _is_non_decreasing(values: Sequence[float], tolerance: float = 1e-9) -> bool:
    return all(b >= a - tolerance for a, b in zip(values, values[1:]))


def evaluate_rate_distortion(model: CodecModel, images: NamedImages,
                             baseline: Optional[CodecModel] = None) -> pd.DataFrame:
    """Measured bpp and PSNR at alpha = 0 for `model` and for the CDF 9/7 baseline."""
    baseline = baseline or baseline_model(model)
    rows = []
    for name, image in images:
        row: Dict[str, Any] = {"image": name}
        for label, candidate_model in (("model", model), ("baseline", baseline)):
            container = encode(image, candidate_model)
            _, fields = decode_fields(container, candidate_model)
            value = mse(image, render(fields, container, candidate_model, 0.0, 0))
            row[f"{label}_bpp"] = container.bpp()
            row[f"{label}_mse"] = value
            row[f"{label}_psnr"] = psnr_from_mse(value)
        logger.info(f"{name}: {row['model_bpp']:.3f} bpp, {row['model_psnr']:.2f} dB "
                    f"(baseline {row['baseline_bpp']:.3f} bpp, {row['baseline_psnr']:.2f} dB)")
        rows.append(row)
    return pd.DataFrame(rows)


def evaluate_alpha_sweep(model: CodecModel, images: NamedImages,
                         alphas: Sequence[float] = DEFAULT_ALPHAS,
                         seeds: Sequence[int] = (0,)) -> pd.DataFrame:
    """
    Mean MSE and level-1 high-frequency energy per (image, alpha) over `seeds`.

    All reconstructions of an image come from one bitstream. The frame carries
    per-image flags `hf_monotone` / `mse_monotone` (non-decreasing in alpha) and
    `best_alpha` (lowest mean MSE).
    """
    alphas = sorted(alphas)
    rows = []
    for name, image in images:
        container = encode(image, model)
        _, fields = decode_fields(container, model)
        image_rows = []
        for alpha in alphas:
            seed_list = [0] if alpha == 0 else list(seeds)
            candidates = [render(fields, container, model, alpha, seed) for seed in seed_list]
            image_rows.append({
                "image": name,
                "alpha": alpha,
                "bpp": container.bpp(),
                "mse": float(np.mean([mse(image, c) for c in candidates])),
                "hf_energy": float(np.mean([high_frequency_energy(c) for c in candidates])),
                "samples": len(candidates),
            })
        frame = pd.DataFrame(image_rows)
        frame["psnr"] = frame["mse"].map(psnr_from_mse)
        frame["hf_monotone"] = _is_non_decreasing(frame["hf_energy"].tolist())
        frame["mse_monotone"] = _is_non_decreasing(frame["mse"].tolist())
        frame["best_alpha"] = float(frame.loc[frame["mse"].idxmin(), "alpha"])
        rows.append(frame)
    return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame()


def evaluate_variance_vs_rate(models: Dict[str, CodecModel], images: NamedImages) -> pd.DataFrame:
    """Mean posterior scale and measured bpp of each named model on each image."""
    rows = []
    for label, model in models.items():
        for name, image in images:
            container = encode(image, model)
            _, fields = decode_fields(container, model)
            scales = np.concatenate([f.scale.flatten() for f in fields])
            rows.append({
                "model": label,
                "image": name,
                "bpp": container.bpp(),
                "mean_scale": float(scales.mean()),
            })
    return pd.DataFrame(rows)


class CodecEvaluator:
    """Runs the registered analyses and assembles a JSON summary."""

    def __init__(self, model: CodecModel, alphas: Sequence[float] = DEFAULT_ALPHAS,
                 seeds: Sequence[int] = (0,), reference_models: Optional[Dict[str, CodecModel]] = None):
        self.model = model
        self.alphas = list(alphas)
        self.seeds = list(seeds)
        self.reference_models = reference_models or {}
        self.available_analyses = {
            "rate_distortion": lambda images: evaluate_rate_distortion(self.model, images),
            "alpha_sweep": lambda images: evaluate_alpha_sweep(self.model, images, self.alphas, self.seeds),
            "variance_vs_rate": lambda images: evaluate_variance_vs_rate(
                {"model": self.model, **self.reference_models}, images),
        }

    def run_analyses(self, images: NamedImages,
                     analysis_names: Optional[Sequence[str]] = None) -> Dict[str, pd.DataFrame]:
        names = list(analysis_names or self.available_analyses)
        unknown = [n for n in names if n not in self.available_analyses]
        if unknown:
            raise ValueError(f"Unknown analyses: {unknown}. Available: {list(self.available_analyses)}")
        results = {}
        for name in names:
            logger.info(f"Running analysis '{name}' on {len(images)} images")
            results[name] = self.available_analyses[name](images)
        return results

    @staticmethod
    def summarize(results: Dict[str, pd.DataFrame]) -> Dict[str, Any]:
        summary: Dict[str, Any] = {
            "analysis_metadata": {"timestamp": datetime.now().isoformat()},
        }
        rd = results.get("rate_distortion")
        if rd is not None and not rd.empty:
            summary["rate_distortion"] = {
                "images": len(rd),
                "mean_bpp": float(rd["model_bpp"].mean()),
                "mean_psnr": float(rd["model_psnr"].mean()),
                "baseline_mean_bpp": float(rd["baseline_bpp"].mean()),
                "baseline_mean_psnr": float(rd["baseline_psnr"].mean()),
            }
        sweep = results.get("alpha_sweep")
        if sweep is not None and not sweep.empty:
            per_image = sweep.drop_duplicates("image")
            summary["alpha_sweep"] = {
                "mean_mse_by_alpha": {str(a): float(v) for a, v in sweep.groupby("alpha")["mse"].mean().items()},
                "mean_hf_energy_by_alpha": {str(a): float(v)
                                            for a, v in sweep.groupby("alpha")["hf_energy"].mean().items()},
                "hf_monotone_fraction": float(per_image["hf_monotone"].mean()),
                "best_alpha_counts": {str(a): int(n) for a, n in per_image["best_alpha"].value_counts().items()},
            }
        variance = results.get("variance_vs_rate")
        if variance is not None and not variance.empty:
            summary["variance_vs_rate"] = {
                label: {"mean_bpp": float(g["bpp"].mean()), "mean_scale": float(g["mean_scale"].mean())}
                for label, g in variance.groupby("model")
            }
        return summary


def load_images(paths: Sequence[Path]) -> List[Tuple[str, Image]]:
    return [(Path(p).name, load_image(p)) for p in paths]


def save_evaluation_results(out_dir: Path, results: Dict[str, pd.DataFrame],
                            summary: Dict[str, Any]) -> Path:
    """<name>.csv per analysis plus evaluation_summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, frame in results.items():
        frame.to_csv(out_dir / f"{name}.csv", index=False)
    summary_path = out_dir / "evaluation_summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, default=str)
    return summary_path
