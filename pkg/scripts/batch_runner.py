#!/usr/bin/env python3
"""
Batch Runner for the probabilistic codec
Runs the configured experiments through the pcodec CLI and writes a consolidated report
"""

import argparse
import json
import subprocess
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from codec_config import get_config_manager

PCODEC = [sys.executable, str(Path(__file__).parent.parent / "src" / "pcodec.py")]


class BatchRunner:
    def __init__(self, data_dir: Path, held_out_dir: Path, models_dir: Path, timeout: Optional[int] = None):
        self.data_dir = data_dir
        self.held_out_dir = held_out_dir
        self.models_dir = models_dir
        self.timeout = timeout
        self.results: List[Dict[str, Any]] = []
        self.start_time = datetime.now()
        self.config = get_config_manager()

    def run_command(self, args: List[str], description: str) -> Dict[str, Any]:
        """Execute a pcodec subcommand and capture results"""
        cmd = PCODEC + args
        print(f"\n🔄 {description}")
        print(f"   Command: {' '.join(cmd)}")

        try:
            result = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            success = result.returncode == 0
            print(f"   {'✅' if success else '❌'} {'Completed' if success else f'Failed (exit {result.returncode})'}")
            record = {
                "description": description,
                "command": cmd,
                "success": success,
                "returncode": result.returncode,
                "stdout": result.stdout,
                "stderr": result.stderr,
                "timestamp": datetime.now().isoformat()
            }
        except subprocess.TimeoutExpired:
            print(f"   ⏰ Timeout exceeded")
            record = {
                "description": description,
                "command": cmd,
                "success": False,
                "error": "Timeout exceeded",
                "timestamp": datetime.now().isoformat()
            }
        self.results.append(record)
        return record

    def held_out_images(self, count: int) -> List[str]:
        files = sorted(p for p in self.held_out_dir.iterdir() if p.suffix.lower() == ".png")
        return [str(p) for p in files[:count]]

    def train_model(self, lambda_: float, preset: str) -> Path:
        """Train (once) a model at the given rate weight."""
        out = self.models_dir / f"lambda_{lambda_:g}.pcmp"
        if out.exists():
            print(f"\n♻️  Reusing {out}")
            return out
        self.models_dir.mkdir(parents=True, exist_ok=True)
        self.run_command(["train", "--data", str(self.data_dir), "--preset", preset,
                          "--lambda", str(lambda_), "--out", str(out)],
                         f"Train lambda={lambda_:g} ({preset})")
        return out

    def run_lambda_sweep(self):
        """Two rate weights; lower-rate model should carry larger posterior scales"""
        experiment = self.config.get_experiment_config("lambda_sweep")
        low, high = sorted(experiment["lambdas"])
        models = {lam: self.train_model(lam, experiment["preset"]) for lam in (low, high)}
        images = self.held_out_images(experiment.get("held_out", 10))
        self.run_command(
            ["evaluate", *images, "--model", str(models[low]),
             "--reference-model", f"lambda_{high:g}={models[high]}",
             "--analyses", "rate_distortion", "variance_vs_rate"],
            f"Evaluate lambda sweep on {len(images)} held-out images",
        )

    def run_diversity(self):
        """Alpha sweep on one bitstream per image"""
        experiment = self.config.get_experiment_config("diversity")
        model = self.train_model(experiment["lambda"], experiment["preset"])
        images = self.held_out_images(experiment.get("held_out", 10))
        self.run_command(["evaluate", *images, "--model", str(model), "--analyses", "alpha_sweep"],
                         f"Evaluate alpha sweep on {len(images)} held-out images")

    def generate_summary(self):
        """Generate summary report"""
        duration = (datetime.now() - self.start_time).total_seconds()

        successful = sum(1 for r in self.results if r["success"])
        failed = len(self.results) - successful

        summary = {
            "run_date": self.start_time.isoformat(),
            "duration_seconds": duration,
            "total_commands": len(self.results),
            "successful": successful,
            "failed": failed,
            "results": self.results
        }

        report_path = Path(f"batch_report_{self.start_time.strftime('%Y%m%d_%H%M%S')}.json")
        with open(report_path, 'w') as f:
            json.dump(summary, f, indent=2)

        print(f"\n📊 Batch Run Summary")
        print(f"   Duration: {duration:.1f}s")
        print(f"   Total: {len(self.results)}")
        print(f"   ✅ Successful: {successful}")
        print(f"   ❌ Failed: {failed}")
        print(f"   📄 Report: {report_path}")

        return summary


def main():
    """Main batch runner"""
    parser = argparse.ArgumentParser(description="Run codec experiments")
    parser.add_argument("mode", nargs="?", default="all", choices=["lambda-sweep", "diversity", "all"])
    parser.add_argument("--data", required=True, help="Ingested training images")
    parser.add_argument("--held-out", required=True, help="Ingested held-out images")
    parser.add_argument("--models-dir", default="models")
    parser.add_argument("--timeout", type=int, help="Per-command timeout in seconds")
    args = parser.parse_args()

    runner = BatchRunner(Path(args.data), Path(args.held_out), Path(args.models_dir), args.timeout)

    print("🚀 Starting codec batch runner")
    print(f"   Mode: {args.mode}")

    if args.mode in ("lambda-sweep", "all"):
        runner.run_lambda_sweep()

    if args.mode in ("diversity", "all"):
        runner.run_diversity()

    summary = runner.generate_summary()
    sys.exit(0 if summary["failed"] == 0 else 1)


if __name__ == "__main__":
    main()
