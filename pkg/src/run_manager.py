"""
Run directory management with complete artifact capture.

Every training or evaluation run gets runs/<kind>-<timestamp>/ with
inputs/, config/, outputs/ and metadata/ subdirectories, a configuration
snapshot and a Markdown summary (also rendered to HTML when the markdown
package is installed).
"""

import json
import platform
import shutil
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

# Try to import markdown package for HTML conversion
try:
    import markdown
    MARKDOWN_AVAILABLE = True
except ImportError:
    MARKDOWN_AVAILABLE = False


class RunManager:
    """Manages training/evaluation runs with complete artifact capture."""

    def __init__(self, kind: str = "train", runs_dir: Path = Path("runs"), run_dir: Optional[Path] = None):
        self.kind = kind
        self.start_time = datetime.now()
        if run_dir is not None:
            self.run_dir = Path(run_dir)
            self.run_id = self.run_dir.name
        else:
            self.run_id = f"{kind}-{self.start_time.strftime('%Y-%m-%d-%H%M%S')}"
            self.run_dir = Path(runs_dir) / self.run_id

        # Create run directory structure
        self.setup_run_directory()

    def setup_run_directory(self):
        """Create standardized run directory structure."""
        self.run_dir.mkdir(parents=True, exist_ok=True)

        for sub in ("inputs", "config", "outputs", "metadata", "checkpoints"):
            (self.run_dir / sub).mkdir(exist_ok=True)

        print(f"📁 Run directory: {self.run_dir}")

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def outputs_dir(self) -> Path:
        return self.run_dir / "outputs"

    def snapshot_config(self, config: Dict[str, Any], config_path: Optional[Path] = None, **kwargs):
        """Snapshot the effective configuration and the system it ran on."""
        if config_path and Path(config_path).exists():
            shutil.copy2(config_path, self.run_dir / "config" / Path(config_path).name)

        run_config = {
            "run_id": self.run_id,
            "start_time": self.start_time.isoformat(),
            **config,
            **kwargs
        }
        self.write_json("config/run_config.json", run_config)

        system_info = {
            "python_version": platform.python_version(),
            "platform": platform.platform(),
            "numpy_version": np.__version__,
            "run_timestamp": self.start_time.isoformat()
        }
        self.write_json("config/system_info.json", system_info)

        print(f"⚙️  Configuration snapshotted")

    def snapshot_inputs(self, manifest: Dict[str, Any]):
        """Record which data the run consumed."""
        self.write_json("inputs/dataset.json", manifest)
        print(f"📥 Inputs snapshotted: {manifest.get('count', 0)} files")

    def write_json(self, relative: str, data: Any) -> Path:
        path = self.run_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(data, f, indent=2, default=str)
        return path

    def write_report(self, title: str, markdown_content: str, name: str = "report"):
        """Save the Markdown summary and an HTML rendering of it."""
        with open(self.outputs_dir / f"{name}.md", "w") as f:
            f.write(markdown_content)
        self.generate_html_report(title, markdown_content, name)

    def generate_html_report(self, title: str, markdown_content: str, name: str = "report"):
        """Generate HTML version of the markdown report."""
        if not MARKDOWN_AVAILABLE:
            print("📝 Note: Install 'markdown' package to generate HTML reports: pip install markdown")
            return

        md = markdown.Markdown(extensions=['extra', 'toc'])
        html_content = md.convert(markdown_content)
        full_html = f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{title} - {self.run_id}</title>
    <style>
        body {{ font-family: sans-serif; max-width: 960px; margin: 2rem auto; line-height: 1.5; }}
        table {{ border-collapse: collapse; }}
        th, td {{ border: 1px solid #ccc; padding: 4px 8px; text-align: right; }}
    </style>
</head>
<body>
{html_content}
</body>
</html>
"""
        with open(self.outputs_dir / f"{name}.html", "w") as f:
            f.write(full_html)

    def finalize_run(self, status: str = "completed", **extra):
        """Finalize run with metadata."""
        end_time = datetime.now()
        duration = (end_time - self.start_time).total_seconds()

        metadata = {
            "run_id": self.run_id,
            "kind": self.kind,
            "start_time": self.start_time.isoformat(),
            "end_time": end_time.isoformat(),
            "duration_seconds": duration,
            "status": status,
            **extra
        }
        self.write_json("metadata/run_summary.json", metadata)

        icon = "✅" if status == "completed" else "❌"
        print(f"{icon} Run {status} in {duration:.1f}s: {self.run_dir}")
        return metadata
