"""
Dataset ingestion.

Normalises images from a directory or a list of URLs into 8-bit PNGs whose
sides are multiples of 2^K, named by content hash, and records the result in
manifest.json. Unreadable sources are skipped and listed in the manifest.
A synthetic mode generates procedural training images from a seed.
"""

import hashlib
import io
import logging
from datetime import datetime
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import httpx
import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError
from pydantic import BaseModel, Field
from scipy.ndimage import gaussian_filter

from image_io import Image, center_crop

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DOWNLOAD_TIMEOUT = 30.0
SYNTHETIC_KINDS = ("gradient", "grating", "checkerboard", "smooth_noise", "discs")


class ManifestEntry(BaseModel):
    file: str
    source: str
    sha256: str
    width: int
    height: int
    channels: int


class SkippedSource(BaseModel):
    source: str
    reason: str


class DatasetManifest(BaseModel):
    created: str = Field(default_factory=lambda: datetime.now().isoformat())
    levels: int
    entries: List[ManifestEntry] = Field(default_factory=list)
    skipped: List[SkippedSource] = Field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(self.model_dump_json(indent=2))
        return path

    @classmethod
    def read(cls, out_dir: Path) -> "DatasetManifest":
        return cls.model_validate_json((Path(out_dir) / MANIFEST_NAME).read_text())


def normalize_image(data: bytes, levels: int) -> Image:
    """Decode arbitrary image bytes to 8-bit L/RGB, centre-cropped to multiples of 2^levels."""
    with PILImage.open(io.BytesIO(data)) as img:
        img.load()
        mode = "L" if img.mode in ("1", "L", "I", "I;16", "F", "LA") else "RGB"
        pixels = np.asarray(img.convert(mode))
    return Image(center_crop(pixels, 2 ** levels))


def png_bytes(image: Image) -> bytes:
    buffer = io.BytesIO()
    PILImage.fromarray(image.pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def store_image(image: Image, out_dir: Path, source: str) -> ManifestEntry:
    """Write `image` as <sha256[:16]>.png unless an identical file exists."""
    data = png_bytes(image)
    digest = hashlib.sha256(data).hexdigest()
    path = Path(out_dir) / f"{digest[:16]}.png"
    if not (path.exists() and path.read_bytes() == data):
        path.write_bytes(data)
    return ManifestEntry(file=path.name, source=source, sha256=digest,
                         width=image.width, height=image.height, channels=image.channels)


def _finish(manifest: DatasetManifest, out_dir: Path) -> DatasetManifest:
    unique = {}
    for entry in manifest.entries:
        unique.setdefault(entry.file, entry)
    manifest.entries = sorted(unique.values(), key=lambda e: e.file)
    manifest.skipped = sorted(manifest.skipped, key=lambda s: s.source)
    manifest.write(out_dir)
    logger.info(f"Ingested {len(manifest.entries)} images into {out_dir} ({len(manifest.skipped)} skipped)")
    return manifest


def _ingest_bytes(items: Iterable[Tuple[str, Optional[bytes], Optional[str]]], out_dir: Path,
                  levels: int) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(levels=levels)
    for source, data, error in items:
        if data is None:
            logger.warning(f"Skipping {source}: {error}")
            manifest.skipped.append(SkippedSource(source=source, reason=error or "unreadable"))
            continue
        try:
            image = normalize_image(data, levels)
        except (UnidentifiedImageError, OSError, ValueError) as e:
            logger.warning(f"Skipping {source}: {e}")
            manifest.skipped.append(SkippedSource(source=source, reason=str(e)))
            continue
        manifest.entries.append(store_image(image, out_dir, source))
    return _finish(manifest, out_dir)


def ingest_directory(source_dir: Path, out_dir: Path, levels: int = 4) -> DatasetManifest:
    source_dir = Path(source_dir)

    def items():
        for path in sorted(p for p in source_dir.rglob("*") if p.is_file()):
            if path.name == MANIFEST_NAME:
                continue
            try:
                yield str(path.relative_to(source_dir)), path.read_bytes(), None
            except OSError as e:
                yield str(path), None, str(e)

    return _ingest_bytes(items(), out_dir, levels)


def download(url: str, client: httpx.Client) -> bytes:
    response = client.get(url)
    response.raise_for_status()
    return response.content


def ingest_urls(urls: Iterable[str], out_dir: Path, levels: int = 4,
                client: Optional[httpx.Client] = None) -> DatasetManifest:
    own_client = client is None
    client = client or httpx.Client(timeout=DOWNLOAD_TIMEOUT, follow_redirects=True)

    def items():
        for url in urls:
            url = url.strip()
            if not url or url.startswith("#"):
                continue
            try:
                yield url, download(url, client), None
            except httpx.HTTPError as e:
                yield url, None, f"download failed: {e}"

    try:
        return _ingest_bytes(items(), out_dir, levels)
    finally:
        if own_client:
            client.close()


def ingest_url_list(list_file: Path, out_dir: Path, levels: int = 4) -> DatasetManifest:
    return ingest_urls(Path(list_file).read_text().splitlines(), out_dir, levels)


# ---------------------------------------------------------------------------
# Synthetic images
# ---------------------------------------------------------------------------

def synthetic_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        low, high = sorted(rng.uniform(0, 255, size=2))
        plane = low + (high - low) * ramp
    elif kind == "grating":
        angle = rng.uniform(0, np.pi)
        frequency = rng.uniform(2, size / 6)
        phase = rng.uniform(0, 2 * np.pi)
        contrast = rng.uniform(30, 120)
        plane = 128 + contrast * np.sin(2 * np.pi * frequency * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    elif kind == "checkerboard":
        cell = int(rng.integers(2, max(3, size // 4)))
        iy, ix = np.mgrid[0:size, 0:size] // cell
        dark, light = sorted(rng.uniform(0, 255, size=2))
        plane = np.where((iy + ix) % 2 == 0, dark, light)
    elif kind == "smooth_noise":
        noise = gaussian_filter(rng.normal(size=(size, size)), sigma=rng.uniform(1.0, size / 8), mode="wrap")
        noise = (noise - noise.mean()) / max(noise.std(), 1e-9)
        plane = 128 + rng.uniform(20, 60) * noise
    elif kind == "discs":
        plane = np.full((size, size), rng.uniform(0, 255))
        for _ in range(int(rng.integers(2, 8))):
            cy, cx = rng.uniform(0, 1, size=2)
            radius = rng.uniform(0.05, 0.3)
            plane[(yy - cy) ** 2 + (xx - cx) ** 2 < radius ** 2] = rng.uniform(0, 255)
    else:
        raise ValueError(f"Unknown synthetic image kind '{kind}'")
    return np.clip(np.rint(plane), 0, 255).astype(np.uint8)


def generate_synthetic(out_dir: Path, count: int, size: int = 128, seed: int = 0,
                       levels: int = 4) -> DatasetManifest:
    """`count` procedural grayscale images, identical for identical seeds."""
    if size % 2 ** levels:
        raise ValueError(f"Synthetic size {size} is not a multiple of 2^{levels}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = DatasetManifest(levels=levels)
    for n in range(count):
        kind = SYNTHETIC_KINDS[n % len(SYNTHETIC_KINDS)]
        image = Image(synthetic_image(kind, size, rng))
        manifest.entries.append(store_image(image, out_dir, f"synthetic:{kind}:{seed}:{n}"))
    return _finish(manifest, out_dir)
