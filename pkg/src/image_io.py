"""
8-bit image I/O and the padding/cropping used around the transform.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from codec_errors import DataError, InvalidShapeError

logger = logging.getLogger(__name__)


@dataclass
class Image:
    """8-bit raster: (H, W) grayscale or (H, W, 3) colour."""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim == 3 and self.pixels.shape[2] == 1:
            self.pixels = self.pixels[:, :, 0]
        if self.pixels.ndim not in (2, 3) or (self.pixels.ndim == 3 and self.pixels.shape[2] != 3):
            raise InvalidShapeError(f"Unsupported image shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 255):
                raise InvalidShapeError("Pixel values must lie in [0, 255]")
            self.pixels = self.pixels.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def planes(self) -> List[np.ndarray]:
        """Channels as separate float64 planes."""
        if self.channels == 1:
            return [self.pixels.astype(np.float64)]
        return [self.pixels[:, :, c].astype(np.float64) for c in range(3)]

    @classmethod
    def from_planes(cls, planes: Sequence[np.ndarray]) -> "Image":
        if len(planes) == 1:
            return cls(np.asarray(planes[0]))
        return cls(np.stack(planes, axis=2))


def load_image(path: Path) -> Image:
    """Read an image file as 8-bit grayscale or RGB."""
    path = Path(path)
    try:
        with PILImage.open(path) as img:
            img.load()
            mode = "L" if img.mode in ("1", "L", "I", "I;16", "F", "LA") else "RGB"
            return Image(np.asarray(img.convert(mode)))
    except FileNotFoundError as e:
        raise DataError(f"Image not found: {path}") from e
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"Cannot read image {path}: {e}") from e


def save_png(image: Image, path: Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(image.pixels).save(path, format="PNG")
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def save_pgm(plane: np.ndarray, path: Path) -> None:
    """Binary PGM of a 2-D plane (values clipped to 0..255)."""
    path = Path(path)
    pixels = np.clip(np.rint(plane), 0, 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(pixels).save(path, format="PPM")
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def padded_shape(height: int, width: int, levels: int) -> Tuple[int, int]:
    block = 2 ** levels
    return -(-height // block) * block, -(-width // block) * block


def pad_plane(plane: np.ndarray, levels: int) -> np.ndarray:
    """Reflect-pad bottom/right to multiples of 2^levels (edge mode for 1-pixel sides)."""
    height, width = plane.shape
    target_h, target_w = padded_shape(height, width, levels)
    out = plane
    if target_h > height:
        out = np.pad(out, ((0, target_h - height), (0, 0)), mode="reflect" if height > 1 else "edge")
    if target_w > width:
        out = np.pad(out, ((0, 0), (0, target_w - width)), mode="reflect" if width > 1 else "edge")
    return out


def crop_plane(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    return plane[:height, :width]


def center_crop(pixels: np.ndarray, block: int) -> np.ndarray:
    """Largest centred crop whose sides are multiples of `block`."""
    height, width = pixels.shape[:2]
    target_h, target_w = (height // block) * block, (width // block) * block
    if target_h == 0 or target_w == 0:
        raise InvalidShapeError(f"Image {width}x{height} is smaller than {block}x{block}")
    top, left = (height - target_h) // 2, (width - target_w) // 2
    return pixels[top:top + target_h, left:left + target_w]
