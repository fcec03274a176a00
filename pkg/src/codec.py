"""
End-to-end encoding and decoding.

Container layout (little-endian):

    magic "PCBS" | version u16 | width u32 | height u32 | channels u8 | K u8 |
    model fingerprint 16B | payload length u64 | payload | CRC32(payload) u32

Each channel is reflect-padded to a multiple of 2^K, transformed, rounded and
range-coded coefficient by coefficient in decode order. Decoding recovers the
quantised pyramids, predicts the posterior field, samples it and inverts the
transform; the output is cropped back to the recorded size.
"""

import hashlib
import logging
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from codec_errors import BitstreamError, DataError, InvalidShapeError, ModelMismatchError
from codec_model import CodecModel
from entropy_model import LITERAL_BITS, coding_distribution, decode_order, extract_context
from image_io import Image, crop_plane, load_image, pad_plane, padded_shape, save_png
from lifting_transform import SubbandPyramid
from posterior import GaussianField, predict_posterior
from quantization import ALPHABET_MIN, quantize_hard
from range_coder import RangeDecoder, RangeEncoder
from sampler import SampleSpec, reconstruct, sample_coefficients

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b"PCBS"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHIIBB16sQ")
_CRC = struct.Struct("<I")
HEADER_BYTES = _HEADER.size


@dataclass
class Container:
    width: int
    height: int
    channels: int
    levels: int
    fingerprint: bytes
    payload: bytes
    version: int = CONTAINER_VERSION

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.payload)

    def bpp(self) -> float:
        return self.payload_bits / (self.width * self.height)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(CONTAINER_MAGIC, self.version, self.width, self.height,
                              self.channels, self.levels, self.fingerprint, len(self.payload))
        return header + self.payload + _CRC.pack(zlib.crc32(self.payload) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Container":
        if len(data) < HEADER_BYTES + _CRC.size:
            raise BitstreamError("Bitstream too short for a container header")
        magic, version, width, height, channels, levels, fingerprint, length = _HEADER.unpack_from(data)
        if magic != CONTAINER_MAGIC:
            raise BitstreamError("Not a codec bitstream (bad magic)")
        if version != CONTAINER_VERSION:
            raise BitstreamError(f"Unsupported bitstream version {version}")
        end = HEADER_BYTES + length
        if len(data) != end + _CRC.size:
            raise BitstreamError(
                f"Bitstream length {len(data)} does not match header payload length {length}"
            )
        payload = data[HEADER_BYTES:end]
        (crc,) = _CRC.unpack_from(data, end)
        if crc != zlib.crc32(payload) & 0xFFFFFFFF:
            raise BitstreamError("Payload CRC mismatch")
        if channels not in (1, 3) or width == 0 or height == 0:
            raise BitstreamError(f"Invalid header: {width}x{height}, {channels} channels")
        return cls(width, height, channels, levels, fingerprint, payload, version)


# ---------------------------------------------------------------------------
# Entropy coding of quantised pyramids
# ---------------------------------------------------------------------------

def _band_reference(pyramid: SubbandPyramid, references: Dict[int, np.ndarray],
                    level: int, orientation: str, model: CodecModel) -> Optional[np.ndarray]:
    if orientation == "LL":
        return None
    if level not in references:
        if level == pyramid.levels:
            references[level] = pyramid.bands[0]
        else:
            references[level] = model.transform.partial_inverse(pyramid, level)
    return references[level]


def _coding_distribution(model: CodecModel, band: np.ndarray, i: int, j: int,
                         reference: Optional[np.ndarray], level: int, orientation: str):
    window = extract_context(band, (i, j), reference, level, orientation, model.context.context_size)
    coding = model.coding
    return coding_distribution(model.context.predict_mixture(window), coding.tail_sigmas,
                               coding.min_radius, coding.max_radius)


def encode_pyramid(q: SubbandPyramid, model: CodecModel, encoder: RangeEncoder) -> None:
    planes = q.map(lambda b: b.astype(np.float64))
    references: Dict[int, np.ndarray] = {}
    for index, level, orientation in decode_order(q.levels):
        band = planes.bands[index]
        reference = _band_reference(planes, references, level, orientation, model)
        for i in range(band.shape[0]):
            for j in range(band.shape[1]):
                value = int(band[i, j])
                dist = _coding_distribution(model, band, i, j, reference, level, orientation)
                symbol = dist.symbol_for(value)
                encoder.encode_symbol(symbol, dist.cdf)
                if symbol == dist.escape_symbol:
                    encoder.encode_literal(value - ALPHABET_MIN, LITERAL_BITS)


def decode_pyramid(height: int, width: int, model: CodecModel, decoder: RangeDecoder) -> SubbandPyramid:
    planes = SubbandPyramid.zeros(height, width, model.levels)
    references: Dict[int, np.ndarray] = {}
    for index, level, orientation in decode_order(model.levels):
        band = planes.bands[index]
        reference = _band_reference(planes, references, level, orientation, model)
        for i in range(band.shape[0]):
            for j in range(band.shape[1]):
                dist = _coding_distribution(model, band, i, j, reference, level, orientation)
                value = dist.value_for(decoder.decode_symbol(dist.cdf))
                if value is None:
                    value = decoder.decode_literal(LITERAL_BITS) + ALPHABET_MIN
                band[i, j] = value
    return planes.map(lambda b: b.astype(np.int64))


def debug_hash(pyramids: Sequence[SubbandPyramid]) -> str:
    """SHA-256 of the quantised coefficients, for checking codec symmetry."""
    h = hashlib.sha256()
    for pyramid in pyramids:
        for band in pyramid.bands:
            h.update(np.ascontiguousarray(band, dtype="<i8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Encode / decode
# ---------------------------------------------------------------------------

def analyze(image: Image, model: CodecModel) -> List[SubbandPyramid]:
    """Quantised pyramid of every channel (what the encoder codes)."""
    block = 2 ** model.levels
    pyramids = []
    for plane in image.planes():
        padded = pad_plane(plane, model.levels)
        if padded.shape[0] < block or padded.shape[1] < block:
            raise InvalidShapeError(f"Image {image.width}x{image.height} too small for K={model.levels}")
        pyramids.append(quantize_hard(model.transform.forward(padded, model.levels)))
    return pyramids


def encode(image: Image, model: CodecModel) -> Container:
    pyramids = analyze(image, model)
    encoder = RangeEncoder()
    for q in pyramids:
        encode_pyramid(q, model, encoder)
    payload = encoder.finish()
    logger.debug(f"Encoded {image.width}x{image.height}x{image.channels}: {len(payload)} payload bytes")
    return Container(image.width, image.height, image.channels, model.levels,
                     model.fingerprint(), payload)


def check_model(container: Container, model: CodecModel) -> None:
    if container.levels != model.levels:
        raise ModelMismatchError(f"Bitstream uses K={container.levels}, model has K={model.levels}")
    if container.fingerprint != model.fingerprint():
        raise ModelMismatchError("Bitstream was encoded with a different model (fingerprint mismatch)")


def decode_pyramids(container: Container, model: CodecModel) -> List[SubbandPyramid]:
    check_model(container, model)
    height, width = padded_shape(container.height, container.width, container.levels)
    decoder = RangeDecoder(container.payload)
    return [decode_pyramid(height, width, model, decoder) for _ in range(container.channels)]


def decode_fields(container: Container, model: CodecModel) -> Tuple[List[SubbandPyramid], List[GaussianField]]:
    pyramids = decode_pyramids(container, model)
    fields = [predict_posterior(q, model.posterior, model.transform) for q in pyramids]
    return pyramids, fields


def render(fields: Sequence[GaussianField], container: Container, model: CodecModel,
           alpha: float, seed: int) -> Image:
    """One reconstruction from decoded posterior fields."""
    planes, offset = [], 0
    for field in fields:
        y_tilde = sample_coefficients(field, alpha, seed, index_offset=offset)
        offset += field.mean.num_coefficients()
        planes.append(crop_plane(reconstruct(y_tilde, model.transform), container.height, container.width))
    return Image.from_planes(planes)


def decode(container: Container, model: CodecModel, spec: Optional[SampleSpec] = None) -> List[Image]:
    """spec.count reconstructions at spec.alpha; reconstruction n uses seed spec.seed + n."""
    spec = spec or SampleSpec()
    _, fields = decode_fields(container, model)
    return [render(fields, container, model, spec.alpha, spec.seed + n) for n in range(spec.count)]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mse(reference: Image, candidate: Image) -> float:
    if reference.pixels.shape != candidate.pixels.shape:
        raise DataError(f"Dimension mismatch: {reference.pixels.shape} vs {candidate.pixels.shape}")
    diff = reference.pixels.astype(np.float64) - candidate.pixels.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / value)


def metrics(reference: Image, candidates: Sequence[Image],
            container: Optional[Container] = None) -> Dict[str, Any]:
    report: Dict[str, Any] = {"candidates": []}
    for candidate in candidates:
        value = mse(reference, candidate)
        report["candidates"].append({"mse": value, "psnr": psnr_from_mse(value)})
    if container is not None:
        report["bpp"] = container.bpp()
        report["payload_bytes"] = len(container.payload)
    return report


# ---------------------------------------------------------------------------
# Files and batches
# ---------------------------------------------------------------------------

def read_container(path: Path) -> Container:
    try:
        return Container.from_bytes(Path(path).read_bytes())
    except OSError as e:
        raise DataError(f"Cannot read bitstream {path}: {e}") from e


def write_container(container: Container, path: Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(container.to_bytes())
    except OSError as e:
        raise DataError(f"Cannot write bitstream {path}: {e}") from e


def encode_file(image_path: Path, model: CodecModel, output_path: Path) -> Container:
    container = encode(load_image(image_path), model)
    write_container(container, output_path)
    logger.info(f"{image_path} -> {output_path} ({container.bpp():.3f} bpp)")
    return container


def decode_file(bitstream_path: Path, model: CodecModel, output_path: Path,
                spec: Optional[SampleSpec] = None) -> List[Path]:
    """Decode to PNG; with count > 1 the outputs get a _<n> suffix."""
    images = decode(read_container(bitstream_path), model, spec)
    output_path = Path(output_path)
    paths = []
    for n, image in enumerate(images):
        path = output_path if len(images) == 1 else output_path.with_name(f"{output_path.stem}_{n}{output_path.suffix}")
        save_png(image, path)
        paths.append(path)
    return paths


def _encode_job(args: Tuple[str, str, str]) -> Tuple[str, int]:
    image_path, model_path, output_path = args
    container = encode_file(Path(image_path), CodecModel.load(Path(model_path)), Path(output_path))
    return output_path, len(container.payload)


def _decode_job(args: Tuple[str, str, str, float, int]) -> Tuple[str, int]:
    bitstream_path, model_path, output_path, alpha, seed = args
    spec = SampleSpec(alpha=alpha, seed=seed)
    paths = decode_file(Path(bitstream_path), CodecModel.load(Path(model_path)), Path(output_path), spec)
    return output_path, len(paths)


def batch_encode(image_paths: Sequence[Path], model_path: Path, out_dir: Path,
                 threads: int = 1) -> List[Tuple[str, int]]:
    """Encode many files to <out_dir>/<stem>.pcbs across `threads` worker processes."""
    jobs = [(str(p), str(model_path), str(Path(out_dir) / f"{Path(p).stem}.pcbs")) for p in image_paths]
    return _run_jobs(_encode_job, jobs, threads)


def batch_decode(bitstream_paths: Sequence[Path], model_path: Path, out_dir: Path,
                 threads: int = 1, alpha: float = 0.0, seed: int = 0) -> List[Tuple[str, int]]:
    jobs = [(str(p), str(model_path), str(Path(out_dir) / f"{Path(p).stem}.png"), alpha, seed)
            for p in bitstream_paths]
    return _run_jobs(_decode_job, jobs, threads)


def _run_jobs(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))
