"""
Parameter collection and the PCMP model file format.

A model file holds every trainable weight (lifting operators, posterior
heads, context model) plus the metadata the decoder needs to rebuild the
same architecture: levels K, context size s, the architecture settings and
a hash of the training configuration.
"""

import copy
import hashlib
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from codec_errors import BitstreamError, DataError
from nn_core import Parameter

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"PCMP"
MODEL_VERSION = 1
FINGERPRINT_BYTES = 16


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in [-b, b] with b = 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Ordered identifier -> Parameter mapping with model metadata."""

    def __init__(self, levels: int = 4, context_size: int = 5,
                 architecture: Optional[Dict[str, Any]] = None,
                 training_hash: str = ""):
        self.levels = levels
        self.context_size = context_size
        self.architecture = architecture or {}
        self.training_hash = training_hash
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, identifier: str, data: np.ndarray, frozen: bool = False) -> Parameter:
        if identifier in self._params:
            raise ValueError(f"Duplicate parameter identifier '{identifier}'")
        param = Parameter(identifier, data, frozen=frozen)
        self._params[identifier] = param
        return param

    def __getitem__(self, identifier: str) -> Parameter:
        try:
            return self._params[identifier]
        except KeyError:
            raise KeyError(f"Parameter '{identifier}' not found in model") from None

    def __contains__(self, identifier: str) -> bool:
        return identifier in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params.keys())

    def group(self, prefix: str) -> List[Parameter]:
        """Parameters whose identifier starts with `prefix`."""
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def set_frozen(self, prefix: str, frozen: bool = True) -> int:
        """Freeze or unfreeze a parameter group; returns the number affected."""
        params = self.group(prefix)
        for p in params:
            p.set_frozen(frozen)
        return len(params)

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.levels, self.context_size,
                            copy.deepcopy(self.architecture), self.training_hash)
        for p in self:
            clone.add(p.identifier, p.data.copy(), frozen=p.frozen)
        return clone

    def num_values(self) -> int:
        return int(sum(p.size for p in self))

    def parameter_norms(self) -> Dict[str, float]:
        return {p.identifier: float(np.linalg.norm(p.data)) for p in self}

    def metadata(self) -> Dict[str, Any]:
        return {
            "levels": self.levels,
            "context_size": self.context_size,
            "architecture": self.architecture,
            "training_hash": self.training_hash,
        }

    def fingerprint(self) -> bytes:
        """16-byte identity of architecture + weights, stored in every container."""
        h = hashlib.sha256()
        h.update(json.dumps(self.architecture, sort_keys=True).encode("utf-8"))
        h.update(struct.pack("<BB", self.levels, self.context_size))
        for p in self:
            h.update(p.identifier.encode("utf-8"))
            h.update(struct.pack(f"<{p.data.ndim}I", *p.shape))
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.digest()[:FINGERPRINT_BYTES]

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = [MODEL_MAGIC, struct.pack("<HI", MODEL_VERSION, len(self._params))]
        for p in self:
            name = p.identifier.encode("utf-8")
            chunks.append(struct.pack("<H", len(name)))
            chunks.append(name)
            chunks.append(struct.pack("<B", p.data.ndim))
            chunks.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        meta = json.dumps(self.metadata(), sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<I", len(meta)))
        chunks.append(meta)
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        reader = _Reader(data)
        if reader.take(4) != MODEL_MAGIC:
            raise BitstreamError("Not a model file (bad magic)")
        version, count = reader.unpack("<HI")
        if version != MODEL_VERSION:
            raise BitstreamError(f"Unsupported model file version {version}")

        entries = []
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (rank,) = reader.unpack("<B")
            shape = reader.unpack(f"<{rank}I") if rank else ()
            n = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64)
            entries.append((name, values.reshape(shape)))

        meta: Dict[str, Any] = {}
        if reader.remaining() >= 4:
            (meta_len,) = reader.unpack("<I")
            try:
                meta = json.loads(reader.take(meta_len).decode("utf-8"))
            except ValueError as e:
                raise BitstreamError(f"Corrupt model metadata: {e}") from e

        params = cls(levels=int(meta.get("levels", 4)),
                     context_size=int(meta.get("context_size", 5)),
                     architecture=meta.get("architecture", {}),
                     training_hash=meta.get("training_hash", ""))
        for name, values in entries:
            params.add(name, values)
        return params

    def save(self, path: Path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as e:
            raise DataError(f"Cannot write model file {path}: {e}") from e
        logger.info(f"Saved model with {len(self)} parameters to {path}")

    @classmethod
    def load(cls, path: Path) -> "ModelParams":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise DataError(f"Cannot read model file {path}: {e}") from e
        return cls.from_bytes(data)


class _Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining():
            raise BitstreamError("Model file truncated")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
