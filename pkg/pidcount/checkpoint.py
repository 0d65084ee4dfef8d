"""
Checkpoint container for named parameters

Layout (all integers little-endian):
    magic "PIDNET1" | uint32 version | uint32 parameter count
    uint32 metadata length | metadata JSON (utf-8)
    per parameter: uint16 name length | name | uint8 ndim | uint32 dims... | float32 data
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from config.settings import PIDNetConfig
from pidcount.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = PIDNetConfig.CHECKPOINT_MAGIC
VERSION = PIDNetConfig.CHECKPOINT_VERSION
SUPPORTED_VERSIONS = (1,)


def save_checkpoint(path: Union[str, Path], params: Mapping[str, np.ndarray],
                    metadata: Mapping[str, Any] = None) -> Path:
    """
    Write parameters to a checkpoint file

    Args:
        path: Destination file
        params: Ordered name -> array mapping (written as 32-bit floats)
        metadata: JSON-serializable dictionary (model config, seed, epoch)

    Returns:
        Path to the written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")

    chunks = [MAGIC, struct.pack("<II", VERSION, len(params)), struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name, array in params.items():
        array = np.asarray(array, dtype="<f4")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())

    path.write_bytes(b"".join(chunks))
    logger.info(f"[OK] Checkpoint saved: {path} ({len(params)} parameters)")
    return path


class _Reader:
    def __init__(self, payload: bytes, source: Path):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointError(f"Checkpoint {self.source} is truncated")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a checkpoint file

    Returns:
        (name -> float32 array mapping in file order, metadata dictionary)

    Raises:
        CheckpointError: bad magic, unknown version, truncated payload
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)

    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a PID-Net checkpoint (bad magic)")
    version, count = reader.unpack("<II")
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"{path} has unsupported checkpoint version {version}")
    (meta_len,) = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt metadata block: {e}") from e

    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").astype(np.float32)
        params[name] = data.reshape(shape)

    if reader.offset != len(reader.payload):
        raise CheckpointError(f"{path} has trailing bytes after {count} parameters")
    return params, metadata
