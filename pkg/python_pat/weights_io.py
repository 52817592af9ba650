"""
Binary weights container shared by the DGD and U-Net models.

Layout (little-endian)::

    magic (4 ASCII bytes) | u32 version | u32 stage_count
    per stage:  u32 tensor_count
    per tensor: u32 name_len | name (ASCII) | u32 rank | u32 dims[rank] | f32 payload
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .exceptions import PatFormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DGD_MAGIC = b"DGDW"
UNET_MAGIC = b"UNTW"

StageTensors = Dict[str, np.ndarray]


def to_storage_precision(tensors: StageTensors) -> StageTensors:
    """Round every tensor to the stored single precision (kept as float64)."""
    return {name: np.asarray(t, dtype=np.float32).astype(np.float64) for name, t in tensors.items()}


def encode_container(magic: bytes, stages: List[StageTensors]) -> bytes:
    if len(magic) != 4:
        raise PatFormatError(f"magic must be 4 bytes, got {magic!r}")
    parts = [magic, struct.pack('<II', FORMAT_VERSION, len(stages))]
    for tensors in stages:
        parts.append(struct.pack('<I', len(tensors)))
        for name, tensor in tensors.items():
            encoded = name.encode('ascii')
            array = np.asarray(tensor)
            parts.append(struct.pack('<I', len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape))
            parts.append(array.astype('<f4').tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise PatFormatError(
                f"truncated weights file: needed {count} bytes at offset {self.offset}, "
                f"{len(self.payload) - self.offset} left", self.source)
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]


def decode_container(payload: bytes, expected_magic: Union[bytes, None] = None,
                     source: str = "<bytes>") -> Tuple[bytes, List[StageTensors]]:
    """
    Parse a container, validating magic, version and every tensor header.

    Raises:
        PatFormatError: On a wrong magic, unknown version, truncation or trailing bytes
    """
    reader = _Reader(payload, source)
    magic = reader.take(4)
    if expected_magic is not None and magic != expected_magic:
        raise PatFormatError(f"bad magic {magic!r}, expected {expected_magic!r}", source)
    if magic not in (DGD_MAGIC, UNET_MAGIC):
        raise PatFormatError(f"bad magic {magic!r}, not a weights container", source)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise PatFormatError(f"unsupported version {version}", source)
    stages = []
    for _ in range(reader.u32()):
        tensors = {}
        for _ in range(reader.u32()):
            try:
                name = reader.take(reader.u32()).decode('ascii')
            except UnicodeDecodeError as e:
                raise PatFormatError(f"tensor name is not ASCII: {e}", source)
            rank = reader.u32()
            dims = tuple(reader.u32() for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(reader.take(4 * count), dtype='<f4')
            tensors[name] = data.astype(np.float64).reshape(dims)
        stages.append(tensors)
    if reader.offset != len(payload):
        raise PatFormatError(f"{len(payload) - reader.offset} trailing bytes after the last stage", source)
    return magic, stages


def write_container(path: Union[str, Path], magic: bytes, stages: List[StageTensors]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(magic, stages))
    logger.debug("wrote %d stage(s) to %s", len(stages), path)
    return path


def read_container(path: Union[str, Path], expected_magic: Union[bytes, None] = None
                   ) -> Tuple[bytes, List[StageTensors]]:
    path = Path(path)
    if not path.exists():
        raise PatFormatError("weights file does not exist", str(path))
    return decode_container(path.read_bytes(), expected_magic, str(path))


def save_weights(model, path: Union[str, Path]) -> Path:
    """Write a ``DgdModel`` or ``UnetWeights`` to ``path``."""
    return write_container(path, model.MAGIC, model.stage_tensors())


def load_weights(path: Union[str, Path]):
    """
    Load a model, choosing the class from the file's magic.

    Returns:
        ``DgdModel`` for "DGDW" files, ``UnetWeights`` for "UNTW" files
    """
    from .dgd import DgdModel
    from .unet import UnetWeights

    magic, stages = read_container(path)
    model_cls = DgdModel if magic == DGD_MAGIC else UnetWeights
    return model_cls.from_stage_tensors(stages)
