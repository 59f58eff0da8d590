"""DKTF checkpoint files.

Layout, all little endian::

    b"DKTF"            magic
    u32                format version (1)
    u64                config text length, then the UTF-8 config echo
    u64                record count
    record x count:
        u64            name length, then the UTF-8 name
        u64            rank
        u64 x rank     dims
        f64 x prod     values, row-major

Values are stored as 64-bit floats whatever the runtime precision, so a
save/load cycle in 64-bit mode reproduces every parameter bit for bit.
"""

import logging
import pathlib
import struct
from dataclasses import dataclass

import numpy as np
from result import Err, Ok, Result

from darkformer.model import ModelConfig, ModelParams, param_shapes
from darkformer.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DKTF"
VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    """Config echo plus named parameter arrays in file order."""

    config_text: str
    arrays: dict[str, np.ndarray]


def encode(config_text: str, tensors: dict[str, Tensor]) -> bytes:
    """Serialize parameters in sorted name order."""
    config_bytes = config_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(config_bytes)), config_bytes, struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        data = tensors[name].data
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack(f"<Q{data.ndim}Q", data.ndim, *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise ValueError(f"truncated checkpoint while reading {what} at byte {self.offset}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u64(self, what: str) -> int:
        return int(struct.unpack("<Q", self.take(8, what))[0])


def decode(data: bytes) -> Result[Checkpoint, str]:
    """Parse checkpoint bytes."""
    reader = _Reader(data)
    try:
        if (magic := reader.take(4, "magic")) != MAGIC:
            return Err(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = struct.unpack("<I", reader.take(4, "version"))[0]
        if version != VERSION:
            return Err(f"unsupported checkpoint version {version}")
        config_text = reader.take(reader.u64("config length"), "config").decode("utf-8")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(reader.u64("record count")):
            name = reader.take(reader.u64("name length"), "name").decode("utf-8")
            rank = reader.u64(f"rank of {name}")
            dims = tuple(reader.u64(f"dims of {name}") for _ in range(rank))
            count = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(reader.take(8 * count, f"values of {name}"), dtype="<f8")
            if name in arrays:
                return Err(f"duplicate parameter record {name}")
            arrays[name] = values.astype(np.float64).reshape(dims)
    except (ValueError, UnicodeDecodeError) as ex:
        return Err(str(ex))
    if reader.offset != len(data):
        return Err(f"{len(data) - reader.offset} trailing bytes after the last record")
    return Ok(Checkpoint(config_text=config_text, arrays=arrays))


def to_params(ckpt: Checkpoint, config: ModelConfig) -> Result[ModelParams, str]:
    """Rebuild trainable parameters, checking names and shapes against config."""
    expected = param_shapes(config)
    if missing := sorted(set(expected) - set(ckpt.arrays)):
        return Err(f"checkpoint lacks parameters {missing}")
    if extra := sorted(set(ckpt.arrays) - set(expected)):
        return Err(f"checkpoint has unexpected parameters {extra}")
    for name, shape in expected.items():
        if ckpt.arrays[name].shape != shape:
            return Err(f"parameter {name} has shape {ckpt.arrays[name].shape}, config implies {shape}")
    tensors = {name: Tensor(ckpt.arrays[name].copy(), requires_grad=True) for name in sorted(expected)}
    return Ok(ModelParams(config=config, tensors=tensors))


def save(path: pathlib.Path, config_text: str, tensors: dict[str, Tensor]) -> Result[str, str]:
    """Write a checkpoint file."""
    try:
        path.write_bytes(encode(config_text, tensors))
    except OSError as ex:
        return Err(f"Can't write checkpoint {path}: {ex}")
    logger.info("saved %d parameter tensors to %s", len(tensors), path)
    return Ok(f"wrote {path}")


def load(path: pathlib.Path) -> Result[Checkpoint, str]:
    """Read a checkpoint file."""
    try:
        data = path.read_bytes()
    except OSError as ex:
        return Err(f"Can't read checkpoint {path}: {ex}")
    match decode(data):
        case Ok(ckpt):
            return Ok(ckpt)
        case Err(msg):
            return Err(f"{path}: {msg}")
    raise AssertionError("unreachable")
