"""
Little-endian binary containers.

``ByteReader`` walks a buffer with offset-aware errors. The named-blob file
layout is shared by model checkpoints ("PRDL") and MIL models ("PMIL"):

    magic (4B) | version u32 | header u32 x H | blob_count u32 |
    per blob: name_len u16 + UTF-8 name + ndim u8 + dims u32 x ndim +
              float64 LE values |
    CRC32 u32 over everything before it
"""

import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Sequence, Tuple, Type, Union

import numpy as np

from ..errors import CheckpointFormatError, StoreFormatError

logger = logging.getLogger(__name__)


class ByteReader:
    """Sequential reader that reports the byte offset of every failure."""

    def __init__(
        self, buffer: Union[bytes, memoryview], error: Type[StoreFormatError] = StoreFormatError
    ) -> None:
        self.buffer = memoryview(buffer)
        self.offset = 0
        self.error = error

    def remaining(self) -> int:
        return len(self.buffer) - self.offset

    def take(self, count: int, what: str) -> memoryview:
        if count < 0 or self.remaining() < count:
            raise self.error(
                f"Truncated file while reading {what} (need {count} bytes, "
                f"{self.remaining()} left)",
                self.offset,
            )
        chunk = self.buffer[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def u8(self, what: str) -> int:
        return self.unpack("<B", what)[0]

    def u16(self, what: str) -> int:
        return self.unpack("<H", what)[0]

    def u32(self, what: str) -> int:
        return self.unpack("<I", what)[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        chunk = self.take(count * itemsize, what)
        return np.frombuffer(chunk, dtype=dtype, count=count)

    def text(self, length: int, what: str) -> str:
        start = self.offset
        raw = bytes(self.take(length, what))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise self.error(f"Invalid UTF-8 in {what}", start) from None


def verify_crc(data: bytes, error: Type[StoreFormatError]) -> bytes:
    """Check the trailing CRC32 and return the payload before it."""
    if len(data) < 4:
        raise error("Truncated file: missing checksum", len(data))
    payload, trailer = data[:-4], data[-4:]
    expected = struct.unpack("<I", trailer)[0]
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != expected:
        raise error(
            f"Checksum mismatch (stored {expected:#010x}, computed {actual:#010x})",
            len(payload),
        )
    return payload


def append_crc(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def write_blob_file(
    path: Union[str, Path],
    magic: bytes,
    version: int,
    header: Sequence[int],
    blobs: Mapping[str, np.ndarray],
) -> Path:
    """Serialize named float64 arrays behind a fixed header."""
    parts = [magic, struct.pack("<I", version)]
    parts.extend(struct.pack("<I", int(value)) for value in header)
    parts.append(struct.pack("<I", len(blobs)))
    for name, values in blobs.items():
        array = np.ascontiguousarray(values, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.extend(struct.pack("<I", extent) for extent in array.shape)
        parts.append(array.tobytes())

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(append_crc(b"".join(parts)))
    logger.debug(f"Wrote {len(blobs)} blobs to {path}")
    return path


def read_blob_file(
    path: Union[str, Path], magic: bytes, version: int, header_length: int
) -> Tuple[Tuple[int, ...], "OrderedDict[str, np.ndarray]"]:
    """Parse a named-blob file, validating magic, version and checksum."""
    data = Path(path).read_bytes()
    error = CheckpointFormatError
    reader = ByteReader(data, error)
    found = bytes(reader.take(len(magic), "magic"))
    if found != magic:
        raise error(f"Bad magic {found!r}, expected {magic!r}", 0)
    payload = verify_crc(data, error)
    reader = ByteReader(payload, error)
    reader.take(len(magic), "magic")
    found_version = reader.u32("version")
    if found_version != version:
        raise error(f"Unsupported format version {found_version}", reader.offset - 4)
    header = tuple(reader.u32(f"header[{i}]") for i in range(header_length))

    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for index in range(reader.u32("blob count")):
        name = reader.text(reader.u16(f"blob {index} name length"), f"blob {index} name")
        shape = tuple(reader.u32(f"{name} dim") for _ in range(reader.u8(f"{name} ndim")))
        count = int(np.prod(shape)) if shape else 1
        blobs[name] = reader.array("<f8", count, name).reshape(shape).astype(np.float64)
    if reader.remaining():
        raise error(f"{reader.remaining()} trailing bytes after blobs", reader.offset)
    return header, blobs
