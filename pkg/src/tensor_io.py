#!/usr/bin/env python3
"""
Binary formats

Tensor blob (little-endian):
    b"WSR1" | u32 rank | u32 dims[rank] | float32 elements, row-major

Named-section container (checkpoints, weight files, warp dumps):
    b"WSRC" | u32 version | u32 meta_len | meta (sorted-key JSON, utf-8)
    | u32 section_count | { u32 name_len | name | u64 blob_len | tensor blob }*
"""

import io
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Tuple, Union

import numpy as np

from constants import FileMagic
from exceptions import CorruptFileError, VersionMismatchError
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray]


def _as_array(value: ArrayLike) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def encode_tensor(value: ArrayLike) -> bytes:
    """Serialize an array as a WSR1 blob (elements stored as float32)"""
    array = np.ascontiguousarray(_as_array(value), dtype='<f4')
    header = FileMagic.TENSOR + struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape)
    return header + array.tobytes(order='C')


def decode_tensor(blob: bytes) -> np.ndarray:
    """Parse a WSR1 blob into a float32 array"""
    if len(blob) < 8 or blob[:4] != FileMagic.TENSOR:
        raise CorruptFileError("Tensor blob has a bad magic number")
    (rank,) = struct.unpack_from('<I', blob, 4)
    header_len = 8 + 4 * rank
    if len(blob) < header_len:
        raise CorruptFileError(f"Tensor blob truncated in header (rank {rank})")
    shape = struct.unpack_from(f'<{rank}I', blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != header_len + 4 * count:
        raise CorruptFileError(
            f"Tensor blob length {len(blob)} does not match shape {shape} ({header_len + 4 * count} bytes)")
    return np.frombuffer(blob, dtype='<f4', count=count, offset=header_len).reshape(shape).astype(np.float32)


def save_tensor(value: ArrayLike, path: Union[str, Path]) -> None:
    """Write a single WSR1 tensor file"""
    Path(path).write_bytes(encode_tensor(value))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    """Read a single WSR1 tensor file"""
    return decode_tensor(Path(path).read_bytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise CorruptFileError(f"File truncated while reading {what}")
    return data


def write_container(path: Union[str, Path], sections: Mapping[str, ArrayLike],
                    meta: Mapping[str, Any] = None) -> None:
    """
    Write named tensors plus JSON metadata

    Sections keep their insertion order, so identical inputs give identical bytes.
    """
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode('utf-8')
    buffer = io.BytesIO()
    buffer.write(FileMagic.CONTAINER)
    buffer.write(struct.pack('<II', FileMagic.CONTAINER_VERSION, len(meta_bytes)))
    buffer.write(meta_bytes)
    buffer.write(struct.pack('<I', len(sections)))
    for name, value in sections.items():
        name_bytes = name.encode('utf-8')
        blob = encode_tensor(value)
        buffer.write(struct.pack('<I', len(name_bytes)))
        buffer.write(name_bytes)
        buffer.write(struct.pack('<Q', len(blob)))
        buffer.write(blob)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    logger.debug(f"Wrote {len(sections)} sections to {path}")


def read_container(path: Union[str, Path]) -> Tuple['OrderedDict[str, np.ndarray]', Dict[str, Any]]:
    """
    Read a container written by write_container

    Raises:
        CorruptFileError: bad magic, truncation or trailing bytes
        VersionMismatchError: written by another format version
    """
    path = Path(path)
    with open(path, 'rb') as stream:
        if _read_exact(stream, 4, 'magic') != FileMagic.CONTAINER:
            raise CorruptFileError(f"{path} is not a WarpSR container")
        version, meta_len = struct.unpack('<II', _read_exact(stream, 8, 'header'))
        if version != FileMagic.CONTAINER_VERSION:
            raise VersionMismatchError(
                f"{path} has format version {version}, expected {FileMagic.CONTAINER_VERSION}")
        try:
            meta = json.loads(_read_exact(stream, meta_len, 'metadata').decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFileError(f"{path} has unreadable metadata") from e

        (count,) = struct.unpack('<I', _read_exact(stream, 4, 'section count'))
        sections: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack('<I', _read_exact(stream, 4, 'section name length'))
            name = _read_exact(stream, name_len, 'section name').decode('utf-8')
            (blob_len,) = struct.unpack('<Q', _read_exact(stream, 8, 'section length'))
            sections[name] = decode_tensor(_read_exact(stream, blob_len, f'section {name}'))

        if stream.read(1):
            raise CorruptFileError(f"{path} has trailing bytes after {count} sections")
    return sections, meta
