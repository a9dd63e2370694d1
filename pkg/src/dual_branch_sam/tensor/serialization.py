"""
DBSM tensor container, the on-disk format for checkpoints, datasets and volumes.

Layout (little-endian)::

    b"DBSM"  u32 version=1  u32 count
    per tensor: u16 name_len, name (UTF-8), u8 frozen, u8 ndim,
                ndim x u32 extents, row-major float32 values
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np

from dual_branch_sam.exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"DBSM"
VERSION = 1


@dataclass
class TensorRecord:
    name: str
    array: np.ndarray
    frozen: bool = False


def write_tensors(path: Union[str, Path], records: Iterable[TensorRecord]):
    """
    Write ``records`` to ``path`` in order. Values are stored as float32.
    """
    records = list(records)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for rec in records:
        name = rec.name.encode("utf-8")
        array = np.asarray(rec.array)
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<BB", int(bool(rec.frozen)), array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Wrote {len(records)} tensors to {path}")


def read_tensors(path: Union[str, Path]) -> List[TensorRecord]:
    """
    Read every tensor of a DBSM file.

    Raises
    ------
    FormatError
        On wrong magic, an unsupported version, a name that is not UTF-8 or
        truncated content.
    """
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a DBSM file (magic {blob[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported DBSM version {version}")
        offset = 12
        records = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            frozen, ndim = struct.unpack_from("<BB", blob, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * size > len(blob):
                raise FormatError(f"{path}: truncated data for tensor {name!r}")
            array = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * size
            records.append(TensorRecord(name, array, bool(frozen)))
    except struct.error as e:
        raise FormatError(f"{path}: truncated DBSM header: {e}")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: tensor name is not valid UTF-8: {e}")
    return records


def read_tensor_map(path: Union[str, Path]) -> dict:
    """``name -> array`` view of :func:`read_tensors`."""
    return {rec.name: rec.array for rec in read_tensors(path)}
