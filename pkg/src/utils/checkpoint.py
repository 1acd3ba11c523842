"""
Parameter checkpoint files.

Layout (little-endian): magic b"TRTMPARM", version u32, count u32, then per
tensor: name length u16, UTF-8 name, rank u8, dims u32 each, f32 data.
"""
import os
import struct

import numpy as np

from src.utils.errors import FormatError
from src.utils.logger import logger

MAGIC = b"TRTMPARM"
VERSION = 1


def save_checkpoint(path, arrays):
    """
    Write named arrays to `path`.

    Args:
        path (str): Output file
        arrays (dict): name -> ndarray (stored as f32)
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, array in arrays.items():
            encoded = name.encode("utf-8")
            data = np.ascontiguousarray(array, dtype="<f4")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    logger.debug(f"Saved {len(arrays)} tensors to {path}")


def load_checkpoint(path):
    """
    Read a checkpoint written by `save_checkpoint`.

    Returns:
        dict: name -> float32 ndarray, in file order
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        offset = 16
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            arrays[name] = data.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays
