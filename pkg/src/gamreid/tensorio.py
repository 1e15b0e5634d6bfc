"""Binary serialization for tensors and training checkpoints.

Tensor format (magic ``GAMT``): version byte, rank byte, rank
little-endian u64 extents, then the float64 payload in row-major order.
Checkpoint format (magic ``GAMC``): version byte, a UTF-8 config text
block, then named tensors. Both loaders validate magic, version, and
payload length before returning anything.
"""

import io
import struct

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"GAMT"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"GAMC"
CHECKPOINT_VERSION = 1

_MAX_RANK = 8


def write_tensor(fh, arr):
    """Append one tensor record to a binary stream."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > _MAX_RANK:
        raise FormatError(f"tensor rank {arr.ndim} outside [1, {_MAX_RANK}]")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor data while reading {what}")
    return buf


def read_tensor(fh):
    """Read one tensor record from a binary stream."""
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<BB", _read_exact(fh, 2, "header"))
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if rank < 1 or rank > _MAX_RANK:
        raise FormatError(f"tensor rank {rank} outside [1, {_MAX_RANK}]")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents"))
    count = 1
    for s in shape:
        count *= s
    payload = _read_exact(fh, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path):
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes after tensor payload in {path}")
    return arr


def save_checkpoint(path, config_text, arrays):
    """Write a checkpoint: config text plus named float arrays.

    arrays is a mapping from dotted names to numpy arrays; iteration
    order of the mapping is preserved on disk.
    """
    blob = io.BytesIO()
    blob.write(CHECKPOINT_MAGIC)
    blob.write(struct.pack("<B", CHECKPOINT_VERSION))
    cfg = config_text.encode("utf-8")
    blob.write(struct.pack("<I", len(cfg)))
    blob.write(cfg)
    blob.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise FormatError(f"checkpoint entry name too long: {name[:40]}...")
        blob.write(struct.pack("<H", len(enc)))
        blob.write(enc)
        write_tensor(blob, np.atleast_1d(np.asarray(arr)))
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (config_text, dict of name -> array)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<B", _read_exact(fh, 1, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, cfg_len, "config text").decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "entry name length"))
            name = _read_exact(fh, name_len, "entry name").decode("utf-8")
            arrays[name] = read_tensor(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes after checkpoint entries in {path}")
    return config_text, arrays
