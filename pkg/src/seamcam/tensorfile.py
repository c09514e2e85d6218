"""Binary tensor container used for fixtures, CAM export, and checkpoints.

Layout (little-endian throughout):

    magic   4 bytes  b"SEAM"
    version u32      1 = float32 payload, 2 = float64 payload
    ndim    u32
    dims    u32 * ndim
    payload row-major floats

Version 1 is the interchange format (CAM export, dataset fixtures).
Version 2 exists for checkpoints, where bit-exact resume requires the
full float64 training state.
"""

import io
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"SEAM"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_tensor(fp, array, version=1):
    """Serialize one array; returns the number of bytes written."""
    if version not in _DTYPES:
        raise ParseError(f"unsupported tensor file version {version}")
    arr = np.asarray(array).astype(_DTYPES[version], order="C")
    header = MAGIC + struct.pack("<II", version, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    fp.write(header)
    fp.write(arr.tobytes())
    return len(header) + arr.nbytes


def save_tensor(path, array, version=1):
    with open(path, "wb") as fp:
        write_tensor(fp, array, version)


def read_tensor(fp):
    """Read one record; raises ParseError naming the failing byte offset."""
    start = fp.tell()

    def need(n, what):
        buf = fp.read(n)
        if len(buf) != n:
            raise ParseError(
                f"truncated tensor file: expected {what} at byte {fp.tell() - len(buf)}")
        return buf

    magic = need(4, "magic")
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r} at byte {start}")
    version, ndim = struct.unpack("<II", need(8, "version/ndim"))
    if version not in _DTYPES:
        raise ParseError(f"unsupported version {version} at byte {start + 4}")
    if ndim > 8:
        raise ParseError(f"implausible ndim {ndim} at byte {start + 8}")
    dims = struct.unpack(f"<{ndim}I", need(4 * ndim, "dims"))
    dtype = _DTYPES[version]
    count = int(np.prod(dims)) if ndim else 1
    payload = need(count * dtype.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(np.float64)  # astype preserves 0-d shapes, copies payload


def load_tensor(path):
    with open(path, "rb") as fp:
        arr = read_tensor(fp)
        trailing = fp.read(1)
        if trailing:
            raise ParseError(f"trailing bytes after tensor record at byte {fp.tell() - 1}")
        return arr


def save_bundle(bin_path, index_path, tensors, meta=None, version=2):
    """Write named tensors concatenated into one blob plus a text index.

    The index holds ``key=value`` metadata lines followed by one
    ``name offset`` line per tensor, offsets into the blob file.
    """
    offsets = {}
    with open(bin_path, "wb") as fp:
        for name, arr in tensors.items():
            offsets[name] = fp.tell()
            write_tensor(fp, arr, version=version)
    lines = [f"{k}={v}" for k, v in (meta or {}).items()]
    lines += [f"{name} {off}" for name, off in offsets.items()]
    with open(index_path, "w") as fp:
        fp.write("\n".join(lines) + "\n")


def load_bundle(bin_path, index_path):
    """Read a blob written by save_bundle; returns (tensors, meta)."""
    meta = {}
    entries = []
    with open(index_path) as fp:
        for lineno, raw in enumerate(fp, 1):
            line = raw.strip()
            if not line:
                continue
            if "=" in line.split(" ")[0]:
                key, _, value = line.partition("=")
                meta[key] = value
            else:
                parts = line.rsplit(" ", 1)
                if len(parts) != 2 or not parts[1].isdigit():
                    raise ParseError(f"{index_path}:{lineno}: malformed index line {line!r}")
                entries.append((parts[0], int(parts[1])))
    tensors = {}
    with open(bin_path, "rb") as fp:
        for name, offset in entries:
            fp.seek(offset)
            tensors[name] = read_tensor(fp)
    return tensors, meta


def tensor_bytes(array, version=1):
    """Serialized form of one array (for hashing and tests)."""
    buf = io.BytesIO()
    write_tensor(buf, array, version)
    return buf.getvalue()
