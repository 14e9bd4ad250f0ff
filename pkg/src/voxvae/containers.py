"""Binary containers: VXT1 tensors and metadata-prefixed tensor bundles.

VXT1 layout: b"VXT1", u32 rank, u32 dims[rank], then little-endian float32
values in row-major order.

Bundle layout: 4-byte magic (e.g. b"VAE1"), u32 byte length of a UTF-8 JSON
metadata block, the JSON block, then VXT1 tensors back to back in the order
listed under the metadata key ``"tensors"``.
"""
import io
import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

VXT_MAGIC = b"VXT1"


def write_vxt(fh, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(VXT_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_vxt(fh):
    magic = fh.read(4)
    if magic != VXT_MAGIC:
        raise FormatError(f"expected VXT1 tensor magic, found {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated VXT1 payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def atomic_write_bytes(path, data):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, array):
    buf = io.BytesIO()
    write_vxt(buf, array)
    atomic_write_bytes(path, buf.getvalue())


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_vxt(fh)


def encode_bundle(magic, meta, tensors):
    """``tensors`` is an ordered list of (name, array)."""
    if len(magic) != 4:
        raise ValueError("bundle magic must be 4 bytes")
    meta = dict(meta)
    meta["tensors"] = [name for name, _ in tensors]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, arr in tensors:
        write_vxt(buf, arr)
    return buf.getvalue()


def decode_bundle(data, magic):
    fh = io.BytesIO(data)
    found = fh.read(4)
    if found != magic:
        raise FormatError(f"expected {magic!r} container, found {found!r}")
    (n,) = struct.unpack("<I", fh.read(4))
    meta = json.loads(fh.read(n).decode("utf-8"))
    tensors = {name: read_vxt(fh) for name in meta["tensors"]}
    return meta, tensors


def save_bundle(path, magic, meta, tensors):
    atomic_write_bytes(path, encode_bundle(magic, meta, tensors))


def load_bundle(path, magic):
    with open(path, "rb") as fh:
        return decode_bundle(fh.read(), magic)
