"""Binary tensor checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"RGATTN01"
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys)
    count        u32
    count times:
        name_len u16, name (UTF-8)
        ndim     u8,  ndim x u32 extents
        data     prod(extents) x float64, row-major

Tensors are written in the order given, so equal inputs give equal bytes.
"""
import json
import struct

import numpy as np

MAGIC = b"RGATTN01"


def save_tensors(path, header, tensors):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic bytes")
    pos = 8

    def unpack(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = unpack("<I")
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = unpack("<H")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = unpack("<B")
        shape = unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        tensors[name] = arr
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, tensors
