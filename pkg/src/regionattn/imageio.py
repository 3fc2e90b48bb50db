"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only.

Float images live in [-1, 1]; byte value ``b`` maps to ``b / 127.5 - 1``.
"""
import io

import numpy as np


def pixels_to_bytes(img):
    x = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor((x + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def bytes_to_pixels(arr):
    return np.asarray(arr, dtype=np.float64) / 127.5 - 1.0


def _header(kind, w, h):
    return f"{kind}\n{w} {h}\n255\n".encode("ascii")


def encode_ppm(rgb_bytes):
    a = np.asarray(rgb_bytes, dtype=np.uint8)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"PPM needs an (h, w, 3) array, got {a.shape}")
    return _header("P6", a.shape[1], a.shape[0]) + a.tobytes()


def encode_pgm(gray_bytes):
    a = np.asarray(gray_bytes, dtype=np.uint8)
    if a.ndim != 2:
        raise ValueError(f"PGM needs an (h, w) array, got {a.shape}")
    return _header("P5", a.shape[1], a.shape[0]) + a.tobytes()


def _read_token(stream):
    tok = b""
    while True:
        c = stream.read(1)
        if not c:
            break
        if c == b"#" and not tok:
            stream.readline()
            continue
        if c.isspace():
            if tok:
                break
            continue
        tok += c
    return tok


def decode_netpbm(data):
    """Parse P5/P6 bytes into a uint8 array ((h, w) or (h, w, 3))."""
    stream = io.BytesIO(data)
    magic = _read_token(stream)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported netpbm magic {magic!r}")
    w, h, maxval = (int(_read_token(stream)) for _ in range(3))
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    depth = 3 if magic == b"P6" else 1
    raw = stream.read(w * h * depth)
    if len(raw) != w * h * depth:
        raise ValueError("truncated netpbm payload")
    a = np.frombuffer(raw, dtype=np.uint8)
    return a.reshape(h, w, 3) if depth == 3 else a.reshape(h, w)


def write_ppm(path, img):
    """Write a float image in [-1, 1]."""
    with open(path, "wb") as f:
        f.write(encode_ppm(pixels_to_bytes(img)))


def read_ppm(path):
    with open(path, "rb") as f:
        a = decode_netpbm(f.read())
    if a.ndim != 3:
        raise ValueError(f"{path} is not a PPM image")
    return bytes_to_pixels(a)


def write_pgm(path, gray_bytes):
    with open(path, "wb") as f:
        f.write(encode_pgm(gray_bytes))


def read_pgm(path):
    with open(path, "rb") as f:
        a = decode_netpbm(f.read())
    if a.ndim != 2:
        raise ValueError(f"{path} is not a PGM image")
    return a


def read_mask_pgm(path):
    """PGM mask; any nonzero pixel counts as inside."""
    return (read_pgm(path) > 0).astype(np.uint8)


def write_mask_pgm(path, mask):
    write_pgm(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))
