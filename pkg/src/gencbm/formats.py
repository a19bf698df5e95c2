"""Bit-exact file formats: GCT1 tensors, binary PPM/PGM, JSON, atomic writes.

GCT1 layout::

    b"GCT1" | dtype code (u8) | ndim (u8) | ndim x dim (u32 LE) | payload (row-major, LE)

with dtype code 1 for float32 and 2 for uint8.  PPM/PGM files are written
with the exact header ``P6\\n{w} {h}\\n255\\n`` (``P5`` for grayscale) and no
comments; comments are tolerated on read.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"GCT1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
CODE_OF = {np.dtype("<f4"): 1, np.dtype("u1"): 2}


class FormatError(ValueError):
    """Base class for malformed or unsupported files."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DtypeMismatchError(FormatError):
    pass


class ImageHeaderError(FormatError):
    pass


class MaskValueError(FormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    # canonical form: sorted keys, fixed indent, trailing newline
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path):
    with open(path, "rb") as fh:
        return json.loads(fh.read().decode("utf-8"))


# ---------------------------------------------------------------- tensors


def encode_tensor(array) -> bytes:
    """Serialize a float32-castable or uint8 array to GCT1 bytes.

    Floating arrays are stored as float32; integer and boolean arrays must
    fit in uint8.
    """
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = a.astype("<f4")
    elif a.dtype.kind in "biu":
        if a.size and (a.min() < 0 or a.max() > 255):
            raise DtypeMismatchError("integer tensor does not fit in uint8")
        a = a.astype("u1")
    else:
        raise DtypeMismatchError(f"unsupported dtype {a.dtype}")
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<BB", CODE_OF[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def decode_tensor(data: bytes, dtype=None) -> np.ndarray:
    if len(data) < 6:
        raise TruncatedPayloadError("file shorter than the GCT1 header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    code, ndim = data[4], data[5]
    if code not in DTYPE_CODES:
        raise DtypeMismatchError(f"unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    if dtype is not None and np.dtype(dtype).newbyteorder("<") != dt:
        raise DtypeMismatchError(f"expected {np.dtype(dtype)}, file holds {dt}")
    head = 6 + 4 * ndim
    if len(data) < head:
        raise TruncatedPayloadError("truncated dimension table")
    shape = struct.unpack(f"<{ndim}I", data[6:head])
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = data[head:]
    if len(payload) < nbytes:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {nbytes} bytes")
    if len(payload) > nbytes:
        raise FormatError(f"{len(payload) - nbytes} trailing bytes after payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def write_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path, dtype=None) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), dtype)


# ----------------------------------------------------------------- images


def encode_image(image) -> bytes:
    """uint8 ``(H, W, 3)`` to P6 or ``(H, W)`` to P5."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        raise DtypeMismatchError(f"images must be uint8, got {a.dtype}")
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise ImageHeaderError(f"cannot store an image of shape {a.shape}")
    h, w = a.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(a).tobytes()


def _header_tokens(data: bytes, count: int):
    # whitespace-separated tokens; '#' starts a comment running to end of line
    tokens, i, n = [], 0, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageHeaderError("unexpected end of header")
        tokens.append(data[start:i])
    if i >= n or not data[i:i + 1].isspace():
        raise ImageHeaderError("missing whitespace after maxval")
    return tokens, i + 1


def decode_image(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageHeaderError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageHeaderError("non-numeric header field") from None
    if maxval != 255:
        raise ImageHeaderError(f"maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise ImageHeaderError("image dimensions must be positive")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[offset:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise FormatError("trailing bytes after image payload")
    img = np.frombuffer(payload, dtype=np.uint8).copy()
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)


def write_image(path, image) -> None:
    atomic_write_bytes(path, encode_image(image))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def mask_to_u8(mask) -> np.ndarray:
    """Boolean mask to {0, 255}; uint8 input must already use only those values."""
    m = np.asarray(mask)
    if m.dtype == bool:
        return m.astype(np.uint8) * 255
    if m.dtype != np.uint8 or not np.all((m == 0) | (m == 255)):
        raise MaskValueError("mask values must be 0 or 255")
    return m


def write_mask(path, mask) -> None:
    m = mask_to_u8(mask)
    if m.ndim != 2:
        raise ImageHeaderError("masks are two-dimensional")
    write_image(path, m)


def read_mask(path) -> np.ndarray:
    m = read_image(path)
    if m.ndim != 2:
        raise ImageHeaderError("mask file is not grayscale")
    mask_to_u8(m)
    return m == 255
