"""Raster files and a minimal binary array container.

Array file layout (little-endian, 16-byte header followed by C-ordered data)::

    bytes 0-3   magic b"GAR1"
    bytes 4-5   dtype code (uint16)
    bytes 6-7   channels   (uint16)
    bytes 8-11  height     (uint32)
    bytes 12-15 width      (uint32)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, StorageError

MAGIC = b"GAR1"
_HEADER = struct.Struct("<4sHHII")
DTYPE_CODES = {1: np.dtype("uint8"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_CODE_FOR = {v: k for k, v in DTYPE_CODES.items()}


def read_image(path) -> np.ndarray:
    """Load a raster as an H x W x 3 uint8 array (grayscale is expanded)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from None


def write_image(path, array: np.ndarray) -> Path:
    path = Path(path)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def write_array(path, array: np.ndarray) -> Path:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected H x W or H x W x C array, got shape {arr.shape}")
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODE_FOR.get(np.dtype(dtype))
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    h, w, c = arr.shape
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, code, c, h, w))
            fh.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def read_array(path) -> np.ndarray:
    """Inverse of :func:`write_array`; always returns H x W x C."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, code, c, h, w = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        if code not in DTYPE_CODES:
            raise DataError(f"{path}: unknown dtype code {code}")
        dtype = DTYPE_CODES[code]
        data = fh.read()
    expected = h * w * c * dtype.itemsize
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} data bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(h, w, c).copy()
