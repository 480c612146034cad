"""Reader/writer for the MGMT raster container.

Layout (little-endian): ``b"MGMT"``, u16 version, u16 dtype code, u32 H,
u32 W, u32 C, then the row-major, channel-last payload.
"""

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MGMT"
VERSION = 1
_HEADER = struct.Struct("<4sHHIII")

DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<i4"), 2: np.dtype("<f4")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


class RasterFormatError(ValueError):
    pass


def _as_hwc(arr):
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.ndim == 3:
        return arr
    raise RasterFormatError(f"raster must be 2-D or 3-D, got shape {arr.shape}")


def encode_raster(arr) -> bytes:
    arr = np.asarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _CODE_OF:
        raise RasterFormatError(f"unsupported dtype {arr.dtype}; use uint8, int32 or float32")
    hwc = _as_hwc(arr)
    h, w, c = hwc.shape
    header = _HEADER.pack(MAGIC, VERSION, _CODE_OF[dtype], h, w, c)
    return header + np.ascontiguousarray(hwc, dtype=dtype).tobytes()


def decode_raster(buf: bytes, squeeze: bool = True) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise RasterFormatError("truncated header")
    magic, version, code, h, w, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise RasterFormatError(f"unsupported version {version}")
    if code not in DTYPE_CODES:
        raise RasterFormatError(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    expected = h * w * c * dtype.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise RasterFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, c)
    if squeeze and c == 1:
        arr = arr[:, :, 0]
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_raster(path, arr):
    Path(path).write_bytes(encode_raster(arr))


def read_raster(path, squeeze: bool = True) -> np.ndarray:
    return decode_raster(Path(path).read_bytes(), squeeze=squeeze)


def save_png(path, image):
    """Write an image in [-1, 1] (H×W×3) as an 8-bit PNG preview."""
    from PIL import Image

    arr = np.clip((np.asarray(image) + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    Path(path).write_bytes(buf.getvalue())
