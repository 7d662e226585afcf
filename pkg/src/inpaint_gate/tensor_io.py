"""Bit-exact readers and writers for the engine's on-disk formats.

Three formats are shared by every module and by external producers:

* tensors — "HFT1" binary: 4-byte magic, version byte 0x01, dtype byte
  0x00 (float32), ndim as u16 little-endian, each dim as u32 little-endian,
  then the row-major float32 payload, little-endian.
* masks — binary PGM ("P5", maxval 255); pixel values >= 128 read as
  foreground. Writing emits 255/0 only.
* images — binary PPM ("P6", maxval 255) or 8-bit RGB(A) PNG; PNG alpha is
  composited over white and dropped.

In-memory representations are plain numpy arrays: tensors are float32
ndarrays, masks are bool (H, W) arrays, images are uint8 (H, W, 3) arrays.
Core functions operate on binary streams; ``load_*``/``save_*`` wrappers
take paths.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
from PIL import Image

MAGIC = b"HFT1"
VERSION = 1
DTYPE_F32 = 0

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class BadMagicError(FormatError):
    """Stream does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """Tensor file declares a version this reader does not know."""


class UnsupportedDtypeError(FormatError):
    """Tensor file declares a dtype other than float32."""


class UnsupportedFormatError(FormatError):
    """Recognizable but unsupported container (e.g. ASCII PGM)."""


class UnsupportedDepthError(FormatError):
    """Sample depth other than 8 bits per channel."""


class TruncatedFileError(FormatError):
    """Stream ended before the declared payload was complete."""


class NonFiniteValueError(FormatError):
    """Tensor payload contains NaN or infinity."""


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = source.read(remaining)
        if not chunk:
            got = n - remaining
            raise TruncatedFileError(f"{what}: expected {n} bytes, got {got}")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------- tensors


def write_tensor(tensor: np.ndarray, sink: BinaryIO) -> int:
    """Write a float32 tensor in HFT1 format; returns total bytes written."""
    arr = np.asarray(tensor)
    if arr.ndim < 1:
        raise ValueError("tensor must have at least one dimension")
    if arr.ndim > 0xFFFF:
        raise ValueError(f"too many dimensions: {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"dims must be positive, got {arr.shape}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise ValueError(f"dim too large for u32: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError("tensor contains non-finite values")
    header = struct.pack("<4sBBH", MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    sink.write(header)
    sink.write(dims)
    sink.write(payload)
    return len(header) + len(dims) + len(payload)


def read_tensor(source: BinaryIO) -> np.ndarray:
    """Read an HFT1 tensor; inverse of :func:`write_tensor`."""
    magic = _read_exact(source, 4, "tensor header")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, dtype, ndim = struct.unpack("<BBH", _read_exact(source, 4, "tensor header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    if ndim == 0:
        raise FormatError("tensor declares zero dimensions")
    dims = struct.unpack(f"<{ndim}I", _read_exact(source, 4 * ndim, "tensor dims"))
    if any(d == 0 for d in dims):
        raise FormatError(f"tensor declares a zero-sized dim: {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(source, 4 * count, "tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError("tensor payload contains non-finite values")
    return arr


# ------------------------------------------------------------ PGM masks


def _read_pnm_token(source: BinaryIO) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments.

    Consumes exactly one trailing whitespace byte, per the PNM grammar.
    """
    c = source.read(1)
    while True:
        if c == b"":
            raise TruncatedFileError("unexpected end of header")
        if c == b"#":
            while c not in (b"", b"\n", b"\r"):
                c = source.read(1)
            continue
        if c.isspace():
            c = source.read(1)
            continue
        break
    token = bytearray()
    while c != b"" and not c.isspace():
        token += c
        c = source.read(1)
    return bytes(token)


def _pnm_int(token: bytes, what: str) -> int:
    try:
        return int(token.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"invalid {what} token {token!r}") from None


def read_mask(source: BinaryIO) -> np.ndarray:
    """Read a binary PGM into a bool (H, W) mask; values >= 128 are true."""
    magic = _read_pnm_token(source)
    if magic == b"P2":
        raise UnsupportedFormatError("ASCII PGM (P2) is not supported, use binary P5")
    if magic != b"P5":
        raise UnsupportedFormatError(f"not a binary PGM: magic {magic!r}")
    width = _pnm_int(_read_pnm_token(source), "width")
    height = _pnm_int(_read_pnm_token(source), "height")
    if width < 1 or height < 1:
        raise FormatError(f"invalid mask size {width}x{height}")
    maxval = _pnm_int(_read_pnm_token(source), "maxval")
    if maxval != 255:
        raise UnsupportedDepthError(f"PGM maxval {maxval} unsupported, expected 255")
    payload = _read_exact(source, width * height, "PGM payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return pixels >= 128


def write_mask(mask: np.ndarray, sink: BinaryIO) -> int:
    """Write a bool mask as binary PGM (true -> 255); returns bytes written."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.dtype != np.bool_:
        raise ValueError(f"mask must be a 2-d bool array, got {arr.dtype} {arr.shape}")
    height, width = arr.shape
    if width < 1 or height < 1:
        raise ValueError(f"invalid mask size {width}x{height}")
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    payload = np.where(arr, 255, 0).astype(np.uint8).tobytes()
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


# --------------------------------------------------------------- images


def _read_ppm_body(source: BinaryIO) -> np.ndarray:
    width = _pnm_int(_read_pnm_token(source), "width")
    height = _pnm_int(_read_pnm_token(source), "height")
    if width < 1 or height < 1:
        raise FormatError(f"invalid image size {width}x{height}")
    maxval = _pnm_int(_read_pnm_token(source), "maxval")
    if maxval != 255:
        raise UnsupportedDepthError(f"PPM maxval {maxval} unsupported, expected 255")
    payload = _read_exact(source, 3 * width * height, "PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def _read_png(data: bytes) -> np.ndarray:
    if len(data) < 26 or data[:8] != PNG_SIGNATURE or data[12:16] != b"IHDR":
        raise FormatError("corrupt PNG header")
    bit_depth = data[24]
    if bit_depth != 8:
        raise UnsupportedDepthError(f"PNG bit depth {bit_depth} unsupported, expected 8")
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except OSError as exc:
        raise FormatError(f"PNG decode failed: {exc}") from None
    if img.mode != "RGB":
        # Composite any alpha over white before dropping it.
        rgba = img.convert("RGBA")
        background = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
        img = Image.alpha_composite(background, rgba).convert("RGB")
    return np.asarray(img, dtype=np.uint8).copy()


def read_image(source: BinaryIO) -> np.ndarray:
    """Read a P6 PPM or 8-bit PNG into a uint8 (H, W, 3) RGB array."""
    first = source.read(1)
    if first == b"":
        raise TruncatedFileError("empty image stream")
    if first == b"\x89":
        return _read_png(first + source.read())
    if first == b"P":
        kind = source.read(1)
        if kind == b"6":
            return _read_ppm_body(source)
        raise UnsupportedFormatError(f"unsupported PNM image type P{kind!r}")
    raise UnsupportedFormatError(f"unrecognized image format (first byte {first!r})")


def write_image(image: np.ndarray, sink: BinaryIO) -> int:
    """Write a uint8 RGB array as binary PPM; returns bytes written."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"image must be a uint8 (H, W, 3) array, got {arr.dtype} {arr.shape}")
    height, width = arr.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    payload = arr.tobytes()
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


# ---------------------------------------------------------- path helpers


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_tensor(path: str | Path, tensor: np.ndarray) -> int:
    with open(path, "wb") as f:
        return write_tensor(tensor, f)


def load_mask(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_mask(f)


def save_mask(path: str | Path, mask: np.ndarray) -> int:
    with open(path, "wb") as f:
        return write_mask(mask, f)


def load_image(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_image(f)


def save_image(path: str | Path, image: np.ndarray) -> int:
    with open(path, "wb") as f:
        return write_image(image, f)
