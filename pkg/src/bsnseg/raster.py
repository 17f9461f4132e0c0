"""Mask / field / tensor containers and their file formats.

Containers are plain numpy arrays:

* binary mask  -- ``bool`` array of shape ``(H, W)``, ``True`` = foreground
* scalar field -- float array of shape ``(H, W)``
* tensor field -- float array of shape ``(C, H, W)`` (planar, channel-major)

The ``check_*`` helpers validate and normalise inputs at module boundaries.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

MASK_THRESHOLD = 128

TENSOR_MAGIC = b"BSNT"
TENSOR_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHHIII")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    """Raised when a file does not match the expected on-disk format."""


def check_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"mask dimensions must be >= 1, got {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0/1 or boolean")
        arr = arr.astype(bool)
    return arr


def check_field(field, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(field, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"scalar field must be 2-D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"field dimensions must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("scalar field contains non-finite values")
    return arr


def check_tensor(tensor, channels: int | None = None, dtype=None) -> np.ndarray:
    arr = np.asarray(tensor, dtype=dtype)
    if arr.ndim != 3:
        raise ValueError(f"tensor field must be (C, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError("tensor field contains non-finite values")
    return arr


def _open_gray8(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # Pillow raises a zoo of types for junk input
        raise FormatError(f"{path}: not a readable image ({exc})") from exc
    if img.format != "PNG":
        raise FormatError(f"{path}: expected PNG, got {img.format}")
    if img.mode != "L":
        raise FormatError(f"{path}: expected 8-bit single-channel PNG, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.uint8)


def load_mask(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG; pixels >= 128 become foreground."""
    return _open_gray8(path) >= MASK_THRESHOLD


def save_mask(mask, path) -> None:
    mask = check_mask(mask)
    write_gray_png(mask.astype(np.uint8) * 255, path)


def write_gray_png(values: np.ndarray, path) -> None:
    values = np.asarray(values)
    if values.dtype != np.uint8 or values.ndim != 2:
        raise ValueError("expected a 2-D uint8 array")
    Image.fromarray(values, mode="L").save(Path(path), format="PNG")


def load_gray(path) -> np.ndarray:
    """Raw uint8 values of an 8-bit grayscale PNG."""
    return _open_gray8(path)


def load_rgb(path) -> np.ndarray:
    """Load an image as a (3, H, W) float32 tensor with values in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise FormatError(f"{path}: not a readable image ({exc})") from exc
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_rgb(tensor, path) -> None:
    arr = check_tensor(tensor, channels=3, dtype=np.float64)
    u8 = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(Path(path), format="PNG")


def write_tensor(field, path) -> None:
    """Write a (C, H, W) or (H, W) field in the BSNT container.

    Layout: ``b"BSNT"``, u16 version, u16 dtype, u32 height, u32 width,
    u32 channels, then planar row-major little-endian float32 values.
    """
    arr = np.asarray(field)
    if arr.ndim == 2:
        arr = arr[None]
    arr = check_tensor(arr)
    c, h, w = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, DTYPE_F32, h, w, c)
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    """Inverse of :func:`write_tensor`; always returns a (C, H, W) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header")
    magic, version, dtype, h, w, c = _HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if min(h, w, c) < 1:
        raise FormatError(f"{path}: zero-sized dimension ({c}, {h}, {w})")
    expected = 4 * h * w * c
    if len(data) - HEADER_SIZE != expected:
        raise FormatError(
            f"{path}: payload is {len(data) - HEADER_SIZE} bytes, expected {expected}"
        )
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE).reshape(c, h, w)
    return arr.astype(np.float32)


def field_to_u8(field) -> np.ndarray:
    """Min-max scale to [0, 255] with round-half-up; constant fields map to 0."""
    arr = check_field(field)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    scaled = (arr - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def field_to_png(field, path) -> None:
    write_gray_png(field_to_u8(field), path)
