"""Binary dataset and tensor-record files, ROI masks and CSV import.

Layouts (all little-endian):

* dataset: ``b"SPAD"``, u32 version=1, u64 I, u64 L, f32[L] wavelengths (nm),
  f32[I] depths (mm), f32[I*L] pixels row-major.
* tensor records: 4-byte magic, u32 version, then until EOF one record per
  tensor: u32 name length, UTF-8 name, u32 rank, u64[rank] dims, f32 payload.

Every writer goes through a temporary file in the target directory followed by
``os.replace`` so an interrupted write never leaves a truncated file behind.
"""
from __future__ import annotations

import csv
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError

DATASET_MAGIC = b"SPAD"
CHECKPOINT_MAGIC = b"SPOI"
TRUTH_MAGIC = b"SPGT"
RESULT_MAGIC = b"SPRS"
FORMAT_VERSION = 1

_F32 = np.dtype("<f4")


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_dataset(wavelengths, depths, pixels) -> bytes:
    wavelengths = np.ascontiguousarray(wavelengths, dtype=_F32)
    depths = np.ascontiguousarray(depths, dtype=_F32)
    pixels = np.ascontiguousarray(pixels, dtype=_F32)
    n_pix, n_wl = depths.size, wavelengths.size
    if pixels.shape != (n_pix, n_wl):
        raise DimensionMismatch(f"pixels {pixels.shape} vs header ({n_pix}, {n_wl})")
    if not (np.isfinite(pixels).all() and np.isfinite(depths).all()):
        raise ValueError("dataset pixels and depths must be finite")
    if np.any(pixels < 0):
        raise ValueError("dataset pixels must be nonnegative")
    if np.any(np.diff(wavelengths) <= 0):
        raise ValueError("wavelengths must be strictly increasing")
    header = DATASET_MAGIC + struct.pack("<IQQ", FORMAT_VERSION, n_pix, n_wl)
    return header + wavelengths.tobytes() + depths.tobytes() + pixels.tobytes()


def write_dataset(path, wavelengths, depths, pixels):
    atomic_write_bytes(path, encode_dataset(wavelengths, depths, pixels))


def read_dataset(path):
    """Return ``(wavelengths, depths, pixels)`` as float32 arrays."""
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a SPAD dataset file")
    version, n_pix, n_wl = struct.unpack_from("<IQQ", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    expected = 24 + 4 * (n_wl + n_pix + n_pix * n_wl)
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} does not match header ({expected})")
    offset = 24
    wavelengths = np.frombuffer(data, _F32, n_wl, offset).copy()
    offset += 4 * n_wl
    depths = np.frombuffer(data, _F32, n_pix, offset).copy()
    offset += 4 * n_pix
    pixels = np.frombuffer(data, _F32, n_pix * n_wl, offset).reshape(n_pix, n_wl).copy()
    if not (np.isfinite(pixels).all() and np.isfinite(depths).all()):
        raise FormatError(f"{path}: non-finite pixels or depths")
    if np.any(np.diff(wavelengths) <= 0) or np.any(pixels < 0):
        raise FormatError(f"{path}: wavelengths not increasing or negative pixels")
    return wavelengths, depths, pixels


def encode_records(magic: bytes, tensors: dict) -> bytes:
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=_F32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def write_records(path, magic: bytes, tensors: dict):
    atomic_write_bytes(path, encode_records(magic, tensors))


def read_records(path, magic: bytes) -> dict:
    """Read a tensor-record file into an insertion-ordered dict of float32 arrays."""
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out = {}
    pos = 8
    try:
        while pos < len(data):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise FormatError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(data, _F32, count, pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record header") from exc
    return out


def text_to_tensor(text: str) -> np.ndarray:
    """Store UTF-8 text as a float32 vector of byte values (exact for 0..255)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(_F32)


def tensor_to_text(arr) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def read_mask(path, n_pixels=None) -> np.ndarray:
    """One ``0`` or ``1`` per line; the line count must equal ``n_pixels``."""
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        token = line.strip()
        if not token:
            continue
        if token not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: expected 0 or 1, got {token!r}")
        values.append(token == "1")
    mask = np.array(values, dtype=bool)
    if n_pixels is not None and mask.size != n_pixels:
        raise DimensionMismatch(f"mask has {mask.size} entries, dataset has {n_pixels} pixels")
    return mask


def write_mask(path, mask):
    atomic_write_text(path, "".join("1\n" if m else "0\n" for m in np.asarray(mask, bool)))


def import_csv(path):
    """Parse ``depth_mm,p_1..p_L`` rows under a header of wavelengths.

    The first header cell labels the depth column and is ignored.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        wavelengths = np.array([float(x) for x in header[1:]])
        rows = [[float(x) for x in row] for row in reader if row]
    arr = np.array(rows, dtype=np.float64).reshape(-1, wavelengths.size + 1)
    return wavelengths, arr[:, 0], arr[:, 1:]
