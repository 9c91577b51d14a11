"""Image datasets: file formats, the bundled synthetic generator, dequantization and bits/dim.

Formats (all bit-exact layouts are documented in ``docs/formats.md``):

* ``idx``  - MNIST-style IDX container of unsigned bytes, 3-d ``[n, H, W]`` or 4-d ``[n, C, H, W]``
* ``pnm``  - binary PGM (``P5``) / PPM (``P6``) images, one per file
* ``raw``  - little-endian tensor with a small header (see :func:`write_raw_tensor`)
* ``synthetic`` - anti-aliased rectangles and discs generated from a seed
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


class DataError(ValueError):
    """A dataset file is missing, malformed, or inconsistent with its spec."""


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

IDX_UBYTE = 0x08


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != IDX_UBYTE:
        raise DataError(f"{path}: unsupported IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims)) if dims else 0
    payload = raw[header:]
    if len(payload) != expected:
        count = dims[0] if dims else 0
        per = expected // count if count else 0
        bad = len(payload) // per if per else 0
        raise DataError(f"{path}: truncated payload, expected {expected} bytes, got {len(payload)} "
                        f"(record {bad} of {count} incomplete)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError("IDX writer only supports uint8 data")
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array).tobytes())


def _idx_to_images(array: np.ndarray, path) -> np.ndarray:
    if array.ndim == 3:
        return array[:, None]
    if array.ndim == 4:
        return array
    raise DataError(f"{path}: IDX images must be 3-d or 4-d, got {array.ndim}-d")


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def read_pnm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM/PPM; returns ``([C, H, W] array, maxval)``."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PNM header") from exc
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: maxval {maxval} out of range")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    expected = width * height * channels * dtype.itemsize
    payload = raw[pos:pos + expected]
    if len(payload) != expected:
        raise DataError(f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    img = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    return img.transpose(2, 0, 1).astype(np.uint16 if maxval >= 256 else np.uint8), maxval


def write_pnm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a ``[C, H, W]`` (C = 1 or 3) or ``[H, W]`` integer image as P5/P6."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    channels, height, width = image.shape
    if channels not in (1, 3):
        raise DataError(f"PNM images need 1 or 3 channels, got {channels}")
    if image.min() < 0 or image.max() > maxval:
        raise DataError(f"pixel values outside [0, {maxval}]")
    magic = b"P5" if channels == 1 else b"P6"
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    header = magic + f"\n{width} {height}\n{maxval}\n".encode()
    Path(path).write_bytes(header + image.transpose(1, 2, 0).astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# Raw tensors
# ---------------------------------------------------------------------------

RAW_MAGIC = b"RTNS"
RAW_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 3: np.dtype("<i4"),
              4: np.dtype("<f4"), 5: np.dtype("<f8")}
RAW_CODES = {dt: code for code, dt in RAW_DTYPES.items()}


def write_raw_tensor(path, array: np.ndarray) -> None:
    """``RTNS`` | u8 dtype code | u8 rank | u16 zero | rank x u32 dims | data, all little-endian."""
    array = np.asarray(array)
    dt = np.dtype(f"<{array.dtype.kind}{array.dtype.itemsize}")
    if dt not in RAW_CODES:
        raise DataError(f"unsupported raw tensor dtype {array.dtype}")
    header = RAW_MAGIC + struct.pack("<BBH", RAW_CODES[dt], array.ndim, 0)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype=dt).tobytes())


def read_raw_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != RAW_MAGIC:
        raise DataError(f"{path}: not a raw tensor file (bad magic)")
    code, rank, _ = struct.unpack("<BBH", raw[4:8])
    if code not in RAW_DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    header = 8 + 4 * rank
    if len(raw) < header:
        raise DataError(f"{path}: truncated raw tensor header")
    dims = struct.unpack(f"<{rank}I", raw[8:header])
    dtype = RAW_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise DataError(f"{path}: truncated payload, expected {expected} bytes, got {len(raw) - header}")
    return np.frombuffer(raw[header:], dtype=dtype).reshape(dims)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

def synthetic_shapes(count: int, size: int = 8, channels: int = 1, seed: int = 0,
                     bits: int = 8, supersample: int = 8) -> np.ndarray:
    """Anti-aliased random rectangles and discs on a dark background.

    Each image holds one or two shapes; coverage is estimated on a
    ``supersample x supersample`` grid per pixel and blended over the canvas.
    Returns integers in ``[0, 2^bits - 1]`` with shape ``[count, channels, size, size]``.
    """
    rng = np.random.default_rng(seed)
    fine = size * supersample
    coords = (np.arange(fine) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    levels = 2 ** bits - 1
    out = np.empty((count, channels, size, size), dtype=np.uint8 if bits <= 8 else np.uint16)
    for k in range(count):
        canvas = np.zeros((channels, size, size))
        for _ in range(rng.integers(1, 3)):
            if rng.random() < 0.5:
                x0, x1 = np.sort(rng.uniform(0, size, 2))
                y0, y1 = np.sort(rng.uniform(0, size, 2))
                x1, y1 = max(x1, x0 + 1.0), max(y1, y0 + 1.0)
                mask = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
            else:
                cx, cy = rng.uniform(1.0, size - 1.0, 2)
                radius = rng.uniform(1.0, size / 2.5)
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
            cover = mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
            value = rng.uniform(0.35, 1.0, size=(channels, 1, 1))
            canvas = canvas * (1.0 - cover) + value * cover
        out[k] = np.rint(canvas * levels)
    return out


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

FORMATS = ("idx", "pnm", "raw", "synthetic")


@dataclass
class DatasetSpec:
    path: str = ""
    format: str = "synthetic"
    shape: tuple[int, int, int] | None = (1, 8, 8)
    val_fraction: float = 0.2
    bits: int = 8
    synthetic_count: int = 2560
    seed: int = 0


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    bits: int = 8

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.train.shape[1:]) if len(self.train) else tuple(self.val.shape[1:])

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def batches(self, split: str, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
        """Yield batches in a seeded shuffled order (sequential when ``rng`` is None)."""
        data = self.split(split)
        order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
        for start in range(0, len(data), batch_size):
            yield data[order[start:start + batch_size]]


def _load_records(spec: DatasetSpec) -> np.ndarray:
    fmt = spec.format
    if fmt == "synthetic":
        C, N, _ = spec.shape or (1, 8, 8)
        return synthetic_shapes(spec.synthetic_count, size=N, channels=C, seed=spec.seed, bits=spec.bits)
    path = Path(spec.path)
    if not path.exists():
        raise DataError(f"{path}: no such file or directory")
    if fmt == "idx":
        return _idx_to_images(read_idx(path), path)
    if fmt == "raw":
        arr = read_raw_tensor(path)
        if arr.ndim != 4:
            raise DataError(f"{path}: raw dataset must be 4-d [n, C, H, W], got {arr.ndim}-d")
        if not np.issubdtype(arr.dtype, np.integer):
            raise DataError(f"{path}: raw dataset must hold integer pixels, got {arr.dtype}")
        return arr
    if fmt == "pnm":
        files = [path] if path.is_file() else sorted(
            p for p in path.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
        if not files:
            raise DataError(f"{path}: no .pgm/.ppm files found")
        images = []
        for f in files:
            img, maxval = read_pnm(f)
            if maxval > 2 ** spec.bits - 1:
                raise DataError(f"{f}: maxval {maxval} exceeds {spec.bits}-bit depth")
            if images and img.shape != images[0].shape:
                raise DataError(f"{f}: shape {img.shape} differs from {images[0].shape}")
            images.append(img)
        return np.stack(images)
    raise DataError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")


def load_dataset(spec: DatasetSpec) -> Dataset:
    records = _load_records(spec)
    if len(records) == 0:
        raise DataError(f"{spec.path or spec.format}: dataset is empty")
    if spec.shape is not None and tuple(records.shape[1:]) != tuple(spec.shape):
        raise DataError(f"{spec.path or spec.format}: records have shape {tuple(records.shape[1:])}, "
                        f"expected {tuple(spec.shape)}")
    top = 2 ** spec.bits - 1
    bad = np.flatnonzero((records.reshape(len(records), -1) > top).any(axis=1))
    if bad.size:
        raise DataError(f"{spec.path or spec.format}: record {bad[0]} has values above {top}")
    n_val = int(round(len(records) * spec.val_fraction))
    n_train = len(records) - n_val
    return Dataset(train=records[:n_train], val=records[n_train:], bits=spec.bits)


# ---------------------------------------------------------------------------
# Dequantization and bits/dim
# ---------------------------------------------------------------------------

def dequantize(images: np.ndarray, rng: np.random.Generator | None = None, bits: int = 8,
               noise: np.ndarray | None = None, dtype=np.float64) -> np.ndarray:
    """Map integer pixels to ``[0, 1)`` as ``(x + u) / 2^bits`` with ``u ~ U[0, 1)``."""
    images = np.asarray(images)
    if not np.issubdtype(images.dtype, np.integer):
        if not np.all(images == np.floor(images)):
            raise DataError("dequantize expects integer-valued pixels")
    top = 2 ** bits - 1
    if images.size and (images.min() < 0 or images.max() > top):
        raise DataError(f"pixel values outside [0, {top}]")
    if noise is None:
        if rng is None:
            raise ValueError("dequantize needs an rng or explicit noise")
        noise = rng.random(images.shape)
    return ((images.astype(np.float64) + noise) / float(2 ** bits)).astype(dtype)


def pixel_centers(images: np.ndarray, bits: int = 8, dtype=np.float64) -> np.ndarray:
    """Deterministic counterpart of :func:`dequantize` using ``u = 1/2``."""
    return dequantize(images, bits=bits, noise=np.full(np.shape(images), 0.5), dtype=dtype)


def quantize(x: np.ndarray, bits: int = 8) -> np.ndarray:
    """Map continuous values in ``[0, 1)`` back to integer pixels (clipped)."""
    top = 2 ** bits - 1
    out = np.clip(np.floor(np.asarray(x) * 2 ** bits), 0, top)
    return out.astype(np.uint8 if bits <= 8 else np.uint16)


def bits_per_dim(logp_nats, dims: int, bits: int = 8) -> np.ndarray:
    """``-log p / (D ln 2) + bits`` for densities of data scaled to ``[0, 1)``."""
    if dims <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    return -np.asarray(logp_nats, dtype=np.float64) / (dims * math.log(2.0)) + bits
