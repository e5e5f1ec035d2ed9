"""Image buffers, point types, frame manifests and lossless image I/O.

Two on-disk formats are understood: PNG (8/16-bit, gray or RGB) for
interchange, and plain-text netpbm (``P2`` gray / ``P3`` color) for small
hand-written test fixtures. Lossy formats are refused outright.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import cv2
import numpy as np

from .errors import (
    CorruptHeaderError,
    DuplicateFrameIdError,
    InvalidTimestampError,
    InvariantError,
    MissingColumnError,
    MissingFileError,
    UnsupportedFormatError,
    UnwritablePathError,
)

PathLike = Union[str, Path]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
LOSSY_SUFFIXES = {".jpg", ".jpeg", ".jpe", ".jfif", ".webp", ".heic", ".avif", ".gif"}
NETPBM_SUFFIXES = {".pgm", ".ppm", ".pnm"}
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def round_half_away(x):
    """Round half away from zero (``2.5 -> 3``, ``-2.5 -> -3``).

    Used for every float-to-integer quantization in the package so outputs
    do not depend on banker's rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, depth: int = 8) -> np.ndarray:
    """Round half away from zero, then clamp into the unsigned range of ``depth``."""
    hi = (1 << depth) - 1
    dtype = np.uint8 if depth == 8 else np.uint16
    return np.clip(round_half_away(x), 0, hi).astype(dtype)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Immutable raster of 8- or 16-bit unsigned samples.

    ``data`` has shape ``(height, width)`` for one channel or
    ``(height, width, 3)`` for three. Channel order is R, G, B.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype not in (np.uint8, np.uint16):
            raise InvariantError(f"unsupported sample type {arr.dtype}; need uint8 or uint16")
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if not (arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3)):
            raise InvariantError(f"image must have 1 or 3 channels, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise InvariantError("zero-sized image")
        arr = np.ascontiguousarray(arr).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_samples(cls, samples, width: int, height: int, channels: int = 1, depth: int = 8):
        """Build from a flat row-major sample sequence, checking the range."""
        flat = np.asarray(samples, dtype=np.int64).ravel()
        if flat.size != width * height * channels:
            raise InvariantError(
                f"{flat.size} samples for {width}x{height}x{channels} image"
            )
        if flat.size and (flat.min() < 0 or flat.max() > (1 << depth) - 1):
            raise InvariantError(f"samples outside [0, {(1 << depth) - 1}]")
        dtype = np.uint8 if depth == 8 else np.uint16
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(flat.astype(dtype).reshape(shape))

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def depth(self) -> int:
        return 8 if self.data.dtype == np.uint8 else 16

    @property
    def size(self):
        return (self.width, self.height)

    def samples(self) -> np.ndarray:
        """Flat row-major view of the samples."""
        return self.data.ravel()

    def as_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.data.dtype == other.data.dtype and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ImageBuffer({self.width}x{self.height}, channels={self.channels}, depth={self.depth})"


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvariantError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    t: float
    path: str

    def __post_init__(self):
        if not math.isfinite(self.t) or self.t < 0:
            raise InvalidTimestampError(f"frame {self.frame_id!r}: timestamp {self.t} must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class ValidityMask:
    """Per-pixel boolean coverage flags, shape ``(height, width)``."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.bits, dtype=bool)).copy()
        if arr.ndim != 2:
            raise InvariantError("mask must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @classmethod
    def full(cls, width: int, height: int, value: bool = True) -> "ValidityMask":
        return cls(np.full((height, width), value, dtype=bool))

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    def count(self) -> int:
        return int(self.bits.sum())

    def matches(self, image: ImageBuffer) -> bool:
        return (self.width, self.height) == (image.width, image.height)

    def __eq__(self, other):
        if not isinstance(other, ValidityMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


# ---------------------------------------------------------------------------
# file I/O


def _sniff(path: Path, head: bytes) -> str:
    if path.suffix.lower() in LOSSY_SUFFIXES:
        raise UnsupportedFormatError(f"{path}: lossy format {path.suffix!r} is not supported")
    if head.startswith(PNG_SIGNATURE):
        return "png"
    if head[:2] in (b"P2", b"P3"):
        return "netpbm"
    if head[:2] in (b"P5", b"P6"):
        # binary netpbm is well-formed but outside the supported set
        raise UnsupportedFormatError(f"{path}: binary netpbm is not supported; use P2/P3 or PNG")
    if head[:3] == b"\xff\xd8\xff" or head[:4] == b"RIFF" or head[:3] == b"GIF":
        raise UnsupportedFormatError(f"{path}: lossy format is not supported")
    raise CorruptHeaderError(f"{path}: unrecognised image header")


def _netpbm_tokens(text: str) -> List[str]:
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    return tokens


def _load_netpbm(path: Path, raw: bytes) -> ImageBuffer:
    try:
        tokens = _netpbm_tokens(raw.decode("ascii"))
        magic = tokens[0]
        width, height, maxval = (int(v) for v in tokens[1:4])
    except (UnicodeDecodeError, ValueError, IndexError) as exc:
        raise CorruptHeaderError(f"{path}: bad netpbm header") from exc
    if width <= 0 or height <= 0 or not (0 < maxval <= 65535):
        raise CorruptHeaderError(f"{path}: bad netpbm dimensions or maxval")
    channels = 1 if magic == "P2" else 3
    try:
        values = np.array([int(v) for v in tokens[4:]], dtype=np.int64)
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: non-integer sample") from exc
    if values.size != width * height * channels:
        raise CorruptHeaderError(f"{path}: expected {width * height * channels} samples, found {values.size}")
    if values.size and (values.min() < 0 or values.max() > maxval):
        raise CorruptHeaderError(f"{path}: sample outside [0, {maxval}]")
    depth = 8 if maxval <= 255 else 16
    return ImageBuffer.from_samples(values, width, height, channels, depth)


def _load_png(path: Path, raw: bytes) -> ImageBuffer:
    arr = cv2.imdecode(np.frombuffer(raw, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise CorruptHeaderError(f"{path}: PNG could not be decoded")
    if arr.dtype not in (np.uint8, np.uint16):
        raise UnsupportedFormatError(f"{path}: sample type {arr.dtype} not supported")
    if arr.ndim == 3:
        if arr.shape[2] != 3:
            raise UnsupportedFormatError(f"{path}: {arr.shape[2]}-channel PNG not supported (alpha?)")
        arr = arr[:, :, ::-1]
    return ImageBuffer(arr)


def load_image(path: PathLike) -> ImageBuffer:
    """Read a PNG or plain-text netpbm file bit-exactly."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    raw = path.read_bytes()
    kind = _sniff(path, raw[:16])
    if kind == "png":
        return _load_png(path, raw)
    return _load_netpbm(path, raw)


def _encode_netpbm(buffer: ImageBuffer) -> bytes:
    magic = "P2" if buffer.channels == 1 else "P3"
    maxval = 255 if buffer.depth == 8 else 65535
    rows = buffer.data.reshape(buffer.height, -1)
    lines = [magic, f"{buffer.width} {buffer.height}", str(maxval)]
    lines.extend(" ".join(str(int(v)) for v in row) for row in rows)
    return ("\n".join(lines) + "\n").encode("ascii")


def save_image(buffer: ImageBuffer, path: PathLike) -> None:
    """Write ``buffer`` losslessly; the format follows the file suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        arr = buffer.data if buffer.channels == 1 else buffer.data[:, :, ::-1]
        ok, encoded = cv2.imencode(".png", np.ascontiguousarray(arr))
        if not ok:
            raise UnwritablePathError(f"{path}: PNG encoding failed")
        payload = encoded.tobytes()
    elif suffix in NETPBM_SUFFIXES:
        payload = _encode_netpbm(buffer)
    else:
        raise UnsupportedFormatError(f"{path}: cannot write {suffix or 'suffix-less'} files")
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise UnwritablePathError(f"{path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# manifests


def parse_manifest(path: PathLike) -> List[FrameRecord]:
    """Parse a header-less ``frame_id,t_seconds,relative_path`` CSV."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    records: List[FrameRecord] = []
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 3:
                raise MissingColumnError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            frame_id, t_text, rel = (cell.strip() for cell in row[:3])
            if not frame_id or not rel:
                raise MissingColumnError(f"{path}:{lineno}: empty frame id or path")
            try:
                t = float(t_text)
            except ValueError as exc:
                raise InvalidTimestampError(f"{path}:{lineno}: non-numeric timestamp {t_text!r}") from exc
            if frame_id in seen:
                raise DuplicateFrameIdError(f"{path}:{lineno}: duplicate frame id {frame_id!r}")
            seen.add(frame_id)
            records.append(FrameRecord(frame_id, t, rel))
    return records


# ---------------------------------------------------------------------------
# pixel conversions


def to_grayscale(buffer: ImageBuffer) -> ImageBuffer:
    if buffer.channels == 1:
        return buffer
    rgb = buffer.as_float()
    wr, wg, wb = LUMA_WEIGHTS
    luma = wr * rgb[:, :, 0] + wg * rgb[:, :, 1] + wb * rgb[:, :, 2]
    return ImageBuffer(quantize(luma, buffer.depth))


def normalize_16_to_8(buffer: ImageBuffer) -> ImageBuffer:
    """Per-frame min-max stretch of a 16-bit single-channel frame to 8 bits.

    A constant frame has no range to stretch and maps to all zeros.
    """
    if buffer.depth != 16 or buffer.channels != 1:
        raise InvariantError("normalize_16_to_8 needs a 16-bit single-channel image")
    data = buffer.as_float()
    lo, hi = data.min(), data.max()
    if hi == lo:
        return ImageBuffer(np.zeros(data.shape, dtype=np.uint8))
    return ImageBuffer(quantize((data - lo) * 255.0 / (hi - lo), 8))


def to_gray8(buffer: ImageBuffer) -> ImageBuffer:
    """Collapse any supported image to single-channel 8-bit intensity."""
    gray = to_grayscale(buffer)
    if gray.depth == 16:
        gray = normalize_16_to_8(gray)
    return gray
