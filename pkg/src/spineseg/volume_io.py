"""Volumetric scalar data and masks on disk.

A volume is a ``.vhdr`` text header next to a ``.vraw`` little-endian raw
buffer.  Voxels are stored x-fastest, then y, then z, so in memory a volume
is a C-ordered array of shape ``(depth, height, width)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DTYPES = {
    "u8": np.dtype("<u1"),
    "i16": np.dtype("<i2"),
    "f32": np.dtype("<f4"),
}
HEADER_KEYS = ("dims", "spacing_mm", "dtype", "data_file", "byte_order")


class VolumeFormatError(ValueError):
    """Malformed header or raw data that disagrees with it."""


class SizeMismatchError(VolumeFormatError):
    pass


def _dtype_name(dtype: np.dtype) -> str:
    for name, dt in DTYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return name
    raise VolumeFormatError(f"unsupported voxel dtype {dtype}")


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with spacing ``(sx, sy, sz)`` in millimeters.

    ``values`` has shape ``(depth, height, width)``.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D grid, got shape {v.shape}")
        _dtype_name(v.dtype)
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or not all(s > 0 for s in sp):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", sp)

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def value(self, x: int, y: int, z: int):
        return self.values[z, y, x]

    @property
    def zyx_spacing(self) -> tuple[float, float, float]:
        """Spacing in array-axis order, for distance computations."""
        sx, sy, sz = self.spacing
        return (sz, sy, sx)


@dataclass
class Frame:
    values: np.ndarray
    frame_index: int

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def as_mask(values, spacing=(1.0, 1.0, 1.0), alphabet=(0, 1)) -> Volume:
    """Build a u8 mask volume, checking every voxel against ``alphabet``."""
    v = np.asarray(values)
    bad = ~np.isin(v, alphabet)
    if bad.any():
        raise ValueError(f"mask has {int(bad.sum())} voxels outside alphabet {tuple(alphabet)}")
    return Volume(v.astype(np.uint8), spacing)


def slice_frame(v: Volume, k: int) -> Frame:
    if not 0 <= k < v.depth:
        raise IndexError(f"frame index {k} out of range for depth {v.depth}")
    return Frame(v.values[k].copy(), k)


def _parse_header(path: Path) -> dict[str, str]:
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in HEADER_KEYS:
            raise VolumeFormatError(f"{path}:{lineno}: unknown key {key!r}")
        fields[key] = value
    missing = [k for k in HEADER_KEYS if k not in fields]
    if missing:
        raise VolumeFormatError(f"{path}: missing header keys {missing}")
    return fields


def load_volume(header_path) -> Volume:
    header_path = Path(header_path)
    if not header_path.is_file():
        raise FileNotFoundError(header_path)
    h = _parse_header(header_path)
    try:
        dims = tuple(int(s) for s in h["dims"].split())
        spacing = tuple(float(s) for s in h["spacing_mm"].split())
    except ValueError as exc:
        raise VolumeFormatError(f"{header_path}: {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{header_path}: bad dims {h['dims']!r}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise VolumeFormatError(f"{header_path}: bad spacing {h['spacing_mm']!r}")
    if h["dtype"] not in DTYPES:
        raise VolumeFormatError(f"{header_path}: unsupported dtype {h['dtype']!r}")
    if h["byte_order"] != "little":
        raise VolumeFormatError(f"{header_path}: byte_order must be 'little'")
    dtype = DTYPES[h["dtype"]]
    raw_path = header_path.parent / h["data_file"]
    if not raw_path.is_file():
        raise FileNotFoundError(raw_path)
    raw = raw_path.read_bytes()
    w, ht, d = dims
    expected = w * ht * d * dtype.itemsize
    if len(raw) != expected:
        raise SizeMismatchError(
            f"{raw_path}: {len(raw)} bytes, header implies {expected} ({w}x{ht}x{d} {h['dtype']})"
        )
    values = np.frombuffer(raw, dtype=dtype).reshape(d, ht, w)
    return Volume(values.astype(dtype.newbyteorder("="), copy=True), spacing)


def save_volume(v: Volume, header_path) -> Path:
    """Write ``v`` as a header + raw pair; returns the raw file path."""
    header_path = Path(header_path)
    if header_path.suffix != ".vhdr":
        header_path = header_path.with_suffix(".vhdr")
    raw_path = header_path.with_suffix(".vraw")
    name = _dtype_name(v.dtype)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(v.values.astype(DTYPES[name], copy=False).tobytes(order="C"))
    sx, sy, sz = v.spacing
    header_path.write_text(
        f"dims = {v.width} {v.height} {v.depth}\n"
        f"spacing_mm = {sx!r} {sy!r} {sz!r}\n"
        f"dtype = {name}\n"
        f"data_file = {raw_path.name}\n"
        "byte_order = little\n"
    )
    return raw_path


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2D")
    img = np.clip(img, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise VolumeFormatError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def save_mask(mask: Volume, path, pgm: bool = False, alphabet=None) -> list[Path]:
    """Save a mask volume; optionally one PGM per frame with labels scaled by 63.

    Returns the list of PGM files written.
    """
    if mask.dtype != np.uint8:
        raise ValueError(f"masks are stored as u8, got {mask.dtype}")
    if alphabet is None:
        alphabet = (0, 1) if mask.values.max(initial=0) <= 1 else (1, 2, 3, 4)
    bad = ~np.isin(mask.values, alphabet)
    if bad.any():
        raise ValueError(f"mask has voxels outside alphabet {tuple(alphabet)}")
    path = Path(path)
    save_volume(mask, path)
    written = []
    if pgm:
        stem = path.with_suffix("")
        for k in range(mask.depth):
            out = stem.parent / f"{stem.name}_{k:04d}.pgm"
            write_pgm(out, mask.values[k].astype(np.int32) * 63)
            written.append(out)
    return written
