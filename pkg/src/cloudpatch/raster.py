"""Image data model and the MBR1 raster container.

MBR1 layout (little-endian)::

    bytes 0-3   b"MBR1"
    u32         height
    u32         width
    u32         bands
    f32[...]    height*width*bands values, row-major (row, column, band)

Masks use the same container with ``bands = 1`` and values in {0.0, 1.0}.
Missing reflectance is stored as NaN; NaN payload bits survive a round-trip.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadDims, BadMagic, DimMismatch, IoFailure, TruncatedFile

MAGIC = b"MBR1"
HEADER = struct.Struct("<4sIII")
N_BANDS = 8


@dataclass(frozen=True)
class BandMetadata:
    index: int
    name: str
    center_wavelength_nm: float
    bandwidth_nm: float


# SuperDove band set; coastal blue is not in the source table, its centre/width
# come from the sensor's published band list.
DEFAULT_BANDS: tuple[BandMetadata, ...] = (
    BandMetadata(1, "coastal_blue", 443.0, 20.0),
    BandMetadata(2, "blue", 490.0, 50.0),
    BandMetadata(3, "green_i", 531.0, 36.0),
    BandMetadata(4, "green", 565.0, 36.0),
    BandMetadata(5, "yellow", 610.0, 20.0),
    BandMetadata(6, "red", 665.0, 31.0),
    BandMetadata(7, "red_edge", 705.0, 15.0),
    BandMetadata(8, "nir", 865.0, 40.0),
)

GREEN, RED, RED_EDGE = 4, 6, 7  # 1-based band numbers


def check_band_metadata(bands: Sequence[BandMetadata]) -> None:
    for k, b in enumerate(bands, start=1):
        if b.index != k or not 1 <= b.index <= N_BANDS:
            raise BadDims(f"band metadata index {b.index} out of order or range")
    wl = [b.center_wavelength_nm for b in bands]
    if any(b <= a for a, b in zip(wl, wl[1:])):
        raise BadDims("band wavelengths must increase strictly with index")


def _check_hw(h: int, w: int) -> None:
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise BadDims(f"image dimensions {h}x{w} must be >= 4 and divisible by 4")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultibandImage:
    """One date's H x W x C reflectance raster; NaN marks missing values."""

    data: np.ndarray
    date: date | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] < 1:
            raise BadDims(f"expected an H x W x C array, got shape {data.shape}")
        _check_hw(data.shape[0], data.shape[1])
        data = data.astype(np.float32, copy=False)
        with np.errstate(invalid="ignore"):
            if np.any(data < 0):
                raise ValueError("finite reflectance values must be >= 0")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> MultibandImage:
        return MultibandImage(data, self.date)

    def equals(self, other: MultibandImage) -> bool:
        """Bitwise equality, NaN payloads included."""
        return (
            self.date == other.date
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class CloudMask:
    """Binary H x W field; 1 marks an artificially removed (to-impute) cell."""

    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise BadDims(f"mask must be 2-D, got shape {cells.shape}")
        if not np.all((cells == 0) | (cells == 1)):
            raise ValueError("mask cells must be 0 or 1")
        object.__setattr__(self, "cells", _frozen(cells.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def count(self) -> int:
        return int(self.cells.sum())

    @classmethod
    def empty(cls, h: int, w: int) -> CloudMask:
        return cls(np.zeros((h, w), np.uint8))

    def equals(self, other: CloudMask) -> bool:
        return np.array_equal(self.cells, other.cells)


@dataclass(frozen=True, eq=False)
class ImageSeries:
    images: tuple[MultibandImage, ...]
    region: np.ndarray
    band_metadata: tuple[BandMetadata, ...] = field(default=DEFAULT_BANDS)

    def __post_init__(self):
        images = tuple(self.images)
        object.__setattr__(self, "images", images)
        region = np.asarray(self.region)
        if region.ndim != 2 or not np.all((region == 0) | (region == 1)):
            raise BadDims("region must be a 2-D binary raster")
        object.__setattr__(self, "region", _frozen(region.astype(np.uint8)))
        object.__setattr__(self, "band_metadata", tuple(self.band_metadata))
        check_band_metadata(self.band_metadata)
        for img in images:
            if img.data.shape != images[0].data.shape:
                raise DimMismatch("all images in a series must share dimensions and band count")
            if img.data.shape[:2] != region.shape:
                raise DimMismatch("region dimensions must match the images")
        dates = [img.date for img in images]
        if any(d is None for d in dates):
            raise ValueError("every image in a series needs a date")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("series dates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def dates(self) -> list[date]:
        return [img.date for img in self.images]

    def replace_images(self, images: Sequence[MultibandImage]) -> ImageSeries:
        return ImageSeries(tuple(images), self.region, self.band_metadata)


# ---------------------------------------------------------------------------
# MBR1 I/O


def encode(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, h, w, c) + payload


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise BadMagic(f"{source}: not an MBR1 file")
        raise TruncatedFile(f"{source}: header shorter than {HEADER.size} bytes")
    magic, h, w, c = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"{source}: magic {magic!r} is not {MAGIC!r}")
    if h == 0 or w == 0 or c == 0:
        raise BadDims(f"{source}: zero dimension in header ({h}x{w}x{c})")
    need = h * w * c * 4
    if len(buf) - HEADER.size < need:
        raise TruncatedFile(f"{source}: payload has {len(buf) - HEADER.size} bytes, header promises {need}")
    arr = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=HEADER.size)
    return arr.reshape(h, w, c).astype(np.float32)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_bytes(path: str | os.PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_raster(img: MultibandImage, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode(img.data))


def read_raster(path: str | os.PathLike, date_: date | None = None) -> MultibandImage:
    data = decode(_read_bytes(path), str(path))
    _check_hw(data.shape[0], data.shape[1])
    return MultibandImage(data, date_)


def write_mask(mask: CloudMask, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode(mask.cells.astype(np.float32)))


def read_mask(path: str | os.PathLike) -> CloudMask:
    data = decode(_read_bytes(path), str(path))
    if data.shape[2] != 1:
        raise BadDims(f"{path}: mask must have exactly one band, found {data.shape[2]}")
    return CloudMask(data[:, :, 0])


# ---------------------------------------------------------------------------
# series manifests
#
#   region=<path>
#   <iso date>,<image path>,<mask path or empty>
#
# Relative paths resolve against the manifest's directory.


@dataclass(frozen=True)
class ManifestEntry:
    date: date
    image_path: str
    mask_path: str


def write_manifest(path: str | os.PathLike, region_path: str, entries: Sequence[ManifestEntry]) -> None:
    lines = [f"region={region_path}"]
    lines += [f"{e.date.isoformat()},{e.image_path},{e.mask_path}" for e in entries]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def parse_manifest(path: str | os.PathLike) -> tuple[str, list[ManifestEntry]]:
    text = _read_bytes(path).decode("utf-8")
    region = None
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("region="):
            region = line[len("region="):].strip()
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) == 2:
            parts.append("")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected date,image_path,mask_path")
        try:
            d = date.fromisoformat(parts[0])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad date {parts[0]!r}") from exc
        entries.append(ManifestEntry(d, parts[1], parts[2]))
    if region is None:
        raise ValueError(f"{path}: missing region= header line")
    return region, entries


def read_series(path: str | os.PathLike) -> tuple[ImageSeries, list[CloudMask] | None]:
    """Load a manifest; masks are returned only when every entry names one."""
    base = Path(path).parent
    region_path, entries = parse_manifest(path)
    region = read_mask(base / region_path).cells
    images = [read_raster(base / e.image_path, e.date) for e in entries]
    masks = None
    if entries and all(e.mask_path for e in entries):
        masks = [read_mask(base / e.mask_path) for e in entries]
    return ImageSeries(tuple(images), region), masks


def write_series(
    directory: str | os.PathLike,
    series: ImageSeries,
    masks: Sequence[CloudMask] | None = None,
    manifest_name: str = "manifest.txt",
    image_dir: str = "images",
    mask_dir: str = "masks",
) -> Path:
    directory = Path(directory)
    (directory / image_dir).mkdir(parents=True, exist_ok=True)
    if masks is not None:
        (directory / mask_dir).mkdir(parents=True, exist_ok=True)
    write_mask(CloudMask(series.region), directory / "region.mbr")
    entries = []
    for i, img in enumerate(series.images):
        stem = img.date.isoformat()
        img_rel = f"{image_dir}/{stem}.mbr"
        write_raster(img, directory / img_rel)
        mask_rel = ""
        if masks is not None:
            mask_rel = f"{mask_dir}/{stem}.mbr"
            write_mask(masks[i], directory / mask_rel)
        entries.append(ManifestEntry(img.date, img_rel, mask_rel))
    manifest = directory / manifest_name
    write_manifest(manifest, "region.mbr", entries)
    return manifest


# ---------------------------------------------------------------------------


def composite(observed: MultibandImage, predicted: MultibandImage, mask: CloudMask) -> MultibandImage:
    """Take ``predicted`` at masked cells and ``observed`` everywhere else."""
    if observed.data.shape != predicted.data.shape or observed.data.shape[:2] != mask.cells.shape:
        raise DimMismatch(
            f"observed {observed.data.shape}, predicted {predicted.data.shape}, mask {mask.cells.shape}"
        )
    out = np.where(mask.cells[:, :, None] == 1, predicted.data, observed.data)
    return observed.with_data(out)
