#!/usr/bin/env python3
"""
CT Volume Model
Voxel grid of Hounsfield Units with physical geometry, plus the header + raw interchange format
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from errors import VolumeFormatError
from io_utils import atomic_path

logger = logging.getLogger(__name__)

HU_MIN = -1024
HU_MAX = 3071

Triple = Tuple[float, float, float]

HEADER_KEYS = ("dims", "spacing_mm", "origin_mm", "data")


@dataclass(frozen=True)
class VolumeGeometry:
    dims: Tuple[int, int, int]
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise VolumeFormatError("geometry needs three dims, spacings and origin components")
        if any(d < 1 for d in dims):
            raise VolumeFormatError(f"dims must be >= 1, got {dims}")
        if not all(math.isfinite(v) for v in spacing + origin):
            raise VolumeFormatError("spacing and origin must be finite")
        if any(s <= 0 for s in spacing):
            raise VolumeFormatError(f"spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> Tuple[int, int, int]:
        """numpy array shape, z slowest and x fastest"""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def center_index(self) -> Triple:
        return tuple((d - 1) / 2.0 for d in self.dims)

    @property
    def center_mm(self) -> Triple:
        return voxel_to_physical(self, self.center_index)


@dataclass(frozen=True, eq=False)
class Volume:
    geometry: VolumeGeometry
    voxels: np.ndarray

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.dtype != np.int16:
            raise VolumeFormatError(f"voxels must be int16, got {voxels.dtype}")
        if voxels.shape != self.geometry.shape:
            raise VolumeFormatError(
                f"voxel array shape {voxels.shape} does not match dims {self.geometry.dims}"
            )
        if voxels.size and (voxels.min() < HU_MIN or voxels.max() > HU_MAX):
            raise VolumeFormatError(f"voxel values must lie within [{HU_MIN}, {HU_MAX}]")
        voxels = voxels.copy() if voxels.flags.writeable else voxels
        voxels.flags.writeable = False
        object.__setattr__(self, "voxels", voxels)

    @classmethod
    def from_hu(cls, geometry: VolumeGeometry, values: np.ndarray) -> "Volume":
        """Round real-valued HU to the int16 grid, clamping out-of-range values"""
        values = np.asarray(values)
        if values.dtype.kind == "f":
            values = np.rint(values)
        clamped = int(np.count_nonzero((values < HU_MIN) | (values > HU_MAX)))
        if clamped:
            logger.warning("clamped %d voxel(s) to [%d, %d] HU", clamped, HU_MIN, HU_MAX)
        values = np.clip(values, HU_MIN, HU_MAX).astype(np.int16).reshape(geometry.shape)
        values.flags.writeable = False
        return cls(geometry, values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.voxels, other.voxels)

    __hash__ = None

    @property
    def value_range(self) -> Tuple[int, int]:
        return int(self.voxels.min()), int(self.voxels.max())


def voxel_to_physical(g: VolumeGeometry, idx: Sequence[float]) -> Triple:
    """Affine voxel-index -> mm map: origin + idx * spacing"""
    p = np.asarray(g.origin, dtype=np.float64) + np.asarray(idx, dtype=np.float64) * np.asarray(g.spacing)
    return tuple(float(v) for v in p)


def physical_to_voxel(g: VolumeGeometry, p: Sequence[float]) -> Triple:
    """Inverse of voxel_to_physical; returns fractional indices"""
    idx = (np.asarray(p, dtype=np.float64) - np.asarray(g.origin)) / np.asarray(g.spacing)
    return tuple(float(v) for v in idx)


def _parse_header(text: str, path: str) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in HEADER_KEYS:
            raise VolumeFormatError(f"malformed header {path} line {number}: {raw!r}")
        if key in fields:
            raise VolumeFormatError(f"malformed header {path}: duplicate key {key}")
        fields[key] = value.strip()
    missing = [k for k in HEADER_KEYS if k not in fields]
    if missing:
        raise VolumeFormatError(f"malformed header {path}: missing {', '.join(missing)}")
    return fields


def _parse_triple(value: str, cast, key: str):
    parts = value.split()
    if len(parts) != 3:
        raise VolumeFormatError(f"malformed header: {key} needs three values, got {value!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise VolumeFormatError(f"malformed header: {key} has non-numeric value {value!r}")


def _read_header(path: str) -> Tuple[VolumeGeometry, str]:
    with open(path, "r", encoding="utf-8") as handle:
        fields = _parse_header(handle.read(), path)
    dims = _parse_triple(fields["dims"], int, "dims")
    spacing = _parse_triple(fields["spacing_mm"], float, "spacing_mm")
    origin = _parse_triple(fields["origin_mm"], float, "origin_mm")
    raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), fields["data"])
    return VolumeGeometry(dims, spacing, origin), raw_path


def read_geometry(path: str) -> VolumeGeometry:
    """Geometry from a volume header without touching the voxel data"""
    return _read_header(path)[0]


def load_volume(path: str) -> Volume:
    """Load a header file and its adjacent little-endian int16 raw file"""
    geometry, raw_path = _read_header(path)
    dims = geometry.dims
    expected = geometry.voxel_count * 2
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise VolumeFormatError(
            f"size mismatch: {raw_path} holds {actual} bytes, dims {dims} need {expected}"
        )
    values = np.fromfile(raw_path, dtype="<i2").astype(np.int16)
    logger.debug("loaded %s: dims=%s spacing=%s", path, dims, geometry.spacing)
    return Volume.from_hu(geometry, values)


def _format_triple(values) -> str:
    return " ".join(repr(v) for v in values)


def save_volume(v: Volume, path: str) -> None:
    """Write `path` (header) and `<stem>.raw` next to it; both appear only when complete"""
    stem = os.path.splitext(os.path.basename(path))[0]
    raw_name = stem + ".raw"
    raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), raw_name)
    if os.path.normcase(os.path.abspath(path)) == os.path.normcase(raw_path):
        raise VolumeFormatError(f"header path {path} would overwrite its own raw file; use a .vol name")
    g = v.geometry
    header = (
        f"dims = {' '.join(str(d) for d in g.dims)}\n"
        f"spacing_mm = {_format_triple(g.spacing)}\n"
        f"origin_mm = {_format_triple(g.origin)}\n"
        f"data = {raw_name}\n"
    )
    with atomic_path(raw_path) as tmp_raw, atomic_path(path) as tmp_header:
        v.voxels.astype("<i2").tofile(tmp_raw)
        with open(tmp_header, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(header)
