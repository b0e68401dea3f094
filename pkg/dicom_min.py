#!/usr/bin/env python3
"""
Minimal DICOM CT Reader
Extracts the handful of tags needed to stack an uncompressed axial CT series into a Volume
"""

import io
import logging
import os
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pydicom
from pydicom.errors import InvalidDicomError

from errors import DicomParseError, SeriesAssemblyError
from volume import Volume, VolumeGeometry

logger = logging.getLogger(__name__)

SUPPORTED_TRANSFER_SYNTAXES = {
    "1.2.840.10008.1.2": "Implicit VR Little Endian",
    "1.2.840.10008.1.2.1": "Explicit VR Little Endian",
}

REQUIRED_TAGS = (
    ("Rows", (0x0028, 0x0010)),
    ("Columns", (0x0028, 0x0011)),
    ("PixelSpacing", (0x0028, 0x0030)),
    ("ImagePositionPatient", (0x0020, 0x0032)),
    ("InstanceNumber", (0x0020, 0x0013)),
    ("PixelData", (0x7FE0, 0x0010)),
)

AXIAL_ORIENTATION = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
GAP_TOLERANCE = 0.10


@dataclass(frozen=True, eq=False)
class SliceRecord:
    rows: int
    cols: int
    pixel_spacing: Tuple[float, float]
    image_position: Tuple[float, float, float]
    instance_number: int
    slice_thickness: Optional[float]
    rescale_slope: float
    rescale_intercept: float
    pixels: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DicomParseError(f"rows and columns must be >= 1, got {self.rows}x{self.cols}")
        if self.pixels.size != self.rows * self.cols:
            raise DicomParseError("pixel count does not match rows x columns")
        if any(s <= 0 for s in self.pixel_spacing):
            raise DicomParseError(f"pixel spacing must be > 0, got {self.pixel_spacing}")

    @property
    def z(self) -> float:
        return self.image_position[2]

    def to_hu(self) -> np.ndarray:
        return self.rescale_slope * self.pixels.astype(np.float64) + self.rescale_intercept


def _read_dataset(data: bytes) -> pydicom.Dataset:
    if len(data) < 132 or data[128:132] != b"DICM":
        raise DicomParseError("missing DICM magic after the 128-byte preamble")
    try:
        return pydicom.dcmread(io.BytesIO(data), force=False)
    except InvalidDicomError as exc:
        raise DicomParseError(f"not a DICOM Part-10 stream: {exc}")
    except Exception as exc:  # pydicom surfaces truncation as assorted low-level errors
        raise DicomParseError(f"truncated or malformed DICOM stream: {exc}")


def _element_value(ds: pydicom.Dataset, name: str, tag):
    if tag not in ds:
        raise DicomParseError(f"missing tag {name}")
    try:
        value = ds[tag].value
    except Exception as exc:
        raise DicomParseError(f"unreadable tag {name}: {exc}")
    if value is None or (hasattr(value, "__len__") and len(value) == 0):
        raise DicomParseError(f"missing tag {name}")
    return value


def _floats(value, count: int, name: str) -> Tuple[float, ...]:
    if isinstance(value, (str, bytes)) or not hasattr(value, "__iter__"):
        value = [value]
    try:
        items = [float(v) for v in value]
    except (TypeError, ValueError):
        raise DicomParseError(f"tag {name} is not numeric: {value!r}")
    if len(items) != count:
        raise DicomParseError(f"tag {name} needs {count} values, got {len(items)}")
    return tuple(items)


def parse_dicom_file(data: bytes) -> SliceRecord:
    """Parse one Part-10 CT slice held in memory"""
    ds = _read_dataset(data)

    meta = getattr(ds, "file_meta", None)
    syntax = str(getattr(meta, "TransferSyntaxUID", "")) if meta is not None else ""
    if not syntax:
        raise DicomParseError("missing tag TransferSyntaxUID")
    if syntax not in SUPPORTED_TRANSFER_SYNTAXES:
        raise DicomParseError(f"unsupported transfer syntax {syntax}")

    values = {name: _element_value(ds, name, tag) for name, tag in REQUIRED_TAGS}

    try:
        rows, cols = int(values["Rows"]), int(values["Columns"])
        instance_number = int(values["InstanceNumber"])
    except (TypeError, ValueError) as exc:
        raise DicomParseError(f"non-integer Rows/Columns/InstanceNumber: {exc}")
    spacing = _floats(values["PixelSpacing"], 2, "PixelSpacing")
    position = _floats(values["ImagePositionPatient"], 3, "ImagePositionPatient")

    if "ImageOrientationPatient" in ds:
        orientation = _floats(ds.ImageOrientationPatient, 6, "ImageOrientationPatient")
        if not np.allclose(orientation, AXIAL_ORIENTATION, atol=1e-4):
            raise DicomParseError(f"non-axial ImageOrientationPatient {orientation} is not supported")

    bits = int(ds.get("BitsAllocated", 16))
    if bits != 16:
        raise DicomParseError(f"BitsAllocated {bits} is not supported (16 only)")
    pixel_bytes = values["PixelData"]
    if len(pixel_bytes) != 2 * rows * cols:
        raise DicomParseError(
            f"PixelData holds {len(pixel_bytes)} bytes, expected {2 * rows * cols} for {rows}x{cols}"
        )
    dtype = "<i2" if int(ds.get("PixelRepresentation", 1)) == 1 else "<u2"
    pixels = np.frombuffer(pixel_bytes, dtype=dtype).reshape(rows, cols)

    if any(tag.group & 0xFF00 == 0x6000 for tag in ds.keys()):
        logger.debug("overlay planes present; ignored")

    thickness = ds.get("SliceThickness", None)
    return SliceRecord(
        rows=rows,
        cols=cols,
        pixel_spacing=(spacing[0], spacing[1]),
        image_position=position,
        instance_number=instance_number,
        slice_thickness=float(thickness) if thickness not in (None, "") else None,
        rescale_slope=float(ds.get("RescaleSlope", 1.0)),
        rescale_intercept=float(ds.get("RescaleIntercept", 0.0)),
        pixels=pixels,
    )


def read_series(directory: str) -> List[SliceRecord]:
    """Parse every regular, non-hidden file in a series directory"""
    names = sorted(
        name for name in os.listdir(directory)
        if not name.startswith(".") and os.path.isfile(os.path.join(directory, name))
    )
    records = []
    for name in names:
        path = os.path.join(directory, name)
        with open(path, "rb") as handle:
            data = handle.read()
        try:
            records.append(parse_dicom_file(data))
        except DicomParseError as exc:
            raise DicomParseError(f"{path}: {exc}")
    logger.info("parsed %d slice(s) from %s", len(records), directory)
    return records


def assemble_series(slices: Iterable[SliceRecord]) -> Volume:
    """Stack slices by ascending ImagePositionPatient z into an HU Volume"""
    slices = list(slices)
    if len(slices) < 2:
        raise SeriesAssemblyError(f"need at least 2 slices, got {len(slices)}")

    first = slices[0]
    for s in slices[1:]:
        if (s.rows, s.cols) != (first.rows, first.cols) or s.pixel_spacing != first.pixel_spacing:
            raise SeriesAssemblyError(
                f"inconsistent slice dims: {s.rows}x{s.cols} @ {s.pixel_spacing} "
                f"vs {first.rows}x{first.cols} @ {first.pixel_spacing}"
            )

    ordered = sorted(slices, key=lambda s: (s.z, s.instance_number))
    gaps = np.diff([s.z for s in ordered])
    median_gap = float(np.median(gaps))
    if median_gap <= 0:
        raise SeriesAssemblyError("duplicate slice positions")
    if np.any(np.abs(gaps - median_gap) > GAP_TOLERANCE * median_gap):
        raise SeriesAssemblyError(
            f"non-uniform slice spacing: gaps {gaps.tolist()} vs median {median_gap}"
        )

    row_spacing, col_spacing = first.pixel_spacing
    geometry = VolumeGeometry(
        dims=(first.cols, first.rows, len(ordered)),
        spacing=(col_spacing, row_spacing, median_gap),
        origin=ordered[0].image_position,
    )
    stacked = np.stack([s.to_hu() for s in ordered])
    return Volume.from_hu(geometry, stacked)
