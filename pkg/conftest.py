#!/usr/bin/env python3
"""
Shared pytest fixtures: DICOM slice builder, small volumes and a cached default phantom
"""

import io
import os

import numpy as np
import pytest
from pydicom.dataset import Dataset, FileMetaDataset
from pydicom.uid import CTImageStorage, ExplicitVRLittleEndian, ImplicitVRLittleEndian, generate_uid

from phantom import PhantomSpec, classical_detect, generate_phantom
from volume import Volume, VolumeGeometry

RUN_SLOW = os.getenv("OMLINE_RUN_SLOW") == "1"


def make_dicom_slice(
    rows=4, cols=4, z=0.0, instance=1, pixels=None, slope=1.0, intercept=-1024.0,
    spacing=(0.5, 0.5), syntax=ExplicitVRLittleEndian, drop=(), orientation=(1, 0, 0, 0, 1, 0),
) -> bytes:
    """Serialize one CT slice to Part-10 bytes; `drop` names attributes to leave out"""
    if pixels is None:
        pixels = (np.arange(rows * cols) + 1000).reshape(rows, cols)
    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = CTImageStorage
    meta.MediaStorageSOPInstanceUID = generate_uid()
    meta.TransferSyntaxUID = syntax

    ds = Dataset()
    ds.file_meta = meta
    ds.is_little_endian = True
    ds.is_implicit_VR = syntax == ImplicitVRLittleEndian
    ds.SOPClassUID = CTImageStorage
    ds.SOPInstanceUID = meta.MediaStorageSOPInstanceUID
    ds.Modality = "CT"
    ds.Rows = rows
    ds.Columns = cols
    ds.PixelSpacing = list(spacing)
    ds.ImagePositionPatient = [0.0, 0.0, z]
    ds.ImageOrientationPatient = list(orientation)
    ds.InstanceNumber = instance
    ds.SliceThickness = 1.0
    if slope is not None:
        ds.RescaleSlope = slope
    if intercept is not None:
        ds.RescaleIntercept = intercept
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME2"
    ds.BitsAllocated = 16
    ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 1
    ds.PixelData = np.asarray(pixels).astype("<i2").tobytes()
    for name in drop:
        delattr(ds, name)

    buffer = io.BytesIO()
    ds.save_as(buffer, write_like_original=False)
    return buffer.getvalue()


@pytest.fixture
def dicom_slice():
    return make_dicom_slice


@pytest.fixture
def ramp_volume():
    """5 x 4 x 3 volume whose voxel value encodes its flat index"""
    g = VolumeGeometry((5, 4, 3), (0.5, 0.75, 2.0), (-10.0, 4.0, 100.0))
    return Volume(g, (np.arange(60, dtype=np.int16) * 7 - 200).reshape(g.shape))


@pytest.fixture(scope="session")
def default_phantom():
    """(volume, truth, ground-truth boxes) of the untilted 128^3 phantom"""
    return generate_phantom(PhantomSpec.default())


@pytest.fixture(scope="session")
def default_detections(default_phantom):
    return classical_detect(default_phantom[0])
