#!/usr/bin/env python3
"""
Synthetic Head Phantom
Analytic head CT with eye and ear-canal markers, known landmark truth, and a classical
threshold-and-blob detector standing in for a trained network
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from detections import DetectionRecord, DetectionSet, GroundTruthBox, LandmarkClass
from errors import GeometryError, MarkerOutOfFrame
from io_utils import atomic_write_text
from landmarks import LandmarkPoint, LandmarkSet
from orientation import EulerAngles, pose_matrix
from reformat import resample_rotated
from volume import Volume, VolumeGeometry, physical_to_voxel

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]

REFERENCE_SIZE_MM = 128.0
MAX_TILT_DEG = 20.0

# anatomy of the reference 128 mm phantom, offsets in mm from the grid center;
# left-right marker pairs sit more than 57.3 mm apart so a one-slice height
# difference between them reads as less than 1 degree
HEAD_SEMI_AXES = (58.0, 62.0, 50.0)
EYE_OFFSET = (30.5, -38.5, -3.5)
EAC_OFFSET = (30.5, 22.5, -3.5)
EYE_RADIUS = 6.0
EAC_RADIUS = 4.0
EAC_BONE_RADIUS = 8.0


def _snap(offset: float, center: float, spacing: float) -> Tuple[int, float]:
    index = math.floor(center + offset / spacing + 0.5)
    return index, (index - center) * spacing


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (128, 128, 128)
    spacing: Triple = (1.0, 1.0, 1.0)
    tilt: EulerAngles = field(default_factory=EulerAngles)
    head_semi_axes: Triple = HEAD_SEMI_AXES
    left_eye: Triple = EYE_OFFSET
    right_eye: Triple = (-EYE_OFFSET[0], EYE_OFFSET[1], EYE_OFFSET[2])
    left_eac: Triple = EAC_OFFSET
    right_eac: Triple = (-EAC_OFFSET[0], EAC_OFFSET[1], EAC_OFFSET[2])
    eye_radius: float = EYE_RADIUS
    eac_radius: float = EAC_RADIUS
    eac_bone_radius: float = EAC_BONE_RADIUS
    eye_hu: int = 300
    bone_hu: int = 700
    tissue_hu: int = 40
    air_hu: int = -1000
    case_id: str = "phantom"

    def __post_init__(self):
        VolumeGeometry(self.dims, self.spacing)
        if not 0 < self.eac_radius < self.eac_bone_radius:
            raise GeometryError("ear-canal air must sit inside its bone shell")
        for name, radius in self.marker_radii().items():
            offset = np.asarray(getattr(self, name)) / np.asarray(self.head_semi_axes)
            # scaled-space ball around the marker must stay inside the unit sphere
            if np.linalg.norm(offset) + radius / min(self.head_semi_axes) >= 1.0:
                raise GeometryError(f"{name} marker is not strictly inside the head")
        for left, right in (("left_eye", "right_eye"), ("left_eac", "right_eac")):
            l, r = getattr(self, left), getattr(self, right)
            if not (math.isclose(l[0], -r[0], abs_tol=1e-9) and math.isclose(l[1], r[1], abs_tol=1e-9)
                    and math.isclose(l[2], r[2], abs_tol=1e-9)):
                raise GeometryError(f"{left}/{right} are not mirror-symmetric about the sagittal plane")
        if any(abs(a) > MAX_TILT_DEG + 1e-9 for a in self.tilt.degrees()):
            raise GeometryError(f"phantom tilt components must stay within +/-{MAX_TILT_DEG:g} deg")

    @classmethod
    def default(cls, size: int = 128, spacing: float = 1.0, tilt: Optional[EulerAngles] = None) -> "PhantomSpec":
        """Reference anatomy scaled to a size^3 grid, markers snapped to voxel centers"""
        f = size * spacing / REFERENCE_SIZE_MM
        ci = (size - 1) / 2.0
        _, x_off = _snap(EYE_OFFSET[0] * f, ci, spacing)
        _, eye_y = _snap(EYE_OFFSET[1] * f, ci, spacing)
        _, eac_y = _snap(EAC_OFFSET[1] * f, ci, spacing)
        _, z_off = _snap(EYE_OFFSET[2] * f, ci, spacing)
        return cls(
            dims=(size, size, size),
            spacing=(spacing, spacing, spacing),
            tilt=tilt or EulerAngles(),
            head_semi_axes=tuple(a * f for a in HEAD_SEMI_AXES),
            left_eye=(x_off, eye_y, z_off),
            right_eye=(-x_off, eye_y, z_off),
            left_eac=(x_off, eac_y, z_off),
            right_eac=(-x_off, eac_y, z_off),
            eye_radius=EYE_RADIUS * f,
            eac_radius=EAC_RADIUS * f,
            eac_bone_radius=EAC_BONE_RADIUS * f,
        )

    @property
    def geometry(self) -> VolumeGeometry:
        return VolumeGeometry(self.dims, self.spacing)

    def marker_radii(self) -> Dict[str, float]:
        return {
            "left_eye": self.eye_radius, "right_eye": self.eye_radius,
            "left_eac": self.eac_bone_radius, "right_eac": self.eac_bone_radius,
        }

    def offset(self, landmark: LandmarkClass) -> np.ndarray:
        return np.asarray(getattr(self, landmark.value), dtype=np.float64)

    def radius(self, landmark: LandmarkClass) -> float:
        return self.eye_radius if landmark.is_eye else self.eac_radius


@dataclass(frozen=True)
class PhantomTruth:
    tilt: EulerAngles
    physical: Dict[LandmarkClass, Triple]
    voxel: Dict[LandmarkClass, Triple]

    def landmark_set(self, case_id: str = "phantom") -> LandmarkSet:
        return LandmarkSet(case_id, tuple(
            LandmarkPoint(c, self.voxel[c], self.physical[c], 1.0) for c in LandmarkClass
        ))


def _offset_grids(g: VolumeGeometry) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcastable mm offsets from the grid center, in array order (z, y, x)"""
    nz, ny, nx = g.shape
    cx, cy, cz = g.center_index
    sx, sy, sz = g.spacing
    z, y, x = np.ogrid[:nz, :ny, :nx]
    return (x - cx) * sx, (y - cy) * sy, (z - cz) * sz


def _ball(grids, center, radius: float) -> np.ndarray:
    x, y, z = grids
    return (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2 <= radius ** 2


def render_untilted(spec: PhantomSpec) -> Volume:
    g = spec.geometry
    grids = _offset_grids(g)
    x, y, z = grids
    a, b, c = spec.head_semi_axes
    data = np.full(g.shape, spec.air_hu, dtype=np.int16)
    data[(x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2 <= 1.0] = spec.tissue_hu
    for eye in (spec.left_eye, spec.right_eye):
        data[_ball(grids, eye, spec.eye_radius)] = spec.eye_hu
    for eac in (spec.left_eac, spec.right_eac):
        data[_ball(grids, eac, spec.eac_bone_radius)] = spec.bone_hu
        data[_ball(grids, eac, spec.eac_radius)] = spec.air_hu
    return Volume(g, data)


def generate_phantom(spec: PhantomSpec, threads: int = 1) -> Tuple[Volume, PhantomTruth, List[GroundTruthBox]]:
    """Render, tilt by the phantom's pose, and report analytic landmark truth with annotation boxes"""
    g = spec.geometry
    R = pose_matrix(spec.tilt)
    volume = render_untilted(spec)
    if spec.tilt.as_tuple() != (0.0, 0.0, 0.0):
        volume = resample_rotated(volume, R, fill=spec.air_hu, threads=threads)

    center = np.asarray(g.center_mm)
    physical, voxel = {}, {}
    for landmark in LandmarkClass:
        p = center + R @ spec.offset(landmark)
        idx = physical_to_voxel(g, p)
        reach = np.asarray(spec.marker_radii()[landmark.value]) / np.asarray(g.spacing)
        if np.any(np.asarray(idx) - reach < 0) or np.any(np.asarray(idx) + reach > np.asarray(g.dims) - 1):
            raise MarkerOutOfFrame(f"{landmark.value} marker leaves the volume after the tilt")
        physical[landmark] = tuple(float(v) for v in p)
        voxel[landmark] = idx
    truth = PhantomTruth(spec.tilt, physical, voxel)

    sx, sy, _ = g.spacing
    boxes = []
    for landmark in LandmarkClass:
        vx, vy, vz = voxel[landmark]
        hx, hy = spec.radius(landmark) / sx, spec.radius(landmark) / sy
        boxes.append(GroundTruthBox(
            spec.case_id, int(math.floor(vz + 0.5)), landmark, vx - hx, vy - hy, vx + hx, vy + hy,
        ))
    logger.info("phantom %s tilt=(%.1f, %.1f, %.1f) deg", g.dims, *spec.tilt.degrees())
    return volume, truth, boxes


def render_sphere_phantom(
    size: int = 64, radius_mm: float = 20.0, spacing: float = 1.0,
    inside_hu: int = 300, outside_hu: int = -1000, ramp_voxels: float = 2.0,
) -> Volume:
    """Centered sphere with a linear edge ramp whose midpoint level sits exactly at radius_mm"""
    g = VolumeGeometry((size, size, size), (spacing, spacing, spacing))
    x, y, z = _offset_grids(g)
    d = np.sqrt(x ** 2 + y ** 2 + z ** 2)
    blend = np.clip(0.5 - (d - radius_mm) / (ramp_voxels * spacing), 0.0, 1.0)
    return Volume.from_hu(g, outside_hu + (inside_hu - outside_hu) * blend)


def write_phantom_truth(truth: PhantomTruth, path: str) -> None:
    roll, pitch, yaw = truth.tilt.degrees()
    lines = [
        f"# roll_deg = {roll:.6f}",
        f"# pitch_deg = {pitch:.6f}",
        f"# yaw_deg = {yaw:.6f}",
        "class,vx,vy,vz,px,py,pz",
    ]
    for c in LandmarkClass:
        coords = ",".join(f"{v:.6f}" for v in truth.voxel[c] + truth.physical[c])
        lines.append(f"{c.value},{coords}")
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass(frozen=True)
class DetectorConfig:
    head_min_hu: float = -500.0
    eye_min_hu: float = 250.0
    bone_min_hu: float = 500.0
    bone_margin: int = 2
    eac_max_hu: float = -500.0
    ring_inner: int = 1
    ring_outer: int = 3
    ring_fraction: float = 0.75
    eye_radius_mm: float = EYE_RADIUS
    eac_radius_mm: float = EAC_RADIUS
    min_area_ratio: float = 0.15
    max_area_ratio: float = 3.0
    eye_weight_hu: Tuple[float, float] = (40.0, 300.0)
    eac_weight_hu: Tuple[float, float] = (700.0, -1000.0)
    full_roundness: float = 0.85

    @classmethod
    def for_spec(cls, spec: PhantomSpec, **overrides) -> "DetectorConfig":
        return replace(cls(eye_radius_mm=spec.eye_radius, eac_radius_mm=spec.eac_radius), **overrides)


_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class _Blob:
    slice_index: int
    landmark: LandmarkClass
    cx: float
    cy: float
    side: float
    area: float
    roundness: float


def _measure_blob(
    img: np.ndarray, blob: np.ndarray, eye: bool, config: DetectorConfig
) -> Optional[Tuple[float, float, float, float, float]]:
    """(cx, cy, side, area, roundness) of one blob, each pixel weighted by how strongly it shows the marker"""
    region = ndimage.binary_dilation(blob)
    lo, hi = config.eye_weight_hu if eye else config.eac_weight_hu
    w = np.clip((img[region] - lo) / (hi - lo), 0.0, 1.0)
    area = float(w.sum())
    if area <= 0:
        return None
    ys, xs = np.nonzero(region)
    cx = float((w * xs).sum() / area)
    cy = float((w * ys).sum() / area)
    cov = np.cov(np.vstack([xs, ys]), aweights=w, bias=True) if len(xs) > 1 else np.zeros((2, 2))
    eig = np.linalg.eigvalsh(cov)
    roundness = math.sqrt(max(eig[0], 0.0) / eig[1]) if eig[1] > 0 else 0.0
    bys, bxs = np.nonzero(blob)
    side = float(max(bxs.max() - bxs.min(), bys.max() - bys.min()) + 1)
    return cx, cy, side, area, roundness


def _slice_blobs(img: np.ndarray, k: int, expected: Dict[bool, float], config: DetectorConfig) -> List[_Blob]:
    head = ndimage.binary_fill_holes(img > config.head_min_hu)
    if not head.any():
        return []
    head_cx = float(np.nonzero(head)[1].mean())
    bone = img >= config.bone_min_hu
    near_bone = ndimage.binary_dilation(bone, iterations=config.bone_margin) if bone.any() else bone
    masks = {
        True: (img >= config.eye_min_hu) & ~near_bone & head,
        False: (img <= config.eac_max_hu) & head,
    }
    found = []
    for eye, mask in masks.items():
        labels, count = ndimage.label(mask, structure=_STRUCTURE)
        for n in range(1, count + 1):
            blob = labels == n
            pixels = int(blob.sum())
            if not config.min_area_ratio * expected[eye] <= pixels <= config.max_area_ratio * expected[eye]:
                continue
            if not eye:
                ring = (ndimage.binary_dilation(blob, iterations=config.ring_outer)
                        & ~ndimage.binary_dilation(blob, iterations=config.ring_inner))
                if not ring.any() or np.mean(img[ring] >= config.bone_min_hu) < config.ring_fraction:
                    continue
            measured = _measure_blob(img, blob, eye, config)
            if measured is None:
                continue
            cx, cy, side, area, roundness = measured
            left = cx > head_cx
            if eye:
                landmark = LandmarkClass.LEFT_EYE if left else LandmarkClass.RIGHT_EYE
            else:
                landmark = LandmarkClass.LEFT_EAC if left else LandmarkClass.RIGHT_EAC
            found.append(_Blob(k, landmark, cx, cy, side, area, roundness))
    return found


def _link_tracks(blobs: List[_Blob], link_px: Dict[bool, float]) -> List[List[_Blob]]:
    """Chain same-class blobs on consecutive slices whose centroids stay within the marker radius"""
    tracks: List[List[_Blob]] = []
    for b in blobs:
        best, best_d = None, None
        for track in tracks:
            last = track[-1]
            if last.landmark != b.landmark or last.slice_index != b.slice_index - 1:
                continue
            d = math.hypot(last.cx - b.cx, last.cy - b.cy)
            if d <= link_px[b.landmark.is_eye] and (best_d is None or d < best_d):
                best, best_d = track, d
        if best is None:
            tracks.append([b])
        else:
            best.append(b)
    return tracks


def track_center(areas: np.ndarray, slices: np.ndarray) -> float:
    """
    Sub-slice z of a marker from the cross-section areas along its track.

    Areas above half the peak are weighted by their excess over it, so slices
    fade in and out of the estimate continuously. Section areas of a sphere are
    symmetric about its center.
    """
    areas = np.asarray(areas, dtype=np.float64)
    w = np.clip(areas - areas.max() / 2.0, 0.0, None)
    return float((w * np.asarray(slices, dtype=np.float64)).sum() / w.sum())


def _score_track(
    case_id: str, track: List[_Blob], expected_area: float, radius_slices: float, config: DetectorConfig
) -> List[DetectionRecord]:
    """
    confidence = circularity x size match. The size match is how well the track's widest
    section fits the expected marker area, times the share of that section this slice
    should show at its distance from the track center; it peaks on the slice nearest the center.
    """
    areas = np.array([b.area for b in track])
    center = track_center(areas, np.array([b.slice_index for b in track]))
    peak = float(areas.max())
    agreement = min(peak, expected_area) / max(peak, expected_area)
    records = []
    for b in track:
        section = max(0.0, 1.0 - ((b.slice_index - center) / radius_slices) ** 2)
        shape = min(1.0, b.roundness / config.full_roundness)
        confidence = min(max(shape * agreement * section, 0.0), 1.0)
        records.append(DetectionRecord(case_id, b.slice_index, b.landmark, b.cx, b.cy, b.side, confidence))
    return records


def classical_detect(v: Volume, config: DetectorConfig = DetectorConfig(), case_id: str = "phantom") -> DetectionSet:
    """Per-slice threshold segmentation and 8-connected blob analysis for eyes and ear canals"""
    sx, sy, sz = v.geometry.spacing
    radius_mm = {True: config.eye_radius_mm, False: config.eac_radius_mm}
    expected = {eye: math.pi * r ** 2 / (sx * sy) for eye, r in radius_mm.items()}
    link_px = {eye: r / min(sx, sy) for eye, r in radius_mm.items()}

    blobs: List[_Blob] = []
    for k in range(v.geometry.shape[0]):
        blobs.extend(_slice_blobs(v.voxels[k].astype(np.float64), k, expected, config))
    order = list(LandmarkClass)
    blobs.sort(key=lambda b: (b.slice_index, order.index(b.landmark), b.cx, b.cy))

    tracks = _link_tracks(blobs, link_px)
    records = []
    for track in tracks:
        eye = track[0].landmark.is_eye
        records.extend(_score_track(case_id, track, expected[eye], radius_mm[eye] / sz, config))
    records.sort(key=lambda r: (r.slice_index, order.index(r.landmark), r.cx, r.cy))
    logger.info(
        "classical detector: %d candidate(s) in %d track(s) over %d slice(s)",
        len(records), len(tracks), v.geometry.shape[0],
    )
    return DetectionSet(case_id, tuple(records))
