#!/usr/bin/env python3
"""
Landmark Identification
Picks, per landmark class, the highest-confidence detection across all slices of a case
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterable, Optional, Tuple

import numpy as np

from detections import DetectionRecord, DetectionSet, LandmarkClass
from errors import DetectionFormatError, ImplausibleGeometry, LandmarkMissing
from io_utils import atomic_write_text
from volume import VolumeGeometry, voxel_to_physical

if TYPE_CHECKING:
    from orientation import EulerAngles

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]

PAIRS = (
    (LandmarkClass.LEFT_EYE, LandmarkClass.RIGHT_EYE),
    (LandmarkClass.LEFT_EAC, LandmarkClass.RIGHT_EAC),
)


@dataclass(frozen=True)
class LandmarkPoint:
    landmark: LandmarkClass
    voxel: Triple
    physical: Triple
    confidence: float


@dataclass(frozen=True)
class LandmarkSet:
    case_id: str
    points: Tuple[LandmarkPoint, ...]

    def __post_init__(self):
        points = tuple(sorted(self.points, key=lambda p: list(LandmarkClass).index(p.landmark)))
        if tuple(p.landmark for p in points) != tuple(LandmarkClass):
            raise DetectionFormatError("a landmark set needs exactly one point per landmark class")
        object.__setattr__(self, "points", points)

    def __getitem__(self, landmark: LandmarkClass) -> LandmarkPoint:
        return self.points[list(LandmarkClass).index(landmark)]

    def coordinates(self, index_space: bool = False) -> Dict[LandmarkClass, np.ndarray]:
        """Per-class (x, y, z) vectors in mm, or in raw voxel indices when index_space is set"""
        return {
            p.landmark: np.asarray(p.voxel if index_space else p.physical, dtype=np.float64)
            for p in self.points
        }


def _best_record(records: Iterable[DetectionRecord]) -> DetectionRecord:
    # equal confidences resolve to the lowest slice, then lowest cx, then lowest cy
    return min(records, key=lambda r: (-r.confidence, r.slice_index, r.cx, r.cy))


def identify_landmarks(
    detections: DetectionSet, geometry: VolumeGeometry, min_confidence: float = 0.0
) -> LandmarkSet:
    """Global per-class argmax over confidence; the winner's slice index becomes z"""
    points = []
    missing = []
    for landmark in LandmarkClass:
        candidates = [r for r in detections.by_class(landmark) if r.confidence >= min_confidence]
        if not candidates:
            missing.append(landmark)
            continue
        best = _best_record(candidates)
        voxel = (best.cx, best.cy, float(best.slice_index))
        points.append(LandmarkPoint(landmark, voxel, voxel_to_physical(geometry, voxel), best.confidence))
        logger.debug(
            "%s: slice %d (%.2f, %.2f) confidence %.4f out of %d candidate(s)",
            landmark.value, best.slice_index, best.cx, best.cy, best.confidence, len(candidates),
        )
    if missing:
        raise LandmarkMissing(missing)

    landmarks = LandmarkSet(detections.case_id, tuple(points))
    for left, right in PAIRS:
        gap = np.linalg.norm(np.subtract(landmarks[left].voxel, landmarks[right].voxel))
        if gap < 1.0:
            raise ImplausibleGeometry(
                f"{left.value} and {right.value} lie {gap:.3f} voxel apart; a bilateral pair must not coincide"
            )

    nx, ny, nz = geometry.dims
    for p in landmarks.points:
        x, y, z = p.voxel
        if not (0 <= x <= nx - 1 and 0 <= y <= ny - 1 and 0 <= z <= nz - 1):
            logger.warning("%s at voxel %s lies outside the %s grid", p.landmark.value, p.voxel, geometry.dims)
    return landmarks


def format_landmark_report(
    landmarks: LandmarkSet,
    angles: Optional["EulerAngles"] = None,
    warnings: Iterable[str] = (),
    index_space: bool = False,
) -> str:
    lines = [f"# case_id = {landmarks.case_id}"]
    if angles is not None:
        roll, pitch, yaw = angles.degrees()
        lines.append(f"# roll_deg = {roll:.2f}")
        lines.append(f"# pitch_deg = {pitch:.2f}")
        lines.append(f"# yaw_deg = {yaw:.2f}")
        lines.append(f"# angle_space = {'index' if index_space else 'physical'}")
    lines.extend(f"# warning: {w}" for w in warnings)
    lines.append("class,vx,vy,vz,px,py,pz,confidence")
    for p in landmarks.points:
        coords = ",".join(f"{c:.6f}" for c in p.voxel + p.physical)
        lines.append(f"{p.landmark.value},{coords},{p.confidence:.6f}")
    return "\n".join(lines) + "\n"


def write_landmark_report(
    landmarks: LandmarkSet,
    angles: Optional["EulerAngles"],
    path: str,
    warnings: Iterable[str] = (),
    index_space: bool = False,
) -> None:
    atomic_write_text(path, format_landmark_report(landmarks, angles, warnings, index_space))
