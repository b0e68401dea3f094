#!/usr/bin/env python3
"""
Head Pose Angles
Roll, pitch and yaw from the eye and ear-canal landmarks, and the rotations built from them

Axes follow the volume's patient coordinates: x points to the patient's left, y to the
posterior and z along the scan axis. Roll turns about x, pitch about y, yaw about z.
Rotation matrices act on column vectors and are right-handed.
"""

import logging
import math
from dataclasses import dataclass
from functools import reduce
from typing import Dict, List, Tuple

import numpy as np

from detections import LandmarkClass
from errors import DegenerateLandmarks, GeometryError
from landmarks import LandmarkSet

logger = logging.getLogger(__name__)

HALF_PI = math.pi / 2.0
DEGENERATE_EPS = 1e-9
ORTHONORMAL_TOL = 1e-9

RotationMatrix = np.ndarray


@dataclass(frozen=True)
class EulerAngles:
    """Radians; each component lies in [-pi/2, pi/2]"""
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise GeometryError(f"{name} must be finite, got {value}")
            if abs(value) > HALF_PI + 1e-12:
                raise GeometryError(f"{name} {math.degrees(value):.3f} deg lies outside [-90, 90]")
            object.__setattr__(self, name, value)

    @classmethod
    def from_degrees(cls, roll: float = 0.0, pitch: float = 0.0, yaw: float = 0.0) -> "EulerAngles":
        return cls(math.radians(roll), math.radians(pitch), math.radians(yaw))

    def degrees(self) -> Tuple[float, float, float]:
        return (math.degrees(self.roll), math.degrees(self.pitch), math.degrees(self.yaw))

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.roll, self.pitch, self.yaw)

    def __neg__(self) -> "EulerAngles":
        return EulerAngles(-self.roll, -self.pitch, -self.yaw)


def reduce_angle(angle: float) -> float:
    """Fold an angle onto the undirected-axis range (-pi/2, pi/2]"""
    while angle > HALF_PI:
        angle -= math.pi
    while angle <= -HALF_PI:
        angle += math.pi
    return angle


def _smaller(angles: List[float]) -> float:
    # smaller magnitude wins, sign kept
    return min(angles, key=abs)


def _pair_angle(num: float, den: float) -> float:
    return reduce_angle(math.atan2(num, den))


def _coords(landmarks: LandmarkSet, index_space: bool) -> Dict[LandmarkClass, np.ndarray]:
    return landmarks.coordinates(index_space)


def compute_roll(landmarks: LandmarkSet, index_space: bool = False) -> float:
    """Eye-above-ear-canal angle in the y-z plane, taken on whichever side tilts less"""
    c = _coords(landmarks, index_space)
    sides = []
    for eye, eac in ((LandmarkClass.LEFT_EYE, LandmarkClass.LEFT_EAC),
                     (LandmarkClass.RIGHT_EYE, LandmarkClass.RIGHT_EAC)):
        dy = c[eye][1] - c[eac][1]
        dz = c[eye][2] - c[eac][2]
        if abs(dy) < DEGENERATE_EPS and abs(dz) < DEGENERATE_EPS:
            logger.warning("roll: %s and %s coincide in y-z; side ignored", eye.value, eac.value)
            continue
        sides.append(_pair_angle(dz, dy))
    if not sides:
        raise DegenerateLandmarks("roll undefined: eyes and ear canals coincide in y-z on both sides")
    return _smaller(sides)


def compute_pitch(landmarks: LandmarkSet, index_space: bool = False) -> float:
    """Left-versus-right height difference in the x-z plane, eye pair or ear-canal pair"""
    c = _coords(landmarks, index_space)
    pairs = []
    for left, right in ((LandmarkClass.LEFT_EYE, LandmarkClass.RIGHT_EYE),
                        (LandmarkClass.LEFT_EAC, LandmarkClass.RIGHT_EAC)):
        dx = c[left][0] - c[right][0]
        dz = c[left][2] - c[right][2]
        if abs(dx) < DEGENERATE_EPS and abs(dz) < DEGENERATE_EPS:
            logger.warning("pitch: %s and %s coincide in x-z; pair ignored", left.value, right.value)
            continue
        pairs.append(_pair_angle(dz, dx))
    if not pairs:
        raise DegenerateLandmarks("pitch undefined: both bilateral pairs coincide in x-z")
    return _smaller(pairs)


def compute_yaw(landmarks: LandmarkSet, index_space: bool = False) -> float:
    c = _coords(landmarks, index_space)
    dx = c[LandmarkClass.LEFT_EYE][0] - c[LandmarkClass.RIGHT_EYE][0]
    dy = c[LandmarkClass.LEFT_EYE][1] - c[LandmarkClass.RIGHT_EYE][1]
    if abs(dx) < DEGENERATE_EPS and abs(dy) < DEGENERATE_EPS:
        raise DegenerateLandmarks("yaw undefined: the eyes coincide in x-y")
    return _pair_angle(dy, dx)


def compute_angles(landmarks: LandmarkSet, index_space: bool = False) -> EulerAngles:
    angles = EulerAngles(
        roll=compute_roll(landmarks, index_space),
        pitch=compute_pitch(landmarks, index_space),
        yaw=compute_yaw(landmarks, index_space),
    )
    logger.info("head pose roll=%.2f pitch=%.2f yaw=%.2f deg", *angles.degrees())
    return angles


def _rx(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(a: EulerAngles) -> RotationMatrix:
    """R = Rx(roll) . Ry(pitch) . Rz(yaw); zero angles contribute no factor"""
    factors = []
    if a.roll:
        factors.append(_rx(a.roll))
    if a.pitch:
        factors.append(_ry(a.pitch))
    if a.yaw:
        factors.append(_rz(a.yaw))
    if factors:
        return reduce(np.dot, factors)
    return np.eye(3)


def matrix_to_euler(R: RotationMatrix) -> EulerAngles:
    """Inverse of euler_to_matrix for pitch strictly inside (-90, 90) deg"""
    R = np.asarray(R, dtype=np.float64)
    pitch = math.asin(float(np.clip(R[0, 2], -1.0, 1.0)))
    yaw = math.atan2(-R[0, 1], R[0, 0])
    roll = math.atan2(-R[1, 2], R[2, 2])
    return EulerAngles(roll, pitch, yaw)


def pose_matrix(a: EulerAngles) -> RotationMatrix:
    """
    Head-pose rotation whose measured roll, pitch and yaw are exactly `a`.

    Built column by column: the left-right axis is set by yaw and pitch, the
    front-back axis by roll inside the plane orthogonal to it. Equals Rx(roll)
    and Rz(yaw) for single-axis poses and Ry(-pitch) for a pure pitch.
    """
    cr, sr = math.cos(a.roll), math.sin(a.roll)
    cp, sp = math.cos(a.pitch), math.sin(a.pitch)
    cy, sy = math.cos(a.yaw), math.sin(a.yaw)
    lateral = np.array([cy * cp, sy * cp, cy * sp])
    frontal = np.array([-(sy * cp * cr + sp * sr * cy), cy * cp * cr, sr * cy * cp])
    lateral /= np.linalg.norm(lateral)
    frontal /= np.linalg.norm(frontal)
    axial = np.cross(lateral, frontal)
    axial /= np.linalg.norm(axial)
    return np.column_stack([lateral, frontal, axial])


def check_rotation(R: RotationMatrix) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise GeometryError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMAL_TOL) or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
        raise GeometryError("matrix is not a proper rotation")
    return R


def plausibility_check(a: EulerAngles, max_deg: float = 45.0) -> List[str]:
    """Warnings for every component whose magnitude exceeds max_deg; empty when plausible"""
    warnings = []
    for name, value in zip(("roll", "pitch", "yaw"), a.degrees()):
        if abs(value) > max_deg:
            warnings.append(f"{name} {value:.2f} deg exceeds the plausible {max_deg:g} deg")
    for w in warnings:
        logger.warning(w)
    return warnings
