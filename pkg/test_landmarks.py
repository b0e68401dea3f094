#!/usr/bin/env python3
"""
Tests for per-class argmax landmark identification
"""

import random

import pytest

from detections import DetectionRecord, DetectionSet, LandmarkClass
from errors import ImplausibleGeometry, LandmarkMissing
from landmarks import format_landmark_report, identify_landmarks, write_landmark_report
from orientation import EulerAngles
from volume import VolumeGeometry

GEOMETRY = VolumeGeometry((512, 512, 139), (0.5, 0.5, 1.0), (-128.0, -128.0, 0.0))


def _rec(landmark, slice_index, confidence, cx=None, cy=250.0):
    if cx is None:
        cx = 300.0 if landmark.is_left else 200.0
    if not landmark.is_eye:
        cy = 350.0
    return DetectionRecord("c1", slice_index, landmark, cx, cy, 12.0, confidence)


def _baseline():
    return [_rec(c, 40, 0.8) for c in LandmarkClass]


def test_argmax_slice_becomes_z():
    records = _baseline() + [
        _rec(LandmarkClass.LEFT_EYE, 10, 0.3),
        _rec(LandmarkClass.LEFT_EYE, 11, 0.9),
        _rec(LandmarkClass.LEFT_EYE, 12, 0.7),
    ]
    result = identify_landmarks(DetectionSet("c1", tuple(records)), GEOMETRY)
    assert result[LandmarkClass.LEFT_EYE].voxel[2] == 11
    assert result[LandmarkClass.LEFT_EYE].confidence == 0.9


def test_missing_class_is_named():
    records = [r for r in _baseline() if r.landmark != LandmarkClass.RIGHT_EAC]
    with pytest.raises(LandmarkMissing, match="right_eac") as info:
        identify_landmarks(DetectionSet("c1", tuple(records)), GEOMETRY)
    assert info.value.classes == (LandmarkClass.RIGHT_EAC,)


def test_ties_prefer_lower_slice():
    records = [r for r in _baseline() if r.landmark != LandmarkClass.LEFT_EYE] + [
        _rec(LandmarkClass.LEFT_EYE, 14, 0.9),
        _rec(LandmarkClass.LEFT_EYE, 11, 0.9),
    ]
    result = identify_landmarks(DetectionSet("c1", tuple(records)), GEOMETRY)
    assert result[LandmarkClass.LEFT_EYE].voxel[2] == 11


def test_min_confidence_floor():
    records = _baseline() + [_rec(LandmarkClass.RIGHT_EYE, 3, 0.05)]
    ds = DetectionSet("c1", tuple(r for r in records if r.landmark != LandmarkClass.RIGHT_EYE or r.confidence < 0.1))
    assert identify_landmarks(ds, GEOMETRY)[LandmarkClass.RIGHT_EYE].voxel[2] == 3
    with pytest.raises(LandmarkMissing):
        identify_landmarks(ds, GEOMETRY, min_confidence=0.1)


def test_permutation_and_monotonicity():
    records = _baseline() + [
        _rec(c, s, conf) for c in LandmarkClass for s, conf in ((30, 0.2), (45, 0.95), (50, 0.6))
    ]
    expected = identify_landmarks(DetectionSet("c1", tuple(records)), GEOMETRY)
    rng = random.Random(5)
    for _ in range(20):
        shuffled = list(records)
        rng.shuffle(shuffled)
        assert identify_landmarks(DetectionSet("c1", tuple(shuffled)), GEOMETRY) == expected
    weaker = records + [_rec(LandmarkClass.LEFT_EAC, 77, 0.94)]
    assert identify_landmarks(DetectionSet("c1", tuple(weaker)), GEOMETRY) == expected


def test_physical_coordinates_follow_geometry():
    result = identify_landmarks(DetectionSet("c1", tuple(_baseline())), GEOMETRY)
    p = result[LandmarkClass.LEFT_EYE]
    assert p.voxel == (300.0, 250.0, 40.0)
    assert p.physical == (22.0, -3.0, 40.0)


def test_coincident_pair_is_implausible():
    records = [r for r in _baseline() if r.landmark != LandmarkClass.RIGHT_EYE]
    records.append(_rec(LandmarkClass.RIGHT_EYE, 40, 0.8, cx=300.4))
    with pytest.raises(ImplausibleGeometry):
        identify_landmarks(DetectionSet("c1", tuple(records)), GEOMETRY)


def test_landmark_report(tmp_path):
    result = identify_landmarks(DetectionSet("c1", tuple(_baseline())), GEOMETRY)
    text = format_landmark_report(result, EulerAngles.from_degrees(1.234, -2.0, 0.0), ["yaw big"])
    assert "# roll_deg = 1.23" in text
    assert "# warning: yaw big" in text
    assert "left_eye,300.000000,250.000000,40.000000,22.000000,-3.000000,40.000000,0.800000" in text
    path = tmp_path / "report.csv"
    write_landmark_report(result, None, str(path))
    assert path.read_text().count("\n") == 6
