#!/usr/bin/env python3
"""
Landmark Detections
Prediction and ground-truth records for the four orbitomeatal landmarks, with CSV line I/O
"""

import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

from errors import DetectionFormatError
from io_utils import atomic_path

logger = logging.getLogger(__name__)

DETECTION_HEADER = ("case_id", "slice_index", "class", "cx", "cy", "box_size", "confidence")
GROUND_TRUTH_HEADER = ("case_id", "slice_index", "class", "x_min", "y_min", "x_max", "y_max")

Rect = Tuple[float, float, float, float]


class LandmarkClass(str, Enum):
    LEFT_EYE = "left_eye"
    RIGHT_EYE = "right_eye"
    LEFT_EAC = "left_eac"
    RIGHT_EAC = "right_eac"

    @classmethod
    def parse(cls, label: str) -> "LandmarkClass":
        try:
            return cls(label.strip())
        except ValueError:
            raise DetectionFormatError(f"unknown class label {label!r}")

    @property
    def is_eye(self) -> bool:
        return self in (LandmarkClass.LEFT_EYE, LandmarkClass.RIGHT_EYE)

    @property
    def is_left(self) -> bool:
        return self in (LandmarkClass.LEFT_EYE, LandmarkClass.LEFT_EAC)

    def __str__(self) -> str:
        return self.value


def _check_case_id(case_id: str) -> None:
    if not case_id or any(ch in case_id for ch in ",\n\r"):
        raise DetectionFormatError(f"invalid case_id {case_id!r}")


def _check_finite(**values) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise DetectionFormatError(f"{name} must be finite, got {value}")


@dataclass(frozen=True)
class DetectionRecord:
    case_id: str
    slice_index: int
    landmark: LandmarkClass
    cx: float
    cy: float
    box_size: float
    confidence: float

    def __post_init__(self):
        _check_case_id(self.case_id)
        _check_finite(cx=self.cx, cy=self.cy, box_size=self.box_size, confidence=self.confidence)
        if self.slice_index < 0:
            raise DetectionFormatError(f"slice_index must be >= 0, got {self.slice_index}")
        if self.box_size <= 0:
            raise DetectionFormatError(f"box_size must be > 0, got {self.box_size}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectionFormatError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_rect(self) -> Rect:
        """Center + side square as an (x_min, y_min, x_max, y_max) rectangle"""
        half = self.box_size / 2.0
        return (self.cx - half, self.cy - half, self.cx + half, self.cy + half)


@dataclass(frozen=True)
class DetectionSet:
    case_id: str
    records: Tuple[DetectionRecord, ...] = ()

    def __post_init__(self):
        records = tuple(self.records)
        strangers = {r.case_id for r in records} - {self.case_id}
        if strangers:
            raise DetectionFormatError(
                f"detection set {self.case_id!r} holds records of other cases: {sorted(strangers)}"
            )
        object.__setattr__(self, "records", records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[DetectionRecord]:
        return iter(self.records)

    def by_class(self, landmark: LandmarkClass) -> List[DetectionRecord]:
        return [r for r in self.records if r.landmark == landmark]

    def slice_groups(self) -> Dict[int, List[DetectionRecord]]:
        """Candidate landmark groups keyed by slice index"""
        groups: Dict[int, List[DetectionRecord]] = defaultdict(list)
        for r in self.records:
            groups[r.slice_index].append(r)
        return dict(sorted(groups.items()))


@dataclass(frozen=True)
class GroundTruthBox:
    case_id: str
    slice_index: int
    landmark: LandmarkClass
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        _check_case_id(self.case_id)
        _check_finite(x_min=self.x_min, y_min=self.y_min, x_max=self.x_max, y_max=self.y_max)
        if self.slice_index < 0:
            raise DetectionFormatError(f"slice_index must be >= 0, got {self.slice_index}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DetectionFormatError(
                f"box corners out of order: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    def to_rect(self) -> Rect:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def _iter_rows(path: str, header: Tuple[str, ...]) -> Iterator[Tuple[int, List[str]]]:
    """Yield (line number, fields) for each data line; the first content line is the header"""
    seen_header = False
    with open(path, "r", encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if not seen_header:
                if tuple(fields) != header:
                    raise DetectionFormatError(
                        f"expected header {','.join(header)}, got {line!r}", number
                    )
                seen_header = True
                continue
            if len(fields) != len(header):
                raise DetectionFormatError(
                    f"malformed line: expected {len(header)} fields, got {len(fields)}", number
                )
            yield number, fields
    if not seen_header:
        raise DetectionFormatError(f"{path}: missing header line")


def _parse_common(fields: List[str]) -> Tuple[str, int, LandmarkClass, List[float]]:
    try:
        slice_index = int(fields[1])
        numbers = [float(f) for f in fields[3:]]
    except ValueError as exc:
        raise DetectionFormatError(f"malformed line: {exc}")
    return fields[0], slice_index, LandmarkClass.parse(fields[2]), numbers


def iter_detection_records(path: str) -> Iterator[DetectionRecord]:
    """Stream detection records of every case in a file"""
    for number, fields in _iter_rows(path, DETECTION_HEADER):
        try:
            case_id, slice_index, landmark, (cx, cy, size, conf) = _parse_common(fields)
            yield DetectionRecord(case_id, slice_index, landmark, cx, cy, size, conf)
        except DetectionFormatError as exc:
            raise DetectionFormatError(str(exc), number)


def read_detection_records(path: str) -> List[DetectionRecord]:
    return list(iter_detection_records(path))


def read_detections(path: str, case_id: Optional[str] = None) -> DetectionSet:
    """Load the detections of one case; a multi-case file needs `case_id` to pick one"""
    records = read_detection_records(path)
    cases = sorted({r.case_id for r in records})
    if case_id is None:
        if len(cases) > 1:
            raise DetectionFormatError(
                f"{path} holds {len(cases)} cases ({', '.join(cases)}); select one with a case id"
            )
        case_id = cases[0] if cases else os.path.splitext(os.path.basename(path))[0]
    else:
        records = [r for r in records if r.case_id == case_id]
    logger.debug("read %d detection(s) for case %s from %s", len(records), case_id, path)
    return DetectionSet(case_id, tuple(records))


def _write_rows(path: str, header: Tuple[str, ...], rows: Iterable[str]) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(",".join(header) + "\n")
            for row in rows:
                handle.write(row + "\n")


def write_detections(detections: Iterable[DetectionRecord], path: str) -> None:
    """Write detection records (a DetectionSet or any iterable of records)"""
    _write_rows(path, DETECTION_HEADER, (
        f"{r.case_id},{r.slice_index},{r.landmark.value},"
        f"{r.cx:.6f},{r.cy:.6f},{r.box_size:.6f},{r.confidence:.6f}"
        for r in detections
    ))


def read_ground_truth(path: str) -> List[GroundTruthBox]:
    boxes = []
    for number, fields in _iter_rows(path, GROUND_TRUTH_HEADER):
        try:
            case_id, slice_index, landmark, (x0, y0, x1, y1) = _parse_common(fields)
            boxes.append(GroundTruthBox(case_id, slice_index, landmark, x0, y0, x1, y1))
        except DetectionFormatError as exc:
            raise DetectionFormatError(str(exc), number)
    return boxes


def write_ground_truth(boxes: Iterable[GroundTruthBox], path: str) -> None:
    _write_rows(path, GROUND_TRUTH_HEADER, (
        f"{b.case_id},{b.slice_index},{b.landmark.value},"
        f"{b.x_min:.6f},{b.y_min:.6f},{b.x_max:.6f},{b.y_max:.6f}"
        for b in boxes
    ))
