#!/usr/bin/env python3
"""
Error Hierarchy
Every failure the toolkit raises, each tagged with the CLI exit code it maps to
"""

from typing import Iterable, Tuple

EXIT_OK = 0
EXIT_LANDMARK_MISSING = 2
EXIT_IO = 3
EXIT_GEOMETRY = 4
EXIT_USAGE = 64


class OmlineError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class InputFormatError(OmlineError, ValueError):
    exit_code = EXIT_IO


class VolumeFormatError(InputFormatError):
    pass


class DicomParseError(InputFormatError):
    pass


class SeriesAssemblyError(InputFormatError):
    pass


class DetectionFormatError(InputFormatError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class DimensionMismatch(InputFormatError):
    pass


class LandmarkMissing(OmlineError):
    exit_code = EXIT_LANDMARK_MISSING

    def __init__(self, classes: Iterable):
        self.classes: Tuple = tuple(classes)
        names = ", ".join(str(getattr(c, "value", c)) for c in self.classes)
        super().__init__(f"missing landmark(s): {names}")


class GeometryError(OmlineError, ValueError):
    exit_code = EXIT_GEOMETRY


class ImplausibleGeometry(GeometryError):
    pass


class DegenerateLandmarks(GeometryError):
    pass


class EmptySurface(GeometryError):
    pass


class MarkerOutOfFrame(GeometryError):
    pass


class AllZeroDifferences(GeometryError):
    pass


class ConfigError(OmlineError, ValueError):
    exit_code = EXIT_USAGE


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit-code taxonomy"""
    if isinstance(exc, OmlineError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1
