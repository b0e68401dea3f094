#!/usr/bin/env python3
"""
Runtime Configuration
Loads defaults from the environment (and an optional .env file) into a validated Settings object
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigError

VERSION = "0.1.0"

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass(frozen=True)
class Settings:
    threads: int
    min_confidence: float
    max_angle_deg: float
    fill_hu: int
    iou_threshold: float
    log_level: str


def _read_number(key: str, default, cast):
    raw = os.getenv(key)
    if raw is None or raw.strip() == "":
        return default
    try:
        return cast(raw.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a {cast.__name__}, got {raw!r}")


def load_settings(env_file: Optional[str] = None) -> Settings:
    """Read OMLINE_* settings; explicit environment variables win over the .env file"""
    load_dotenv(dotenv_path=env_file, override=False)

    threads = _read_number("OMLINE_THREADS", os.cpu_count() or 1, int)
    min_confidence = _read_number("OMLINE_MIN_CONFIDENCE", 0.0, float)
    max_angle_deg = _read_number("OMLINE_MAX_ANGLE_DEG", 45.0, float)
    fill_hu = _read_number("OMLINE_FILL_HU", -1000, int)
    iou_threshold = _read_number("OMLINE_IOU_THRESHOLD", 0.5, float)
    log_level = os.getenv("OMLINE_LOG_LEVEL", "WARNING").strip().upper()

    if threads < 1:
        raise ConfigError("OMLINE_THREADS must be >= 1")
    if not 0.0 <= min_confidence <= 1.0:
        raise ConfigError("OMLINE_MIN_CONFIDENCE must lie in [0, 1]")
    if not 0.0 < max_angle_deg <= 90.0:
        raise ConfigError("OMLINE_MAX_ANGLE_DEG must lie in (0, 90]")
    if not -1024 <= fill_hu <= 3071:
        raise ConfigError("OMLINE_FILL_HU must lie in [-1024, 3071]")
    if not 0.0 < iou_threshold <= 1.0:
        raise ConfigError("OMLINE_IOU_THRESHOLD must lie in (0, 1]")
    if log_level not in LOG_LEVELS:
        raise ConfigError(f"OMLINE_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}")

    return Settings(
        threads=threads,
        min_confidence=min_confidence,
        max_angle_deg=max_angle_deg,
        fill_hu=fill_hu,
        iou_threshold=iou_threshold,
        log_level=log_level,
    )


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
