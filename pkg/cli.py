#!/usr/bin/env python3
"""
omline Command Line
Detect -> identify -> rotate -> reconstruct pipeline plus evaluation and phantom tooling
"""

import argparse
import json
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from config import VERSION, LOG_LEVELS, Settings, configure_logging, load_settings
from detections import LandmarkClass, read_detection_records, read_detections, read_ground_truth, write_detections, write_ground_truth
from dicom_min import assemble_series, read_series
from errors import EXIT_OK, EXIT_USAGE, ConfigError, OmlineError, exit_code_for
from io_utils import atomic_write_text, staged_directory
from landmarks import LandmarkSet, identify_landmarks, write_landmark_report
from metrics import (
    columns_swapped, efficiency_table, mean_average_precision, read_model_info, read_paired_scores,
    read_score_tables, report_to_dict, score_summary, wilcoxon_signed_rank, write_curves_csv,
)
from orientation import EulerAngles, compute_angles, matrix_to_euler, plausibility_check, pose_matrix
from phantom import DetectorConfig, PhantomSpec, classical_detect, generate_phantom, write_phantom_truth
from reformat import extract_isosurface, standardize, write_mesh_obj
from volume import load_volume, read_geometry, save_volume

logger = logging.getLogger("omline")


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code of this tool instead of 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    case_id: str
    inputs: Dict[str, str]
    min_confidence: float
    index_space: bool
    angles_deg: Dict[str, float]
    applied_rotation_deg: Dict[str, float]
    warnings: List[str]
    outputs: Dict[str, str]
    threads: int
    tool_version: str = VERSION
    stage_seconds: Dict[str, float] = field(default_factory=dict)

    def write(self, path: str, staged_in: Optional[str] = None) -> None:
        """Outputs may still sit in the staging directory `staged_in` under their final names"""
        outputs = [
            os.path.join(staged_in, os.path.basename(p)) if staged_in else p for p in self.outputs.values()
        ]
        missing = [p for p in list(self.inputs.values()) + outputs if not os.path.exists(p)]
        if missing:
            raise OmlineError(f"manifest references missing path(s): {', '.join(missing)}")
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


@contextmanager
def _stage(timings: Dict[str, float], name: str):
    start = time.perf_counter()
    yield
    timings[name] = round(time.perf_counter() - start, 6)
    logger.info("stage %s: %.3f s", name, timings[name])


def _angle_dict(angles: EulerAngles) -> Dict[str, float]:
    roll, pitch, yaw = angles.degrees()
    return {"roll": roll, "pitch": pitch, "yaw": yaw}


def _measure(args, geometry):
    detections = read_detections(args.detections, case_id=args.case_id)
    landmarks = identify_landmarks(detections, geometry, args.min_confidence)
    angles = compute_angles(landmarks, index_space=args.index_space)
    warnings = plausibility_check(angles, args.max_angle_deg)
    return landmarks, angles, warnings


def _print_landmarks(landmarks: LandmarkSet, angles: EulerAngles, warnings: Sequence[str]) -> None:
    print(f"Case: {landmarks.case_id}")
    print("=" * 45)
    for p in landmarks.points:
        vx, vy, vz = p.voxel
        print(f"{p.landmark.value:<10} voxel=({vx:.2f}, {vy:.2f}, {vz:.0f})  confidence={p.confidence:.4f}")
    roll, pitch, yaw = angles.degrees()
    print(f"Angles (deg): roll={roll:.2f} pitch={pitch:.2f} yaw={yaw:.2f}")
    for w in warnings:
        print(f"warning: {w}")


def cmd_identify(args, settings: Settings) -> int:
    geometry = read_geometry(args.volume)
    landmarks, angles, warnings = _measure(args, geometry)
    _print_landmarks(landmarks, angles, warnings)
    if args.out:
        write_landmark_report(landmarks, angles, args.out, warnings, args.index_space)
    return EXIT_OK


def cmd_standardize(args, settings: Settings) -> int:
    timings: Dict[str, float] = {}
    with _stage(timings, "load"):
        volume = load_volume(args.volume)
    with _stage(timings, "identify"):
        landmarks, angles, warnings = _measure(args, volume.geometry)
    with _stage(timings, "rotate"):
        standardized = standardize(volume, angles, fill=args.fill_hu, threads=args.threads)
    mesh = None
    if args.iso is not None:
        with _stage(timings, "reconstruct"):
            mesh = extract_isosurface(standardized, args.iso)

    names = {"volume": "standardized.vol", "volume_raw": "standardized.raw", "landmarks": "landmarks.csv"}
    if mesh is not None:
        names["mesh"] = "standardized.obj"
    outputs = {key: os.path.join(args.out, name) for key, name in names.items()}

    # all outputs appear together or not at all
    with staged_directory(args.out) as staging:
        with _stage(timings, "write"):
            save_volume(standardized, os.path.join(staging, names["volume"]))
            write_landmark_report(
                landmarks, angles, os.path.join(staging, names["landmarks"]), warnings, args.index_space
            )
            if mesh is not None:
                write_mesh_obj(mesh, os.path.join(staging, names["mesh"]))

        manifest = RunManifest(
            case_id=landmarks.case_id,
            inputs={"volume": args.volume, "detections": args.detections},
            min_confidence=args.min_confidence,
            index_space=args.index_space,
            angles_deg=_angle_dict(angles),
            applied_rotation_deg=_angle_dict(matrix_to_euler(pose_matrix(angles).T)),
            warnings=list(warnings),
            outputs=outputs,
            threads=args.threads,
            stage_seconds=timings,
        )
        manifest.write(os.path.join(staging, "manifest.json"), staged_in=staging)

    _print_landmarks(landmarks, angles, warnings)
    print(f"Standardized volume: {outputs['volume']}")
    return EXIT_OK


def cmd_reconstruct(args, settings: Settings) -> int:
    mesh = extract_isosurface(load_volume(args.volume), args.iso)
    write_mesh_obj(mesh, args.out)
    print(f"Mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {args.out}")
    return EXIT_OK


def cmd_eval_det(args, settings: Settings) -> int:
    preds = read_detection_records(args.pred)
    gts = read_ground_truth(args.gt)
    report = mean_average_precision(preds, gts, args.iou, args.score_threshold)
    with staged_directory(args.out) as staging:
        atomic_write_text(
            os.path.join(staging, "report.json"), json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"
        )
        write_curves_csv(report, staging)

    print(f"Detection evaluation (IoU >= {args.iou:.2f})")
    print("=" * 45)
    for landmark in LandmarkClass:
        point = report.at_score_threshold[landmark]
        print(
            f"{landmark.value:<10} AP={report.per_class_ap[landmark]:.4f}  "
            f"P={point['precision']:.4f} R={point['recall']:.4f} F1={point['f1']:.4f} @ {args.score_threshold:.2f}"
        )
    print(f"mAP: {report.map:.4f}")
    return EXIT_OK


def cmd_eval_efficiency(args, settings: Settings) -> int:
    table = efficiency_table(read_model_info(args.models))
    print("Model efficiency (PEI = mAP / params in millions, CPEI = mAP / GFLOPS)")
    print("=" * 45)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if columns_swapped(table):
        print("note: the published PEI and CPEI columns are swapped relative to their definitions")
    return EXIT_OK


def cmd_eval_scores(args, settings: Settings) -> int:
    if not args.tables and not args.paired:
        raise ConfigError("eval scores needs a score table file and/or --paired")
    if args.tables:
        print("Observer scores")
        print("=" * 45)
        for table in read_score_tables(args.tables):
            s = score_summary(table)
            label = f"{table.observer} {table.reconstruction or ''}".strip()
            line = (
                f"{label:<28} mean={s.mean:.2f} sd={s.sd:.2f} "
                f"viable={s.viable_count}/{s.total} ({100 * s.viable_fraction:.1f}%)"
            )
            if s.reported_mean is not None:
                line += f" reported_mean={s.reported_mean:.2f}"
                if s.diverges_from_reported:
                    line += " [differs from count-derived mean]"
            print(line)
    if args.paired:
        x, y = read_paired_scores(args.paired, args.x_col, args.y_col)
        result = wilcoxon_signed_rank(x, y, method=args.method)
        print(f"Wilcoxon signed-rank: W={result.statistic:.1f} p={result.p_value:.6f} n={result.n} ({result.method})")
    return EXIT_OK


def cmd_phantom(args, settings: Settings) -> int:
    tilt = EulerAngles.from_degrees(args.roll, args.pitch, args.yaw)
    spec = PhantomSpec.default(size=args.size, spacing=args.spacing, tilt=tilt)
    volume, truth, boxes = generate_phantom(spec, threads=args.threads)
    with staged_directory(args.out) as staging:
        save_volume(volume, os.path.join(staging, "phantom.vol"))
        write_phantom_truth(truth, os.path.join(staging, "truth.csv"))
        write_ground_truth(boxes, os.path.join(staging, "ground_truth.csv"))
    print(f"Phantom {spec.dims} tilt=({args.roll:.2f}, {args.pitch:.2f}, {args.yaw:.2f}) deg -> {args.out}")
    return EXIT_OK


def cmd_detect_classic(args, settings: Settings) -> int:
    volume = load_volume(args.volume)
    config = DetectorConfig(eye_radius_mm=args.eye_radius_mm, eac_radius_mm=args.eac_radius_mm)
    case_id = args.case_id or os.path.splitext(os.path.basename(args.volume))[0]
    found = classical_detect(volume, config, case_id=case_id)
    write_detections(found, args.out)
    print(f"{len(found)} detection(s) -> {args.out}")
    return EXIT_OK


def cmd_dicom_import(args, settings: Settings) -> int:
    volume = assemble_series(read_series(args.dir))
    save_volume(volume, args.out)
    print(f"Volume {volume.geometry.dims} spacing {volume.geometry.spacing} -> {args.out}")
    return EXIT_OK


def _add_measure_flags(p: argparse.ArgumentParser, settings: Settings) -> None:
    p.add_argument("volume", help="volume header file")
    p.add_argument("detections", help="detection CSV file")
    p.add_argument("--case-id", default=None, help="case to select from a multi-case detection file")
    p.add_argument("--min-confidence", type=float, default=settings.min_confidence)
    p.add_argument("--index-space", action="store_true", help="measure angles on raw voxel indices")
    p.add_argument("--max-angle-deg", type=float, default=settings.max_angle_deg)


def build_parser(settings: Settings) -> argparse.ArgumentParser:
    parser = _Parser(prog="omline", description="Orbitomeatal-line standardization of head CT volumes")
    parser.add_argument("--version", action="version", version=f"omline {VERSION}")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=settings.log_level, type=str.upper)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("standardize", help="rotate a volume so the orbitomeatal line is axial")
    _add_measure_flags(p, settings)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=settings.threads)
    p.add_argument("--fill-hu", type=int, default=settings.fill_hu)
    p.add_argument("--iso", type=float, default=None, help="also write an isosurface mesh at this HU")
    p.set_defaults(handler=cmd_standardize)

    p = sub.add_parser("identify", help="print landmarks and head-pose angles")
    _add_measure_flags(p, settings)
    p.add_argument("--out", default=None, help="landmark report path")
    p.set_defaults(handler=cmd_identify)

    p = sub.add_parser("reconstruct", help="export an isosurface mesh as OBJ")
    p.add_argument("volume")
    p.add_argument("--iso", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("eval", help="evaluation commands")
    eval_sub = p.add_subparsers(dest="eval_command", parser_class=_Parser)
    eval_sub.required = True
    e = eval_sub.add_parser("det", help="AP/mAP and threshold curves")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--iou", type=float, default=settings.iou_threshold)
    e.add_argument("--score-threshold", type=float, default=0.5)
    e.set_defaults(handler=cmd_eval_det)
    e = eval_sub.add_parser("efficiency", help="PEI/CPEI table from a model-info CSV")
    e.add_argument("models")
    e.set_defaults(handler=cmd_eval_efficiency)
    e = eval_sub.add_parser("scores", help="observer score summaries and paired signed-rank test")
    e.add_argument("tables", nargs="?", default=None)
    e.add_argument("--paired", default=None)
    e.add_argument("--x-col", default="x")
    e.add_argument("--y-col", default="y")
    e.add_argument("--method", choices=("auto", "exact", "approx"), default="auto")
    e.set_defaults(handler=cmd_eval_scores)

    p = sub.add_parser("phantom", help="synthetic head phantom")
    phantom_sub = p.add_subparsers(dest="phantom_command", parser_class=_Parser)
    phantom_sub.required = True
    g = phantom_sub.add_parser("gen")
    g.add_argument("--out", required=True)
    g.add_argument("--roll", type=float, default=0.0)
    g.add_argument("--pitch", type=float, default=0.0)
    g.add_argument("--yaw", type=float, default=0.0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--spacing", type=float, default=1.0)
    g.add_argument("--threads", type=int, default=settings.threads)
    g.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("detect", help="classical landmark detector")
    p.add_argument("--classic", required=True, metavar="VOLUME", dest="volume")
    p.add_argument("--out", required=True)
    p.add_argument("--case-id", default=None)
    p.add_argument("--eye-radius-mm", type=float, default=DetectorConfig.eye_radius_mm)
    p.add_argument("--eac-radius-mm", type=float, default=DetectorConfig.eac_radius_mm)
    p.set_defaults(handler=cmd_detect_classic)

    p = sub.add_parser("dicom", help="DICOM series tools")
    dicom_sub = p.add_subparsers(dest="dicom_command", parser_class=_Parser)
    dicom_sub.required = True
    d = dicom_sub.add_parser("import")
    d.add_argument("--dir", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(handler=cmd_dicom_import)
    return parser


def _validate(args) -> None:
    if getattr(args, "threads", 1) < 1:
        raise ConfigError("--threads must be >= 1")
    if not 0.0 <= getattr(args, "min_confidence", 0.0) <= 1.0:
        raise ConfigError("--min-confidence must lie in [0, 1]")
    if hasattr(args, "iou") and not 0.0 < args.iou <= 1.0:
        raise ConfigError("--iou must lie in (0, 1]")
    if not math.isfinite(getattr(args, "iso", 0.0) or 0.0):
        raise ConfigError("--iso must be finite")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        settings = load_settings()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    configure_logging(args.log_level)
    try:
        _validate(args)
        return args.handler(args, settings)
    except (OmlineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
