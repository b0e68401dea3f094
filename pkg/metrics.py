#!/usr/bin/env python3
"""
Evaluation Metrics
Detection AP/mAP and threshold curves, model efficiency indexes, volume similarity and
observer-score statistics
"""

import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from detections import DetectionRecord, GroundTruthBox, LandmarkClass, Rect
from errors import AllZeroDifferences, DimensionMismatch, InputFormatError
from io_utils import atomic_path
from volume import Volume

logger = logging.getLogger(__name__)

CURVE_THRESHOLDS = np.arange(1, 100) / 100.0
HU_SPAN = 4095.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EXACT_WILCOXON_MAX_N = 25
PUBLISHED_TOLERANCE = 1e-4
REPORTED_MEAN_TOLERANCE = 0.05


def iou(a: Rect, b: Rect) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) rectangles"""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def _rank_and_match(
    preds: Iterable[DetectionRecord], gts: Iterable[GroundTruthBox],
    landmark: LandmarkClass, iou_threshold: float,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Sort the class's predictions by descending confidence and match them greedily.

    Each prediction takes the highest-IoU still-unmatched ground truth of the same
    case, slice and class when that IoU reaches the threshold. Returns the ranked
    confidences, the ranked true-positive flags and the ground-truth count.
    """
    ranked = sorted(
        (p for p in preds if p.landmark == landmark),
        key=lambda p: (-p.confidence, p.case_id, p.slice_index, p.cx, p.cy),
    )
    pools: Dict[Tuple[str, int], List[GroundTruthBox]] = defaultdict(list)
    n_gt = 0
    for g in gts:
        if g.landmark == landmark:
            pools[(g.case_id, g.slice_index)].append(g)
            n_gt += 1
    matched = set()
    is_tp = np.zeros(len(ranked), dtype=bool)
    for n, p in enumerate(ranked):
        rect = p.to_rect()
        best, best_iou = None, iou_threshold
        for g in pools.get((p.case_id, p.slice_index), ()):
            if id(g) in matched:
                continue
            overlap = iou(rect, g.to_rect())
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = g, overlap
        if best is not None:
            matched.add(id(best))
            is_tp[n] = True
    confidences = np.array([p.confidence for p in ranked], dtype=np.float64)
    return confidences, is_tp, n_gt


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under the precision envelope"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(
    preds: Sequence[DetectionRecord], gts: Sequence[GroundTruthBox],
    landmark: LandmarkClass, iou_threshold: float = 0.5,
) -> float:
    _, is_tp, n_gt = _rank_and_match(preds, gts, landmark, iou_threshold)
    if n_gt == 0 or len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    return _envelope_area(tp / n_gt, tp / (tp + fp))


def pr_f1_curves(
    preds: Sequence[DetectionRecord], gts: Sequence[GroundTruthBox],
    landmark: LandmarkClass, iou_threshold: float = 0.5,
    thresholds: Optional[Sequence[float]] = None,
) -> pd.DataFrame:
    """
    Precision, recall and F1 at every score threshold (0.01 to 0.99 by default).

    Matching happens in confidence order, so the kept set at a threshold is a prefix
    of the ranked list and its matches are the prefix's matches.
    """
    thresholds = CURVE_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    confidences, is_tp, n_gt = _rank_and_match(preds, gts, landmark, iou_threshold)
    tp_cum = np.concatenate(([0], np.cumsum(is_tp)))
    rows = []
    for t in thresholds:
        kept = int(np.count_nonzero(confidences >= t))
        tp = int(tp_cum[kept])
        fp = kept - tp
        precision = tp / kept if kept else 1.0
        recall = tp / n_gt if n_gt else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        rows.append({
            "threshold": float(t), "precision": precision, "recall": recall, "f1": f1,
            "tp": tp, "fp": fp, "fn": n_gt - tp,
        })
    return pd.DataFrame(rows, columns=["threshold", "precision", "recall", "f1", "tp", "fp", "fn"])


@dataclass
class EvalReport:
    per_class_ap: Dict[LandmarkClass, float]
    map: float
    curves: Dict[LandmarkClass, pd.DataFrame]
    iou_threshold: float = 0.5
    score_threshold: float = 0.5
    at_score_threshold: Dict[LandmarkClass, Dict[str, float]] = field(default_factory=dict)
    best_f1: Dict[LandmarkClass, Dict[str, float]] = field(default_factory=dict)


def mean_average_precision(
    preds: Sequence[DetectionRecord], gts: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5, score_threshold: float = 0.5,
) -> EvalReport:
    preds, gts = list(preds), list(gts)
    per_class = {}
    curves = {}
    at_threshold = {}
    best = {}
    for landmark in LandmarkClass:
        per_class[landmark] = average_precision(preds, gts, landmark, iou_threshold)
        curves[landmark] = pr_f1_curves(preds, gts, landmark, iou_threshold)
        point = pr_f1_curves(preds, gts, landmark, iou_threshold, thresholds=[score_threshold]).iloc[0]
        at_threshold[landmark] = {k: float(point[k]) for k in ("precision", "recall", "f1")}
        top = curves[landmark].loc[curves[landmark]["f1"].idxmax()]
        best[landmark] = {"threshold": float(top["threshold"]), "f1": float(top["f1"])}
        logger.info("AP[%s] = %.4f", landmark.value, per_class[landmark])
    map_value = sum(per_class.values()) / len(per_class)
    return EvalReport(per_class, map_value, curves, iou_threshold, score_threshold, at_threshold, best)


def report_to_dict(report: EvalReport) -> Dict:
    return {
        "iou_threshold": report.iou_threshold,
        "score_threshold": report.score_threshold,
        "map": report.map,
        "per_class_ap": {k.value: v for k, v in report.per_class_ap.items()},
        "at_score_threshold": {k.value: v for k, v in report.at_score_threshold.items()},
        "best_f1": {k.value: v for k, v in report.best_f1.items()},
    }


def write_curves_csv(report: EvalReport, out_dir: str) -> List[str]:
    paths = []
    for landmark, curve in report.curves.items():
        path = os.path.join(out_dir, f"curves_{landmark.value}.csv")
        with atomic_path(path) as tmp:
            curve[["threshold", "precision", "recall", "f1"]].to_csv(
                tmp, index=False, float_format="%.6f", lineterminator="\n"
            )
        paths.append(path)
    return paths


@dataclass(frozen=True)
class ModelInfo:
    name: str
    map: float
    gflops: float
    params_millions: float
    published_pei: Optional[float] = None
    published_cpei: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.map <= 1.0:
            raise InputFormatError(f"{self.name}: map must lie in [0, 1], got {self.map}")
        if not (self.gflops > 0 and self.params_millions > 0):
            raise InputFormatError(f"{self.name}: gflops and params_millions must be > 0")


def pei(m: ModelInfo) -> float:
    """mAP per million parameters"""
    return m.map / m.params_millions


def cpei(m: ModelInfo) -> float:
    """mAP per GFLOP of inference compute"""
    return m.map / m.gflops


def _read_csv(path: str, required: Sequence[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, comment="#", skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputFormatError(f"{path}: {exc}")
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InputFormatError(f"{path}: missing column(s) {', '.join(missing)}")
    return df


def _optional_float(value) -> Optional[float]:
    return None if pd.isna(value) else float(value)


def read_model_info(path: str) -> List[ModelInfo]:
    df = _read_csv(path, ("name", "map", "gflops", "params_millions"))
    models = []
    for row in df.to_dict("records"):
        try:
            models.append(ModelInfo(
                name=str(row["name"]),
                map=float(row["map"]),
                gflops=float(row["gflops"]),
                params_millions=float(row["params_millions"]),
                published_pei=_optional_float(row.get("published_pei", float("nan"))),
                published_cpei=_optional_float(row.get("published_cpei", float("nan"))),
            ))
        except (TypeError, ValueError) as exc:
            raise InputFormatError(f"{path}: bad model row {row}: {exc}")
    return models


def _printed_as(value: float, m: ModelInfo) -> str:
    hits = []
    if m.published_pei is not None and abs(value - m.published_pei) <= PUBLISHED_TOLERANCE:
        hits.append("PEI")
    if m.published_cpei is not None and abs(value - m.published_cpei) <= PUBLISHED_TOLERANCE:
        hits.append("CPEI")
    return "/".join(hits) if hits else "-"


def efficiency_table(models: Sequence[ModelInfo]) -> pd.DataFrame:
    """
    Efficiency indexes per model, in input order.

    When published index values are supplied, `pei_printed_as` / `cpei_printed_as`
    name the published column each computed index agrees with (to 4 decimals).
    """
    rows = []
    has_published = any(m.published_pei is not None or m.published_cpei is not None for m in models)
    for m in models:
        row = {
            "name": m.name, "map": m.map, "gflops": m.gflops, "params_millions": m.params_millions,
            "pei": pei(m), "cpei": cpei(m),
        }
        if has_published:
            row.update({
                "published_pei": m.published_pei, "published_cpei": m.published_cpei,
                "pei_printed_as": _printed_as(row["pei"], m),
                "cpei_printed_as": _printed_as(row["cpei"], m),
            })
        rows.append(row)
    return pd.DataFrame(rows)


def columns_swapped(table: pd.DataFrame) -> bool:
    """True when every model's computed PEI was published as CPEI and vice versa"""
    if "pei_printed_as" not in table.columns or table.empty:
        return False
    return bool(((table["pei_printed_as"] == "CPEI") & (table["cpei_printed_as"] == "PEI")).all())


def _slice_ssim(a: np.ndarray, b: np.ndarray) -> float:
    c1 = (SSIM_K1 * HU_SPAN) ** 2
    c2 = (SSIM_K2 * HU_SPAN) ** 2
    win = (min(SSIM_WINDOW, a.shape[0]), min(SSIM_WINDOW, a.shape[1]))
    wa = sliding_window_view(a, win)
    wb = sliding_window_view(b, win)
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(ssim.mean())


@dataclass(frozen=True)
class SimilarityReport:
    mse: float
    psnr: float
    mean_ssim: float


def volume_similarity(a: Volume, b: Volume) -> SimilarityReport:
    """MSE, PSNR (peak 4095 HU, infinite for identical volumes) and slice-averaged SSIM"""
    if a.geometry.dims != b.geometry.dims:
        raise DimensionMismatch(f"dims differ: {a.geometry.dims} vs {b.geometry.dims}")
    x = a.voxels.astype(np.float64)
    y = b.voxels.astype(np.float64)
    mse = float(np.mean((x - y) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(HU_SPAN ** 2 / mse)
    mean_ssim = float(np.mean([_slice_ssim(x[k], y[k]) for k in range(x.shape[0])]))
    return SimilarityReport(mse, psnr, mean_ssim)


def mask_overlap(a: Volume, b: Volume, threshold_hu: float) -> Tuple[float, float]:
    """Dice and Jaccard of the {value >= threshold} masks; two empty masks agree fully"""
    if a.geometry.dims != b.geometry.dims:
        raise DimensionMismatch(f"dims differ: {a.geometry.dims} vs {b.geometry.dims}")
    ma = a.voxels >= threshold_hu
    mb = b.voxels >= threshold_hu
    inter = int(np.count_nonzero(ma & mb))
    total = int(np.count_nonzero(ma)) + int(np.count_nonzero(mb))
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / (total - inter)


@dataclass(frozen=True)
class ScoreTable:
    observer: str
    counts: Tuple[int, int, int, int, int]
    reconstruction: Optional[str] = None
    reported_mean: Optional[float] = None

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != 5 or any(c < 0 for c in counts) or sum(counts) == 0:
            raise InputFormatError(f"{self.observer}: need five non-negative counts with a positive total")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class ScoreSummary:
    mean: float
    sd: float
    viable_fraction: float
    viable_count: int
    total: int
    reported_mean: Optional[float] = None

    @property
    def diverges_from_reported(self) -> bool:
        return self.reported_mean is not None and abs(self.mean - self.reported_mean) > REPORTED_MEAN_TOLERANCE


def score_summary(t: ScoreTable) -> ScoreSummary:
    """Mean, population SD and clinically viable share (scores of 3 or higher)"""
    scores = np.repeat(np.arange(1, 6), t.counts)
    viable = sum(t.counts[2:])
    summary = ScoreSummary(
        mean=float(scores.mean()),
        sd=float(scores.std(ddof=0)),
        viable_fraction=viable / t.total,
        viable_count=viable,
        total=t.total,
        reported_mean=t.reported_mean,
    )
    if summary.diverges_from_reported:
        logger.warning(
            "%s: count-derived mean %.2f differs from reported %.2f",
            t.observer, summary.mean, t.reported_mean,
        )
    return summary


def read_score_tables(path: str) -> List[ScoreTable]:
    df = _read_csv(path, ("observer", "c1", "c2", "c3", "c4", "c5"))
    tables = []
    for row in df.to_dict("records"):
        reconstruction = row.get("reconstruction")
        tables.append(ScoreTable(
            observer=str(row["observer"]),
            counts=tuple(row[f"c{k}"] for k in range(1, 6)),
            reconstruction=None if pd.isna(reconstruction) else str(reconstruction),
            reported_mean=_optional_float(row.get("reported_mean", float("nan"))),
        ))
    return tables


def read_paired_scores(path: str, x_col: str = "x", y_col: str = "y") -> Tuple[np.ndarray, np.ndarray]:
    df = _read_csv(path, (x_col, y_col))
    if df[[x_col, y_col]].isna().any().any():
        raise InputFormatError(f"{path}: paired scores must not have gaps")
    return df[x_col].to_numpy(dtype=np.float64), df[y_col].to_numpy(dtype=np.float64)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


def _exact_lower_tail(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(T+ <= W) under the sign-flip null, counting all 2^n assignments by DP"""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return float(counts[:w2 + 1].sum() / 2.0 ** len(doubled_ranks))


def wilcoxon_signed_rank(
    x: Sequence[float], y: Sequence[float], method: str = "auto"
) -> WilcoxonResult:
    """Two-sided signed-rank test on paired samples; zero differences are dropped"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) == 0:
        raise InputFormatError("paired samples need equal, non-zero lengths")
    if method not in ("auto", "exact", "approx"):
        raise InputFormatError(f"unknown method {method!r}")

    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise AllZeroDifferences("every pair is equal; the signed-rank test is undefined")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if method == "exact" or (method == "auto" and n <= EXACT_WILCOXON_MAX_N):
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = min(1.0, 2.0 * _exact_lower_tail(doubled, int(round(2 * w))))
        return WilcoxonResult(w, p, n, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var <= 0:
        return WilcoxonResult(w, 1.0, n, "approx")
    z = min(0.0, (w - mean + 0.5) / math.sqrt(var))
    p = min(1.0, 2.0 * float(stats.norm.cdf(z)))
    return WilcoxonResult(w, p, n, "approx")
