"""Detection scoring: mutual-nearest matching, rates, and threshold sweeps.

A detection counts as true when it and a ground-truth pore pick each other as
mutual nearest neighbors: take the detection's nearest ground-truth pore,
then that pore's nearest detection; the detection is true iff it gets itself
back. Distances compare as exact integer squared Euclidean values, and
argmin breaks ties toward the lower index, so matching is fully deterministic.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .detector import DETECTION_WINDOW, local_maxima

DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.01, 0.99, 99), 10))


@dataclass
class MatchResult:
    true_mask: np.ndarray     # (n_detected,) bool
    matched_gt: np.ndarray    # (n_detected,) int64; gt index for true, -1 else
    n_detected: int
    n_gt: int

    @property
    def n_true(self) -> int:
        return int(self.true_mask.sum())

    @property
    def n_false(self) -> int:
        return self.n_detected - self.n_true


def match_pores(detected: np.ndarray, ground_truth: np.ndarray) -> MatchResult:
    detected = np.asarray(detected, dtype=np.int64).reshape(-1, 2)
    ground_truth = np.asarray(ground_truth, dtype=np.int64).reshape(-1, 2)
    n, m = len(detected), len(ground_truth)
    true_mask = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    if n and m:
        diff = detected[:, None, :] - ground_truth[None, :, :]
        dist_sq = (diff * diff).sum(axis=2)         # exact int64 squared distances
        nearest_gt = np.argmin(dist_sq, axis=1)     # each detection's closest pore
        nearest_det = np.argmin(dist_sq, axis=0)    # each pore's closest detection
        idx = np.arange(n)
        true_mask = nearest_det[nearest_gt] == idx
        matched[true_mask] = nearest_gt[true_mask]
    return MatchResult(true_mask, matched, n, m)


# ---------------------------------------------------------------------------
# rates and reports

def _prf(true: int, detected: int, gt: int) -> tuple[float, float, float]:
    precision = true / detected if detected else 1.0
    recall = true / gt if gt else 0.0
    f_score = (2 * precision * recall / (precision + recall)
               if precision + recall > 0 else 0.0)
    return precision, recall, f_score


@dataclass
class ImageEval:
    n_true: int
    n_detected: int
    n_gt: int


@dataclass
class DetectionReport:
    """Pooled (micro) and per-image-averaged (macro) detection rates.

    true_rate is the fraction of ground-truth pores recovered (recall) and
    false_rate the fraction of detections that are spurious (1 - precision).
    """

    n_images: int
    total_gt: int
    total_detected: int
    true_detections: int
    false_detections: int
    precision: float
    recall: float
    f_score: float
    true_rate: float
    false_rate: float
    macro_precision: float
    macro_recall: float
    macro_f_score: float
    per_image: list[ImageEval] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "n_images", "total_gt", "total_detected", "true_detections",
            "false_detections", "precision", "recall", "f_score",
            "true_rate", "false_rate", "macro_precision", "macro_recall",
            "macro_f_score")}
        return d


def make_report(per_image: list[ImageEval]) -> DetectionReport:
    true = sum(e.n_true for e in per_image)
    detected = sum(e.n_detected for e in per_image)
    gt = sum(e.n_gt for e in per_image)
    precision, recall, f_score = _prf(true, detected, gt)
    per_prf = [_prf(e.n_true, e.n_detected, e.n_gt) for e in per_image]
    macro = [float(np.mean([p[i] for p in per_prf])) if per_prf else 0.0
             for i in range(3)]
    return DetectionReport(
        n_images=len(per_image), total_gt=gt, total_detected=detected,
        true_detections=true, false_detections=detected - true,
        precision=precision, recall=recall, f_score=f_score,
        true_rate=recall, false_rate=1.0 - precision,
        macro_precision=macro[0], macro_recall=macro[1], macro_f_score=macro[2],
        per_image=list(per_image))


def evaluate_maps(maps: list[np.ndarray], ground_truths: list[np.ndarray],
                  threshold: float, window: int = DETECTION_WINDOW) -> DetectionReport:
    """Score precomputed pore maps against per-image ground truth."""
    if len(maps) != len(ground_truths):
        raise ValueError("need one ground-truth set per map")
    per_image = []
    for pore_map, gt in zip(maps, ground_truths):
        detected = local_maxima(pore_map, threshold, window)
        result = match_pores(detected, gt)
        per_image.append(ImageEval(result.n_true, result.n_detected, result.n_gt))
    return make_report(per_image)


# ---------------------------------------------------------------------------
# threshold sweeps

@dataclass
class RocCurve:
    thresholds: np.ndarray
    reports: list[DetectionReport]

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.ndim != 1 or len(self.thresholds) < 1:
            raise ValueError("thresholds must be a non-empty 1-D array")
        if not np.all(np.diff(self.thresholds) > 0):
            raise ValueError("thresholds must be strictly increasing")
        if len(self.reports) != len(self.thresholds):
            raise ValueError("need one report per threshold")

    @property
    def true_rates(self) -> np.ndarray:
        return np.array([r.true_rate for r in self.reports])

    @property
    def false_rates(self) -> np.ndarray:
        return np.array([r.false_rate for r in self.reports])

    @property
    def detected_counts(self) -> np.ndarray:
        return np.array([r.total_detected for r in self.reports])


def roc_sweep(maps: list[np.ndarray], ground_truths: list[np.ndarray],
              thresholds=DEFAULT_THRESHOLDS,
              window: int = DETECTION_WINDOW) -> RocCurve:
    """Evaluate the same maps at every threshold; maps are computed once by
    the caller, so the sweep only redoes maxima picking and matching."""
    reports = [evaluate_maps(maps, ground_truths, float(th), window)
               for th in np.asarray(thresholds, dtype=np.float64)]
    return RocCurve(np.asarray(thresholds, dtype=np.float64), reports)


def operating_point(curve: RocCurve, target_false_rate: float) -> tuple[float, DetectionReport]:
    """Threshold whose false rate lands closest to the target.

    Ties go to the higher true rate. A target outside the swept range picks
    the nearest endpoint and warns.
    """
    fr = curve.false_rates
    lo, hi = float(fr.min()), float(fr.max())
    if target_false_rate < lo or target_false_rate > hi:
        warnings.warn(f"target false rate {target_false_rate} outside swept "
                      f"range [{lo:.4f}, {hi:.4f}]; using nearest endpoint")
    gap = np.abs(fr - target_false_rate)
    best_gap = gap.min()
    candidates = np.flatnonzero(gap == best_gap)
    tr = curve.true_rates[candidates]
    pick = candidates[int(np.argmax(tr))]
    return float(curve.thresholds[pick]), curve.reports[pick]


# ---------------------------------------------------------------------------
# writers

def report_to_json(report: DetectionReport, path: str) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


ROC_CSV_HEADER = "threshold,true_rate,false_rate,detected,true,false,f_score"


def roc_to_csv(curve: RocCurve, path: str) -> None:
    with open(path, "w") as f:
        f.write(ROC_CSV_HEADER + "\n")
        for th, rep in zip(curve.thresholds, curve.reports):
            f.write(f"{th:.10g},{rep.true_rate:.8g},{rep.false_rate:.8g},"
                    f"{rep.total_detected},{rep.true_detections},"
                    f"{rep.false_detections},{rep.f_score:.8g}\n")
