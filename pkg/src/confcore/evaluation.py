"""Calibration, core aggregation with confidence rejection, and core/patch metrics."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .domain import CalibrationBin, CalibrationReport, CorePrediction

MIN_RETAINED_FRACTION = 0.6


@dataclass(frozen=True)
class PatchPrediction:
    prob_cancer: float
    confidence: float
    predicted_label: int
    core_id: str
    weak_label: int
    true_label: int | None = None
    is_ood: bool | None = None


@dataclass(frozen=True)
class CurvePoint:
    tau: float
    balanced_accuracy: float | None
    retained_cores: int
    total_cores: int


def ece(confidences, correct, n_bins: int = 10) -> tuple[float, CalibrationReport]:
    """Expected calibration error over equal-width bins ``((s-1)/S, s/S]``.

    A confidence of exactly 0 falls in the first bin.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("ECE of an empty prediction set is undefined")
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    # rounding keeps 0.3 * 10 = 3.0000000000000004 on its right-closed edge
    idx = np.clip(np.ceil(np.round(conf * n_bins, 9)).astype(int) - 1, 0, n_bins - 1)
    n = conf.size
    bins, total = [], 0.0
    for s in range(n_bins):
        sel = idx == s
        k = int(sel.sum())
        if k:
            c, a = float(conf[sel].mean()), float(hit[sel].mean())
            total += k / n * abs(a - c)
        else:
            c = a = None
        bins.append(CalibrationBin(s / n_bins, (s + 1) / n_bins, k, c, a))
    return total, CalibrationReport(tuple(bins), total, n)


def write_reliability_csv(report: CalibrationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "n", "conf", "acc"])
        for i, b in enumerate(report.bins, start=1):
            w.writerow([i, b.count, "" if b.confidence is None else repr(b.confidence),
                        "" if b.accuracy is None else repr(b.accuracy)])


def aggregate_core(patches: Sequence[PatchPrediction], tau: float, core_id: str | None = None) -> CorePrediction:
    """Average retained patch probabilities; too few survivors marks the core uncertain."""
    if not patches:
        raise ValueError("a core needs at least one patch prediction")
    core_id = core_id if core_id is not None else patches[0].core_id
    kept = [p.prob_cancer for p in patches if p.confidence >= tau]
    frac = len(kept) / len(patches)
    if frac < MIN_RETAINED_FRACTION:
        return CorePrediction(core_id, "uncertain", None, frac, tau)
    return CorePrediction(core_id, "predicted", float(np.mean(kept)), frac, tau)


def group_by_core(predictions: Iterable[PatchPrediction]) -> dict[str, list[PatchPrediction]]:
    groups: dict[str, list[PatchPrediction]] = defaultdict(list)
    for p in predictions:
        groups[p.core_id].append(p)
    return dict(groups)


def aggregate_cores(predictions: Iterable[PatchPrediction], tau: float) -> list[CorePrediction]:
    return [aggregate_core(ps, tau, cid) for cid, ps in group_by_core(predictions).items()]


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def balanced_accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted).astype(int)
    labels = np.asarray(labels).astype(int)
    if not ((labels == 0).any() and (labels == 1).any()):
        raise ValueError("balanced accuracy needs both classes")
    return float(np.mean([np.mean(predicted[labels == c] == c) for c in (0, 1)]))


def core_metrics(core_predictions: Sequence[CorePrediction], core_labels: dict[str, int]) -> dict:
    """AUC, sensitivity, specificity and balanced accuracy over non-rejected cores."""
    kept = [c for c in core_predictions if c.status == "predicted"]
    scores = np.array([c.score for c in kept])
    labels = np.array([core_labels[c.core_id] for c in kept], dtype=int)
    auc = roc_auc(scores, labels)
    pred = (scores > 0.5).astype(int)
    sens = float(np.mean(pred[labels == 1] == 1))
    spec = float(np.mean(pred[labels == 0] == 0))
    return {
        "auc": auc,
        "sensitivity": sens,
        "specificity": spec,
        "balanced_accuracy": (sens + spec) / 2,
        "n_cores": len(core_predictions),
        "rejected_cores": len(core_predictions) - len(kept),
    }


def patch_balanced_accuracy(predictions: Sequence[PatchPrediction], label_source: str = "weak") -> float:
    if label_source not in ("weak", "true"):
        raise ValueError("label_source must be 'weak' or 'true'")
    attr = "weak_label" if label_source == "weak" else "true_label"
    labels = [getattr(p, attr) for p in predictions]
    if any(v is None for v in labels):
        raise ValueError("oracle labels are missing")
    return balanced_accuracy([p.predicted_label for p in predictions], labels)


def accuracy_vs_confidence_curve(
    predictions: Sequence[PatchPrediction],
    tau_grid: Sequence[float],
    core_labels: dict[str, int],
) -> list[CurvePoint]:
    if len(tau_grid) == 0:
        raise ValueError("empty tau grid")
    groups = group_by_core(predictions)
    points = []
    for tau in tau_grid:
        cores = [aggregate_core(ps, tau, cid) for cid, ps in groups.items()]
        kept = [c for c in cores if c.status == "predicted"]
        labels = [core_labels[c.core_id] for c in kept]
        bacc = None
        if 0 in labels and 1 in labels:
            bacc = balanced_accuracy([c.predicted_label for c in kept], labels)
        points.append(CurvePoint(float(tau), bacc, len(kept), len(cores)))
    return points


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "balanced_accuracy", "retained_cores", "total_cores"])
        for p in points:
            w.writerow([repr(p.tau), "" if p.balanced_accuracy is None else repr(p.balanced_accuracy),
                        p.retained_cores, p.total_cores])


def read_curve_csv(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        return [
            CurvePoint(float(r["tau"]), float(r["balanced_accuracy"]) if r["balanced_accuracy"] else None,
                       int(r["retained_cores"]), int(r["total_cores"]))
            for r in csv.DictReader(fh)
        ]


def ood_auroc(uncertainty, is_ood) -> float:
    """AUROC of an uncertainty score as an OOD detector (OOD = positive)."""
    return roc_auc(uncertainty, np.asarray(is_ood).astype(int))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population std; a single value has std 0."""
    arr = np.asarray([v for v in values if v is not None and not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())
