"""Overlap metrics on the 0-100 scale and fold-level aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Volume

METRIC_NAMES = ("dsc", "jaccard", "recall", "precision")


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    dsc: float
    jaccard: float
    recall: float
    precision: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _as_binary(vol) -> np.ndarray:
    if isinstance(vol, Volume):
        if vol.dtype != "uint8-label":
            raise ValueError(f"expected a uint8-label volume, got {vol.dtype!r}")
        return vol.data
    arr = np.asarray(vol)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must lie in {0, 1}")
    return arr.astype(np.uint8)


def confusion_counts(pred, gt) -> tuple[int, int, int, int]:
    """Voxelwise (TP, FP, FN, TN) between two hard masks."""
    p = _as_binary(pred)
    g = _as_binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g.astype(bool)))
    fn = int(np.count_nonzero(~p.astype(bool) & g))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def _ratio(num: float, den: float) -> float:
    # empty denominators score 100 by convention (vacuously perfect)
    return 100.0 if den == 0 else 100.0 * num / den


def score_case(pred, gt, case_id: str = "case") -> CaseScore:
    """Dice, Jaccard, Recall, and Precision as scores in [0, 100]."""
    tp, fp, fn, _ = confusion_counts(pred, gt)
    return CaseScore(
        case_id=case_id,
        dsc=_ratio(2 * tp, 2 * tp + fp + fn),
        jaccard=_ratio(tp, tp + fp + fn),
        recall=_ratio(tp, tp + fn),
        precision=_ratio(tp, tp + fp),
    )


def aggregate_fold(scores) -> tuple[dict, dict]:
    """Per-metric arithmetic mean and sample (n-1) standard deviation."""
    scores = list(scores)
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    means, stds = {}, {}
    for name in METRIC_NAMES:
        values = np.array([getattr(s, name) for s in scores], dtype=np.float64)
        means[name] = float(values.mean())
        stds[name] = 0.0 if values.size == 1 else float(values.std(ddof=1))
    return means, stds


def write_score_csv(path, scores) -> Path:
    """Per-case rows plus mean/std footer, two decimals as reported."""
    scores = list(scores)
    means, stds = aggregate_fold(scores)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", *METRIC_NAMES])
        for s in scores:
            writer.writerow([s.case_id] + [f"{getattr(s, n):.2f}" for n in METRIC_NAMES])
        writer.writerow(["mean"] + [f"{means[n]:.2f}" for n in METRIC_NAMES])
        writer.writerow(["std"] + [f"{stds[n]:.2f}" for n in METRIC_NAMES])
    return path
