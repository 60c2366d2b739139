"""Score standardization, fusion, AUROC, and report assembly.

The two raw anomaly scores (reconstruction MSE and multi-mask histogram
error) live on unrelated scales; each is standardized against statistics
from a normal-only calibration set and the standardized scores are summed.
AUROC is the Mann-Whitney rank statistic with ties credited 0.5, which an
O(n^2) pairwise oracle reproduces exactly in the tests.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

# published results, kept as documentation columns in reports
TABLE2_REFERENCE = {
    "hvq_only": {"sa": 91.2, "la": 76.7, "avg": 84.0},
    "lavit_only": {"sa": 68.7, "la": 79.3, "avg": 74.0},
    "fused": {"sa": 90.3, "la": 83.1, "avg": 86.7},
}
TABLE3_REFERENCE = {
    "pixels": {"sa": 91.1, "la": 74.8, "avg": 83.0},
    "features": {"sa": 88.9, "la": 83.4, "avg": 86.1},
    "codes": {"sa": 90.7, "la": 78.0, "avg": 84.3},
    "histogram": {"sa": 90.3, "la": 83.1, "avg": 86.7},
}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreStats:
    hvq_mean: float
    hvq_std: float
    lavit_mean: float
    lavit_std: float

    def to_dict(self):
        return {"hvq_mean": self.hvq_mean, "hvq_std": self.hvq_std,
                "lavit_mean": self.lavit_mean, "lavit_std": self.lavit_std}


def calibrate(hvq_scores, lavit_scores) -> ScoreStats:
    """Mean and sample (n-1) std of each score channel over normal images."""
    hvq_scores = np.asarray(hvq_scores, dtype=np.float64)
    lavit_scores = np.asarray(lavit_scores, dtype=np.float64)
    if hvq_scores.size < 2 or lavit_scores.size < 2:
        raise CalibrationError("calibration needs at least 2 images")
    stats = ScoreStats(float(hvq_scores.mean()), float(hvq_scores.std(ddof=1)),
                       float(lavit_scores.mean()), float(lavit_scores.std(ddof=1)))
    if stats.hvq_std <= 0 or stats.lavit_std <= 0:
        raise CalibrationError("zero variance in calibration scores")
    return stats


def fuse(hvq_score, lavit_score, stats: ScoreStats):
    """Sum of the two standardized scores (vectorized over arrays)."""
    s1 = (np.asarray(hvq_score, dtype=np.float64) - stats.hvq_mean) / stats.hvq_std
    s2 = (np.asarray(lavit_score, dtype=np.float64) - stats.lavit_mean) / stats.lavit_std
    return s1 + s2


def auroc(labels, scores) -> float:
    """Mann-Whitney AUROC; labels are 0 (normal) / 1 (anomalous)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = sps.rankdata(scores)  # average ranks on ties -> 0.5 credit per tie
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def best_f1_threshold(labels, scores):
    """Report-only operating point: threshold maximizing F1 (anomalous = positive)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    best = (0.0, float(scores.min()))
    for t in np.unique(scores):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        fn = int((~pred & (labels == 1)).sum())
        denom = 2 * tp + fp + fn
        f1 = 0.0 if denom == 0 else 2 * tp / denom
        if f1 > best[0]:
            best = (f1, float(t))
    return {"f1": best[0], "threshold": best[1]}


def auroc_breakdown(records):
    """SA / LA / average AUROC per score channel.

    `records` is a list of dicts with keys label, s_hvq, s_lavit, s_fused.
    Each anomaly class is scored against the normal test images.
    """
    out = {}
    for name, key in (("hvq_only", "s_hvq"), ("lavit_only", "s_lavit"),
                      ("fused", "s_fused")):
        per = {}
        for short, label in (("sa", "structural"), ("la", "logical")):
            rows = [r for r in records if r["label"] in ("normal", label)]
            y = [1 if r["label"] == label else 0 for r in rows]
            per[short] = auroc(y, [r[key] for r in rows])
        per["avg"] = (per["sa"] + per["la"]) / 2.0
        out[name] = per
    return out


def build_report(records, config_dict, stats: ScoreStats, out_dir,
                 ablation=None, diagnostics=None):
    """Write report.json and scores.csv; returns the report dict."""
    breakdown = auroc_breakdown(records)
    labels01 = [0 if r["label"] == "normal" else 1 for r in records]
    fused = [r["s_fused"] for r in records]
    report = {
        "config": config_dict,
        "calibration": stats.to_dict(),
        "auroc": breakdown,
        "reference_mvtecloco_table2": TABLE2_REFERENCE,
        "reference_mvtecloco_table3": TABLE3_REFERENCE,
        "best_f1": best_f1_threshold(labels01, fused),
        "n_images": len(records),
    }
    if ablation is not None:
        report["ablation"] = ablation
    if diagnostics is not None:
        report["diagnostics"] = diagnostics

    os.makedirs(out_dir, exist_ok=True)
    tmp = os.path.join(out_dir, "report.json.tmp")
    with open(tmp, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(out_dir, "report.json"))

    tmp = os.path.join(out_dir, "scores.csv.tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "label", "kind", "s_hvq", "s_lavit", "s_fused"])
        for r in records:
            writer.writerow([r["id"], r["label"], r["kind"],
                             repr(r["s_hvq"]), repr(r["s_lavit"]), repr(r["s_fused"])])
    os.replace(tmp, os.path.join(out_dir, "scores.csv"))
    return report
