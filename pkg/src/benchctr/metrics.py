"""Evaluation metrics for click prediction, from confusion counts up to
baseline-relative scores.

All functions are pure and take a :class:`~benchctr.data.PredictionSet`.
Metric names used as report keys match the usual table headers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .data import PredictionSet

LOGLOSS_CLAMP = 1e-7
KLD_FLOOR = 1e-12
FIELD_EPSILON = 1e-6

CONFUSION_FAMILY = ("AUC-ROC", "AUC-PR", "Precision", "Recall", "Accuracy", "MCC", "F1")
PROBABILITY_FAMILY = ("Logloss", "MSE", "RMSE", "1-COPC")

# True: higher is better; False: lower is better. 1-COPC is |1 - COPC|.
DIRECTION = {
    "AUC-ROC": True, "AUC-PR": True, "Precision": True, "Recall": True, "Accuracy": True,
    "MCC": True, "F1": True, "FPR": False, "Logloss": False, "MSE": False, "RMSE": False,
    "1-COPC": False, "KLD": False, "Field-ECE": False, "Field-RCE": False, "RIG": True,
    "RelaImpr": True,
}
REPORT_ORDER = (
    "AUC-ROC", "AUC-PR", "Precision", "Recall", "Accuracy", "MCC", "F1", "FPR",
    "Logloss", "MSE", "RMSE", "COPC", "1-COPC", "KLD", "Field-ECE", "Field-RCE", "RIG", "RelaImpr",
)


class MetricError(ValueError):
    """A metric is undefined for the given predictions."""


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    TN: int
    FN: int
    threshold: float = 0.5

    @property
    def N(self) -> int:
        return self.TP + self.FP + self.TN + self.FN


def confusion_counts(preds: PredictionSet, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize with strict ``p > threshold`` and count."""
    if preds.N == 0:
        raise MetricError("empty predictions")
    pos_pred = preds.p > threshold
    pos = preds.y == 1
    tp = int(np.sum(pos_pred & pos))
    fp = int(np.sum(pos_pred & ~pos))
    fn = int(np.sum(~pos_pred & pos))
    return ConfusionCounts(tp, fp, preds.N - tp - fp - fn, fn, threshold)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion_metrics(c: ConfusionCounts) -> dict[str, float]:
    """Precision, recall, accuracy, MCC, F1 and FPR.

    Zero denominators yield 0.0 (so an MCC with an empty row or column is 0).
    """
    precision = _ratio(c.TP, c.TP + c.FP)
    recall = _ratio(c.TP, c.TP + c.FN)
    accuracy = _ratio(c.TP + c.TN, c.N)
    f1 = _ratio(2 * precision * recall, precision + recall)
    den = (c.TP + c.FP) * (c.TP + c.FN) * (c.TN + c.FP) * (c.TN + c.FN)
    mcc = (c.TP * c.TN - c.FP * c.FN) / math.sqrt(den) if den else 0.0
    fpr = _ratio(c.FP, c.FP + c.TN)
    return {"Precision": precision, "Recall": recall, "Accuracy": accuracy,
            "MCC": mcc, "F1": f1, "FPR": fpr}


def auc_roc(preds: PredictionSet) -> float:
    """Mann-Whitney form: share of (positive, negative) pairs ranked correctly, ties count 1/2."""
    pos = preds.y == 1
    n_pos = int(pos.sum())
    n_neg = preds.N - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: predictions contain a single class")
    ranks = rankdata(preds.p, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(preds: PredictionSet) -> float:
    """Average precision over a descending-score sweep; tied scores enter as one block."""
    n_pos = int(preds.y.sum())
    if n_pos == 0:
        raise MetricError("AUC-PR undefined: no positive labels")
    order = np.argsort(-preds.p, kind="stable")
    p, y = preds.p[order], preds.y[order]
    # last index of every block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(p) != 0), len(p) - 1]
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    precision = tp / seen
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def probability_metrics(preds: PredictionSet) -> dict[str, float]:
    """Logloss, MSE, RMSE, COPC and |1 - COPC|.

    COPC is NaN when the predicted probabilities sum to zero; call
    :func:`copc` directly to get an exception instead.
    """
    if preds.N == 0:
        raise MetricError("empty predictions")
    y, p = preds.y, preds.p
    pc = np.clip(p, LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)
    logloss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1.0 - pc))
    mse = np.mean((y - p) ** 2)
    try:
        c = copc(preds)
    except MetricError:
        c = math.nan
    return {"Logloss": float(logloss), "MSE": float(mse), "RMSE": math.sqrt(mse),
            "COPC": c, "1-COPC": abs(1.0 - c)}


def copc(preds: PredictionSet) -> float:
    total_p = float(preds.p.sum())
    if total_p <= 0:
        raise MetricError("COPC undefined: predicted probabilities sum to 0")
    return float(preds.y.sum()) / total_p


def kld(preds: PredictionSet) -> float:
    """KL divergence between the normalized label and prediction vectors."""
    sy, sp = float(preds.y.sum()), float(preds.p.sum())
    if sy == 0 or sp == 0:
        raise MetricError("KLD undefined: labels or predictions sum to 0")
    yn = preds.y / sy
    pn = np.maximum(preds.p / sp, KLD_FLOOR)
    nz = yn > 0
    return float(np.sum(yn[nz] * np.log(yn[nz] / pn[nz])))


def field_calibration(preds: PredictionSet, epsilon: float = FIELD_EPSILON) -> dict[str, float]:
    """Field-ECE and Field-RCE over the segments given by ``preds.z``."""
    if preds.z is None:
        raise MetricError("field calibration needs segment ids")
    _, seg = np.unique(preds.z, return_inverse=True)
    err = np.abs(np.bincount(seg, weights=preds.y - preds.p))
    n_z = np.bincount(seg)
    actual = np.bincount(seg, weights=preds.y + epsilon)
    n = preds.N
    return {"Field-ECE": float(err.sum() / n), "Field-RCE": float(np.sum(n_z * err / actual) / n)}


@dataclass
class MetricReport:
    values: dict[str, float]
    provenance: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_dict(self) -> dict:
        out = {k: self.values[k] for k in REPORT_ORDER if k in self.values}
        out.update({k: v for k, v in self.values.items() if k not in out})
        return {"metrics": out, "provenance": dict(self.provenance)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls(dict(d["metrics"]), dict(d.get("provenance", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def relative_metrics(model: MetricReport, baseline: MetricReport) -> dict[str, float]:
    base_ll, base_auc = baseline["Logloss"], baseline["AUC-ROC"]
    if base_ll == 0:
        raise MetricError("RIG undefined: baseline Logloss is 0")
    if base_auc == 0.5:
        raise MetricError("RelaImpr undefined: baseline AUC-ROC is 0.5")
    return {"RIG": 1.0 - model["Logloss"] / base_ll,
            "RelaImpr": (model["AUC-ROC"] - 0.5) / (base_auc - 0.5) - 1.0}


def compute_report(preds: PredictionSet, threshold: float = 0.5, baseline: MetricReport | None = None,
                   provenance: Mapping | None = None) -> MetricReport:
    """Every metric that is defined for ``preds``; undefined ones are omitted."""
    values: dict[str, float] = {}
    for name, fn in (("AUC-ROC", auc_roc), ("AUC-PR", auc_pr), ("KLD", kld)):
        try:
            values[name] = fn(preds)
        except MetricError:
            pass
    values.update(confusion_metrics(confusion_counts(preds, threshold)))
    values.update(probability_metrics(preds))
    if math.isnan(values["COPC"]):
        del values["COPC"], values["1-COPC"]
    if preds.z is not None:
        values.update(field_calibration(preds))
    report = MetricReport(values, dict(provenance or {}))
    if baseline is not None and "AUC-ROC" in values:
        try:
            values.update(relative_metrics(report, baseline))
        except MetricError:
            pass
    report.provenance.setdefault("threshold", threshold)
    report.provenance.setdefault("logloss_clamp", LOGLOSS_CLAMP)
    return report
