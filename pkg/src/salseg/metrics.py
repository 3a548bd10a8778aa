"""Saliency evaluation: adaptive-threshold F-measure (beta^2 = 0.3), MAE and
PR curves over the 0..255 threshold grid.

Zero-denominator conventions, used consistently here and in the test oracles:
precision is 1 when nothing is predicted positive, recall is 1 when the
ground truth has no positives, and F is 0 when precision and recall are both
zero.  Binarization is strict ">", so threshold 255 on an 8-bit map predicts
nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA_SQ = 0.3


@dataclass
class EvalReport:
    t_adp: float
    precision: float
    recall: float
    f_beta: float
    mae: float

    def to_dict(self):
        return {"t_adp": self.t_adp, "precision": self.precision,
                "recall": self.recall, "f_beta": self.f_beta, "mae": self.mae}


@dataclass
class PRCurve:
    thresholds: np.ndarray  # 0..255
    precision: np.ndarray
    recall: np.ndarray


def _check_pair(s, g):
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g)
    if s.shape != g.shape:
        raise ValueError(f"map shape {s.shape} != ground truth shape {g.shape}")
    return s, g.astype(bool)


def adaptive_threshold(s) -> float:
    """Twice the mean saliency; not clipped, so a bright map can yield a
    threshold above 1 (empty prediction)."""
    return 2.0 * float(np.asarray(s, dtype=np.float64).mean())


def _prf(tp, fp, fn):
    pred = tp + fp
    pos = tp + fn
    precision = 1.0 if pred == 0 else tp / pred
    recall = 1.0 if pos == 0 else tp / pos
    if precision == 0.0 and recall == 0.0:
        return precision, recall, 0.0
    denom = BETA_SQ * precision + recall
    f = 0.0 if denom == 0 else (1 + BETA_SQ) * precision * recall / denom
    return precision, recall, f


def f_measure(s, g, threshold: float):
    """(precision, recall, F_beta) of the map binarized at ``threshold``
    (strictly greater)."""
    s, g = _check_pair(s, g)
    pred = s > threshold
    tp = float(np.count_nonzero(pred & g))
    fp = float(np.count_nonzero(pred & ~g))
    fn = float(np.count_nonzero(~pred & g))
    return _prf(tp, fp, fn)


def mae(s, g) -> float:
    s, g = _check_pair(s, g)
    return float(np.abs(s - g).mean())


def evaluate(s, g) -> EvalReport:
    t = adaptive_threshold(s)
    p, r, f = f_measure(s, g, t)
    return EvalReport(t_adp=t, precision=p, recall=r, f_beta=f, mae=mae(s, g))


def quantize_8bit(s) -> np.ndarray:
    return np.clip(np.rint(np.asarray(s, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def pr_curve(s_8bit, g) -> PRCurve:
    """All 256 (precision, recall) points in one histogram pass."""
    s = np.asarray(s_8bit)
    if s.dtype != np.uint8:
        raise ValueError("pr_curve expects an 8-bit map (use quantize_8bit)")
    g = np.asarray(g).astype(bool)
    if s.shape != g.shape:
        raise ValueError("map/ground-truth shape mismatch")
    pos_hist = np.bincount(s[g].reshape(-1), minlength=256).astype(np.float64)
    neg_hist = np.bincount(s[~g].reshape(-1), minlength=256).astype(np.float64)
    # predicted positive at threshold t: value > t, i.e. values t+1..255
    tp = np.cumsum(pos_hist[::-1])[::-1]  # tp_geq[v] = count of positives >= v
    fpv = np.cumsum(neg_hist[::-1])[::-1]
    tps = np.concatenate([tp[1:], [0.0]])   # strictly greater than t
    fps = np.concatenate([fpv[1:], [0.0]])
    n_pos = pos_hist.sum()
    precision = np.empty(256)
    recall = np.empty(256)
    for t in range(256):
        p, r, _ = _prf(tps[t], fps[t], n_pos - tps[t])
        precision[t] = p
        recall[t] = r
    return PRCurve(thresholds=np.arange(256), precision=precision, recall=recall)


def aggregate(reports) -> EvalReport:
    """Arithmetic mean of per-image reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")
    n = len(reports)
    return EvalReport(
        t_adp=sum(r.t_adp for r in reports) / n,
        precision=sum(r.precision for r in reports) / n,
        recall=sum(r.recall for r in reports) / n,
        f_beta=sum(r.f_beta for r in reports) / n,
        mae=sum(r.mae for r in reports) / n)
