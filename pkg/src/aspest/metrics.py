"""Selective-prediction metrics over (score, correct, selected) triples.

Points in the labeled set (``selected``) are excluded from every numerator
and denominator; only ``cov*`` divides by the full pool size.  Thresholds
use accept-if-``score >= tau`` semantics and are swept over every distinct
score of the unselected points plus both infinities.  At ``tau = +inf``
coverage is 0 and accuracy is defined as 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .exceptions import DegenerateFrameError, ShapeError, UndefinedMetricError

# Slack for ``acc >= t_a`` / ``cov >= t_c`` comparisons on ratios of counts.
TOL = 1e-12


@dataclass(frozen=True)
class EvalFrame:
    scores: np.ndarray
    correct: np.ndarray
    selected: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        correct = np.asarray(self.correct, dtype=bool).ravel()
        if self.selected is None:
            selected = np.zeros(scores.shape[0], dtype=bool)
        else:
            selected = np.asarray(self.selected, dtype=bool).ravel()
        if not (scores.shape == correct.shape == selected.shape):
            raise ShapeError(
                f"scores/correct/selected lengths differ: "
                f"{scores.shape[0]}, {correct.shape[0]}, {selected.shape[0]}")
        if np.isnan(scores).any():
            raise ShapeError("scores contain NaN")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "correct", correct)
        object.__setattr__(self, "selected", selected)

    @classmethod
    def from_predictions(cls, scores, predictions, labels, selected=None):
        correct = np.asarray(predictions) == np.asarray(labels)
        return cls(scores, correct, selected)

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def n_selected(self) -> int:
        return int(self.selected.sum())

    def unselected(self):
        keep = ~self.selected
        if not keep.any():
            raise DegenerateFrameError("every point is in the labeled set")
        return self.scores[keep], self.correct[keep]


@dataclass(frozen=True)
class Curve:
    """Sweep points ordered from ``tau = -inf`` (coverage 1) to ``+inf``."""

    tau: np.ndarray
    coverage: np.ndarray
    accuracy: np.ndarray
    coverage_star: np.ndarray


def accuracy_coverage_curve(frame: EvalFrame) -> Curve:
    s, c = frame.unselected()
    n_u = s.shape[0]
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    c_sorted = c[order].astype(np.int64)
    # correct_ge[j] = number of correct points among s_sorted[j:]
    correct_ge = np.concatenate([np.cumsum(c_sorted[::-1])[::-1], [0]])
    distinct = np.unique(s_sorted)
    first = np.searchsorted(s_sorted, distinct, side="left")
    accepted = n_u - first
    acc = correct_ge[first] / accepted

    raw_acc = correct_ge[0] / n_u
    tau = np.concatenate([[-np.inf], distinct, [np.inf]])
    cov_counts = np.concatenate([[n_u], accepted, [0]])
    accuracy = np.concatenate([[raw_acc], acc, [1.0]])
    return Curve(tau, cov_counts / n_u, accuracy, cov_counts / frame.n)


def acc_cov_at_threshold(frame: EvalFrame, tau: float):
    """Accuracy and coverage of the selective classifier at threshold ``tau``."""
    s, c = frame.unselected()
    accepted = s >= tau
    n_acc = int(accepted.sum())
    cov = n_acc / s.shape[0]
    acc = 1.0 if n_acc == 0 else int(c[accepted].sum()) / n_acc
    return acc, cov


def max_acc_at_coverage(frame: EvalFrame, target_coverage: float) -> float:
    curve = accuracy_coverage_curve(frame)
    feasible = curve.coverage >= target_coverage - TOL
    if not feasible.any():
        raise ValueError(f"target coverage {target_coverage} exceeds 1")
    return float(curve.accuracy[feasible].max())


def max_cov_at_accuracy(frame: EvalFrame, target_accuracy: float) -> float:
    curve = accuracy_coverage_curve(frame)
    feasible = curve.accuracy >= target_accuracy - TOL
    return float(curve.coverage[feasible].max())


def cov_star_at_accuracy(frame: EvalFrame, target_accuracy: float) -> float:
    """Like :func:`max_cov_at_accuracy`, but coverage is over all ``n`` points.

    The value is therefore bounded by ``1 - n_selected / n``.
    """
    curve = accuracy_coverage_curve(frame)
    feasible = curve.accuracy >= target_accuracy - TOL
    return float(curve.coverage_star[feasible].max())


def auacc(frame: EvalFrame) -> float:
    """Area under the accuracy-coverage curve (composite trapezoidal rule)."""
    return curve_area(accuracy_coverage_curve(frame))


def curve_area(curve: Curve) -> float:
    cov, acc = curve.coverage, curve.accuracy
    return float(np.sum((cov[:-1] - cov[1:]) * (acc[:-1] + acc[1:]) / 2.0))


def auroc(frame: EvalFrame) -> float:
    """Probability that a correct point outscores an incorrect one (ties 0.5)."""
    s, c = frame.unselected()
    n_pos = int(c.sum())
    n_neg = c.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both correct and incorrect points")
    ranks = rankdata(s)
    u = ranks[c].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def overconfidence_ratio(frame: EvalFrame, tol: float = 1e-12) -> float:
    """Fraction of misclassified unlabeled points with confidence 1."""
    s, c = frame.unselected()
    wrong = ~c
    if not wrong.any():
        raise UndefinedMetricError("no misclassified points")
    return float((s[wrong] >= 1.0 - tol).sum() / wrong.sum())


def accuracy(frame: EvalFrame) -> float:
    """Plain accuracy of the classifier on the unlabeled points."""
    _, c = frame.unselected()
    return float(c.mean())


def metric_bundle(frame: EvalFrame, target_accuracy: float = 0.8,
                  target_coverage: float = 0.8) -> dict:
    """All metrics as fractions; undefined ones are reported as ``None``."""
    curve = accuracy_coverage_curve(frame)
    out = {
        "accuracy": accuracy(frame),
        "acc_at_cov": max_acc_at_coverage(frame, target_coverage),
        "cov_at_acc": max_cov_at_accuracy(frame, target_accuracy),
        "cov_star_at_acc": cov_star_at_accuracy(frame, target_accuracy),
        "auacc": curve_area(curve),
    }
    for name, fn in (("auroc", auroc), ("overconfidence_ratio", overconfidence_ratio)):
        try:
            out[name] = fn(frame)
        except UndefinedMetricError:
            out[name] = None
    return out


def _fmt_tau(t: float) -> str:
    if math.isinf(t):
        return "inf" if t > 0 else "-inf"
    return repr(float(t))


def write_curve_csv(curve: Curve, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "coverage", "accuracy"])
        for t, cv, ac in zip(curve.tau, curve.coverage, curve.accuracy):
            w.writerow([_fmt_tau(t), repr(float(cv)), repr(float(ac))])


def read_curve_csv(path) -> Curve:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    tau = np.array([float(r["tau"]) for r in rows])
    cov = np.array([float(r["coverage"]) for r in rows])
    acc = np.array([float(r["accuracy"]) for r in rows])
    return Curve(tau, cov, acc, cov)
