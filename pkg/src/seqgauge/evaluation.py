"""Score sets, ROC and PR curves, AUC statistics and benign-expansion sweeps.

Convention throughout: higher scores are more malware-like, and a sample is
classified positive at threshold ``t`` iff ``score >= t``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreSet:
    positives: np.ndarray
    negatives: np.ndarray
    positive_ids: tuple[str, ...] = ()
    negative_ids: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("positives", "negatives"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise EvalError(f"{name} contain non-finite scores")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name, vals in (("positive_ids", self.positives), ("negative_ids", self.negatives)):
            ids = tuple(getattr(self, name))
            if ids and len(ids) != vals.size:
                raise EvalError(f"{name} length does not match scores")
            object.__setattr__(self, name, ids)

    def require_nonempty(self) -> None:
        if self.positives.size == 0 or self.negatives.size == 0:
            raise EvalError("score set needs at least one positive and one negative")

    def swapped(self) -> "ScoreSet":
        return ScoreSet(self.negatives, self.positives, self.negative_ids, self.positive_ids)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn)

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp)

    recall = tpr


@dataclass(frozen=True)
class Curve:
    kind: str  # "roc" or "pr"
    points: tuple[tuple[float, float], ...]
    auc: float

    @property
    def x(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def y(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def confusion_at(scores: ScoreSet, threshold: float) -> ConfusionCounts:
    scores.require_nonempty()
    if not math.isfinite(threshold):
        raise EvalError("threshold must be finite")
    tp = int(np.count_nonzero(scores.positives >= threshold))
    fp = int(np.count_nonzero(scores.negatives >= threshold))
    return ConfusionCounts(tp, scores.positives.size - tp, fp, scores.negatives.size - fp)


def _sweep(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) at each distinct score, highest threshold first."""
    scores.require_nonempty()
    values = np.unique(np.concatenate([scores.positives, scores.negatives]))[::-1]
    pos = np.sort(scores.positives)
    neg = np.sort(scores.negatives)
    # count of scores >= v
    tp = pos.size - np.searchsorted(pos, values, side="left")
    fp = neg.size - np.searchsorted(neg, values, side="left")
    return tp.astype(np.int64), fp.astype(np.int64)


def roc_curve(scores: ScoreSet) -> Curve:
    """ROC points (FPR, TPR) from (0, 0) through every distinct score to (1, 1).

    The area is the trapezoid rule evaluated in integer counts, so tied
    positive/negative scores contribute exactly half credit.
    """
    tp, fp = _sweep(scores)
    n_pos, n_neg = scores.positives.size, scores.negatives.size
    tp = np.concatenate([[0], tp])
    fp = np.concatenate([[0], fp])
    points = tuple((float(f / n_neg), float(t / n_pos)) for f, t in zip(fp, tp))
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return Curve("roc", points, twice_area / (2 * n_pos * n_neg))


def auc_roc_pairwise(scores: ScoreSet) -> float:
    """P(random positive outscores random negative), ties counted as one half."""
    scores.require_nonempty()
    p = scores.positives[:, None]
    n = scores.negatives[None, :]
    wins = int(np.count_nonzero(p > n))
    ties = int(np.count_nonzero(p == n))
    return (2 * wins + ties) / (2 * scores.positives.size * scores.negatives.size)


def pr_curve(scores: ScoreSet) -> Curve:
    """(recall, precision) points over the same threshold sweep as :func:`roc_curve`.

    The curve starts at recall 0 with the precision of the first achieved
    point; the area is the trapezoid rule over recall.
    """
    tp, fp = _sweep(scores)
    n_pos = scores.positives.size
    keep = (tp + fp) > 0
    tp, fp = tp[keep], fp[keep]
    recall = tp / n_pos
    precision = tp / (tp + fp)
    if recall[0] > 0:
        recall = np.concatenate([[0.0], recall])
        precision = np.concatenate([[precision[0]], precision])
    auc = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))
    points = []
    for pt in zip(recall.tolist(), precision.tolist()):
        # several negative-only thresholds above the first positive repeat (0, 0)
        if not points or points[-1] != pt:
            points.append(pt)
    return Curve("pr", tuple(points), auc)


def curve(scores: ScoreSet, kind: str) -> Curve:
    if kind == "roc":
        return roc_curve(scores)
    if kind == "pr":
        return pr_curve(scores)
    raise EvalError(f"unknown curve kind {kind!r}")


def expand_benign(scores: ScoreSet, n: int) -> ScoreSet:
    """Repeat every negative score ``n`` times."""
    if int(n) != n or n < 1:
        raise EvalError("expansion factor must be an integer >= 1")
    n = int(n)
    ids = tuple(i for i in scores.negative_ids for _ in range(n))
    return ScoreSet(scores.positives, np.repeat(scores.negatives, n), scores.positive_ids, ids)


@dataclass(frozen=True)
class SweepRow:
    n: int
    auc_pr: float
    auc_roc: float


def imbalance_sweep(scores: ScoreSet, factors: Sequence[int]) -> list[SweepRow]:
    if not len(factors):
        raise EvalError("need at least one expansion factor")
    rows = []
    for n in factors:
        big = expand_benign(scores, n)
        rows.append(SweepRow(int(n), pr_curve(big).auc, roc_curve(big).auc))
    return rows


# -- CSV formats ------------------------------------------------------------


def write_scores_csv(scores: ScoreSet, fh) -> None:
    """``sample_id,label,score`` rows; label is ``positive`` or ``negative``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sample_id", "label", "score"])
    for label, ids, vals in (
        ("positive", scores.positive_ids, scores.positives),
        ("negative", scores.negative_ids, scores.negatives),
    ):
        ids = ids or [f"{label}-{i}" for i in range(vals.size)]
        for sid, v in zip(ids, vals):
            w.writerow([sid, label, repr(float(v))])


NEGATIVE_LABELS = {"negative", "benign", "0", "false"}


def read_scores_csv(fh) -> ScoreSet:
    """Parse ``sample_id,label,score``; labels other than benign/negative/0 are
    read as family names and count as positives."""
    rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    if rows and [c.strip().lower() for c in rows[0]] == ["sample_id", "label", "score"]:
        rows = rows[1:]
    pos, neg, pid, nid = [], [], [], []
    for lineno, row in enumerate(rows, 2):
        if len(row) != 3:
            raise EvalError(f"row {lineno}: expected 3 fields, got {len(row)}")
        sid, label, value = (c.strip() for c in row)
        try:
            v = float(value)
        except ValueError:
            raise EvalError(f"row {lineno}: bad score {value!r}") from None
        if label.lower() in NEGATIVE_LABELS:
            neg.append(v)
            nid.append(sid)
        else:
            pos.append(v)
            pid.append(sid)
    return ScoreSet(pos, neg, tuple(pid), tuple(nid))


def format_curve_csv(c: Curve, expand: int = 1, **meta) -> str:
    buf = io.StringIO()
    extra = "".join(f" {k}={v}" for k, v in meta.items())
    buf.write(f"# kind={c.kind} auc={c.auc:.6f} expand={expand}{extra}\n")
    buf.write("x,y\n")
    for x, y in c.points:
        buf.write(f"{x!r},{y!r}\n")
    return buf.getvalue()


def parse_curve_csv(text: str) -> tuple[dict, list[tuple[float, float]]]:
    meta, points = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            for kv in line[1:].split():
                k, _, v = kv.partition("=")
                meta[k] = v
        elif line and line != "x,y":
            x, y = line.split(",")
            points.append((float(x), float(y)))
    return meta, points

