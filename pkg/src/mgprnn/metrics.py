"""Discrimination metrics, horizon sweeps and a points-table early-warning score."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import truncate_to_horizon
from .errors import ConfigError, MetricUndefinedError

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("horizon_hours", "n_encounters", "n_positive", "auroc", "aupr", "precision_at_085")


class UnreachableSensitivityWarning(UserWarning):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(int)


def auroc(scores, labels):
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give ties half credit
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _curve(s, y):
    """Cumulative (tp, fp) at each distinct threshold, highest first."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.diff(s) != 0, True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    return s[last], tp, fp


def aupr(scores, labels):
    """Average precision: sum over thresholds of precision times recall gained."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("AUPR needs at least one positive")
    _, tp, fp = _curve(s, y)
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_gain))


def precision_at_sensitivity(scores, labels, target=0.85, best=False):
    """Precision at the largest threshold whose sensitivity reaches ``target``.

    ``best=True`` instead returns the highest precision over all thresholds
    that reach ``target``. Predictions are ``score >= threshold``. If no
    threshold reaches the target, the prevalence is returned with an
    :class:`UnreachableSensitivityWarning`.
    """
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("precision at sensitivity needs at least one positive")
    _, tp, fp = _curve(s, y)
    ok = tp / n_pos >= target
    if not ok.any():
        prevalence = n_pos / len(y)
        warnings.warn(f"sensitivity {target} unreachable; returning prevalence {prevalence:.4f}",
                      UnreachableSensitivityWarning, stacklevel=2)
        return float(prevalence)
    precision = tp / (tp + fp)
    if best:
        return float(precision[ok].max())
    return float(precision[np.argmax(ok)])


# ---------------------------------------------------------------------------
# horizon sweep


@dataclass
class SweepRow:
    horizon_hours: int
    n_encounters: int
    n_positive: int
    n_excluded: int
    auroc: float = None
    aupr: float = None
    precision_at_085: float = None

    @property
    def undefined(self):
        return self.auroc is None


def horizon_sweep(records, scorer, horizons=range(13), target=0.85):
    """Truncate at each horizon, score, and compute the three metrics.

    ``scorer`` maps a list of encounters to an array of scores. Encounters
    shorter than the horizon are excluded; a single-class row keeps null
    metrics.
    """
    rows = []
    for h in horizons:
        kept = [t for t in (truncate_to_horizon(r, h) for r in records) if t is not None]
        labels = np.array([r.label for r in kept], dtype=int)
        row = SweepRow(int(h), len(kept), int(labels.sum()), len(records) - len(kept))
        if len(kept) and 0 < labels.sum() < len(labels):
            scores = np.asarray(scorer(kept), dtype=float)
            row.auroc = auroc(scores, labels)
            row.aupr = aupr(scores, labels)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UnreachableSensitivityWarning)
                row.precision_at_085 = precision_at_sensitivity(scores, labels, target)
        else:
            log.warning("horizon %s: single-class evaluation set, metrics left empty", h)
        rows.append(row)
    return rows


def _fmt(x):
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(sweep_csv(rows))


def parse_horizons(text):
    """``"0..12"`` (inclusive range) or a comma list like ``"0,3,6"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            hs = list(range(int(lo), int(hi) + 1))
        else:
            hs = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse horizons {text!r}") from None
    if not hs or min(hs) < 0:
        raise ConfigError(f"horizons must be nonnegative and nonempty, got {text!r}")
    return hs


# ---------------------------------------------------------------------------
# points-table early-warning score


@dataclass
class ThresholdScoreTable:
    """Per-variable ``[lower, upper)`` ranges with integer points.

    ``ranges`` maps a variable index to ``[(lower, upper, points), ...]``.
    Ranges for a variable must not overlap and must cover the whole real line
    (use ``-inf``/``inf`` ends).
    """

    ranges: dict
    trigger: int = 0

    def __post_init__(self):
        clean = {}
        for m, rs in self.ranges.items():
            rs = sorted((float(lo), float(hi), int(pts)) for lo, hi, pts in rs)
            if not rs:
                raise ConfigError(f"variable {m}: no ranges")
            if any(pts < 0 for _, _, pts in rs):
                raise ConfigError(f"variable {m}: points must be nonnegative")
            if any(lo >= hi for lo, hi, _ in rs):
                raise ConfigError(f"variable {m}: empty range")
            if rs[0][0] != -np.inf or rs[-1][1] != np.inf:
                raise ConfigError(f"variable {m}: ranges must cover the real line")
            for (lo1, hi1, _), (lo2, hi2, _) in zip(rs, rs[1:]):
                if lo2 < hi1:
                    raise ConfigError(f"variable {m}: ranges [{lo1}, {hi1}) and [{lo2}, {hi2}) overlap")
                if lo2 > hi1:
                    raise ConfigError(f"variable {m}: gap between {hi1} and {lo2}")
            clean[int(m)] = rs
        self.ranges = clean

    def points(self, m, value):
        for lo, hi, pts in self.ranges[m]:
            if lo <= value < hi:
                return pts
        raise AssertionError("unreachable for a covering table")


def threshold_score(enc, table: ThresholdScoreTable, at_time):
    """Sum of points of each table variable's latest value at or before ``at_time``."""
    total = 0
    for m in table.ranges:
        sel = (enc.variables == m) & (enc.times <= at_time)
        if sel.any():
            total += table.points(m, enc.values[np.flatnonzero(sel)[-1]])
    return total
