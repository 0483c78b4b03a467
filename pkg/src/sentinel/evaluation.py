"""Label-aware scoring of detector output, ROC analysis and figure data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from sentinel.detector import (
    DetectionEvent,
    DetectorConfig,
    calibrate_static_k,
    run_detector,
    static_threshold,
)

logger = logging.getLogger(__name__)

DEFAULT_QUORUM = 0.5

# Rows reported in the source publication; reproduced for context only.
PUBLISHED_RESULTS = {
    "static_threshold": {"accuracy": 89.4, "precision": 86.2, "recall": 87.1, "fpr": 12.1},
    "one_class_svm": {"accuracy": 91.2, "precision": 88.5, "recall": 89.3, "fpr": 10.3},
    "isolation_forest": {"accuracy": 92.7, "precision": 90.1, "recall": 91.5, "fpr": 8.9},
    "dynamic": {"accuracy": 96.8, "precision": 95.4, "recall": 94.2, "fpr": 3.2},
    "auc": 0.97,
}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocCurve:
    points: tuple
    auc: float

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def window_truth(
    events: Sequence[DetectionEvent], labels, window_size: int, quorum: float = DEFAULT_QUORUM
) -> np.ndarray:
    """Ground truth per event: 1 iff the attack fraction of its window exceeds ``quorum``."""
    labels = np.asarray(labels)
    prefix = np.concatenate([[0], np.cumsum(labels != 0)])
    out = np.empty(len(events), dtype=int)
    for i, e in enumerate(events):
        first = e.step - window_size + 1
        if first < 0 or e.step >= len(labels):
            raise EvaluationError(
                f"labels do not cover window [{first}, {e.step}] (have {len(labels)})"
            )
        frac = (prefix[e.step + 1] - prefix[first]) / window_size
        out[i] = int(frac > quorum)
    return out


def confusion(predicted, truth) -> ConfusionCounts:
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise EvaluationError(f"shape mismatch: {p.shape} vs {t.shape}")
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        tn=int(np.sum(~p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def score_windows(
    events: Sequence[DetectionEvent],
    labels,
    window_size: int,
    quorum: float = DEFAULT_QUORUM,
    predicted=None,
) -> ConfusionCounts:
    """Tally non-warmup events against window ground truth.

    ``predicted`` overrides the events' own alarm flags (it must align with
    the non-warmup events); the static baseline uses this.
    """
    scored = [e for e in events if not e.warmup]
    truth = window_truth(scored, labels, window_size, quorum)
    if predicted is None:
        predicted = [e.alarmed for e in scored]
    return confusion(predicted, truth)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def metrics(c: ConfusionCounts) -> dict:
    """Accuracy, precision, recall and FPR as fractions; ``None`` when undefined."""
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "precision": _ratio(c.tp, c.tp + c.fp),
        "recall": _ratio(c.tp, c.tp + c.fn),
        "fpr": _ratio(c.fp, c.fp + c.tn),
    }


def roc_auc(scores, labels) -> RocCurve:
    """ROC by sweeping a threshold over the distinct scores, high to low.

    Equal scores move together in one step, so ties contribute half credit
    to the trapezoidal area.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise EvaluationError(f"shape mismatch: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # Last index of each run of equal scores.
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, len(s) - 1)
    tps = np.cumsum(y)[ends]
    fps = np.cumsum(~y)[ends]
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = tuple((float(a), float(b)) for a, b in zip(fpr, tpr))
    return RocCurve(points=points, auc=auc)


def pairwise_auc(scores, labels) -> float:
    """P(score⁺ > score⁻) + ½ P(tie) over all positive/negative pairs."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise EvaluationError("need both classes")
    diff = pos[:, None] - neg[None, :]
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size)


# --------------------------------------------------------------------------
# Method comparison


def _pct(m: dict) -> dict:
    return {k: (None if v is None else round(100.0 * v, 4)) for k, v in m.items()}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class ComparisonResult:
    events: list
    truth: np.ndarray
    static_threshold: float
    static_k: float
    dynamic: ConfusionCounts
    static: ConfusionCounts
    roc: RocCurve
    roc_raw: RocCurve
    fim_normal_median: Optional[float]
    fim_attack_median: Optional[float]

    @property
    def scored_events(self) -> list:
        return [e for e in self.events if not e.warmup]

    def table(self) -> dict:
        return {
            "static_threshold": _pct(metrics(self.static)),
            "dynamic": _pct(metrics(self.dynamic)),
        }

    def report(self, extra: Optional[dict] = None) -> dict:
        out = {
            "table": self.table(),
            "counts": {
                "static_threshold": self.static.__dict__,
                "dynamic": self.dynamic.__dict__,
            },
            "auc": self.roc.auc,
            "auc_raw_kl": self.roc_raw.auc,
            "static_k": self.static_k,
            "static_threshold_value": self.static_threshold,
            "n_events": len(self.events),
            "n_scored_windows": len(self.scored_events),
            "n_attack_windows": int(self.truth.sum()),
            "fim_median": {"normal": self.fim_normal_median, "attack": self.fim_attack_median},
            "published_results": PUBLISHED_RESULTS,
        }
        if extra:
            out.update(extra)
        return out


def _median_or_none(values) -> Optional[float]:
    values = list(values)
    return float(np.median(values)) if values else None


def compare_methods(
    safe,
    projections,
    labels,
    config: DetectorConfig,
    calibration_kl=None,
    static_k: Optional[float] = None,
    quorum: float = DEFAULT_QUORUM,
    temperature: float = 1.0,
) -> ComparisonResult:
    """Run the dynamic detector and the static Fisher-threshold baseline on one stream.

    The static ``k`` is taken from ``static_k`` if given, otherwise calibrated
    so the threshold sits at the 95th percentile of ``calibration_kl``.
    """
    if static_k is None:
        if calibration_kl is None or len(calibration_kl) == 0:
            raise EvaluationError("static baseline needs calibration KL values or an explicit k")
        static_k = calibrate_static_k(safe, calibration_kl)
    cfg = DetectorConfig.from_dict({**config.to_dict(), "static_k": static_k})
    events = run_detector(safe, projections, cfg, temperature)
    scored = [e for e in events if not e.warmup]
    if not scored:
        raise EvaluationError("stream too short: no windows scored after warmup")
    truth = window_truth(scored, labels, cfg.window_size, quorum)
    dynamic = confusion([e.alarmed for e in scored], truth)
    static = confusion([e.static_alarmed for e in scored], truth)
    finite_margin = np.array([e.margin for e in scored])
    finite_margin[~np.isfinite(finite_margin)] = np.finfo(float).max
    raw = np.array([e.kl_nats for e in scored])
    raw[~np.isfinite(raw)] = np.finfo(float).max
    if 0 < truth.sum() < len(truth):
        roc = roc_auc(finite_margin, truth)
        roc_raw = roc_auc(raw, truth)
    else:
        logger.warning("single-class window labels; ROC undefined")
        roc = roc_raw = RocCurve(points=((0.0, 0.0), (1.0, 1.0)), auc=float("nan"))
    fims_n = [e.fim for e, t in zip(scored, truth) if t == 0 and not e.degenerate]
    fims_a = [e.fim for e, t in zip(scored, truth) if t == 1 and not e.degenerate]
    return ComparisonResult(
        events=events,
        truth=truth,
        static_threshold=static_threshold(safe, static_k),
        static_k=static_k,
        dynamic=dynamic,
        static=static,
        roc=roc,
        roc_raw=roc_raw,
        fim_normal_median=_median_or_none(fims_n),
        fim_attack_median=_median_or_none(fims_a),
    )


# --------------------------------------------------------------------------
# Figure data

FIGURE_HEADERS = {
    "kl": ["step", "kl", "threshold", "alarmed"],
    "fim": ["fim", "class"],
    "roc": ["fpr", "tpr"],
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_figures(
    out_dir,
    events: Sequence[DetectionEvent],
    truth,
    roc: RocCurve,
    names: tuple = ("fig1", "fig2", "fig3"),
    time_scale: Optional[float] = None,
    roc_raw: Optional[RocCurve] = None,
) -> list:
    """Write the KL/threshold trace, FIM-by-class values and ROC points as CSV.

    ``events`` and ``truth`` must be aligned (non-warmup events). When
    ``time_scale`` is given the first column is ``step * time_scale``
    (header ``time``) instead of the step index.
    """
    os.makedirs(out_dir, exist_ok=True)
    kl_name, fim_name, roc_name = names
    written = []

    header = list(FIGURE_HEADERS["kl"])
    if time_scale is not None:
        header[0] = "time"
    path = os.path.join(out_dir, f"{kl_name}.csv")
    _write_csv(
        path,
        header,
        (
            [e.step * time_scale if time_scale is not None else e.step,
             e.kl.nats if e.kl is not None else None, e.threshold, e.alarmed]
            for e in events
        ),
    )
    written.append(path)

    path = os.path.join(out_dir, f"{fim_name}.csv")
    _write_csv(
        path,
        FIGURE_HEADERS["fim"],
        ([e.fim, "anomalous" if t else "normal"] for e, t in zip(events, truth) if not e.degenerate),
    )
    written.append(path)

    path = os.path.join(out_dir, f"{roc_name}.csv")
    _write_csv(path, FIGURE_HEADERS["roc"], roc.points)
    written.append(path)

    if roc_raw is not None:
        path = os.path.join(out_dir, f"{roc_name}_raw_kl.csv")
        _write_csv(path, FIGURE_HEADERS["roc"], roc_raw.points)
        written.append(path)
    return written


def write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(data), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj
