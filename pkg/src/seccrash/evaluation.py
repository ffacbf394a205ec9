"""Metrics, ROC curves, ablations, subgroup runs and permutation importance."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if len(s) != len(y):
        raise EvaluationError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count half.

    Computed from midranks (Mann-Whitney U). Midrank sums are multiples of
    one half, so the numerator is exact and the result matches pair counting.
    """
    s, y = _check(scores, labels)
    p = int(y.sum())
    n = len(y) - p
    if p == 0 or n == 0:
        raise EvaluationError("AUC needs both classes")
    r = rankdata(s)
    u = r[y == 1].sum() - p * (p + 1) / 2
    return float(u / (p * n))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(far, sensitivity, thresholds) for the rule ``score > t`` over every distinct t."""
    s, y = _check(scores, labels)
    p, n = y.sum(), len(y) - y.sum()
    t = np.concatenate([[np.inf], np.unique(s)[::-1], [-np.inf]])
    order = np.sort(s[y == 1]), np.sort(s[y == 0])
    tp = p - np.searchsorted(order[0], t, side="right")
    fp = n - np.searchsorted(order[1], t, side="right")
    return fp / max(n, 1), tp / max(p, 1), t


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    sensitivity: float
    far: float
    auc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    def to_json(self) -> dict:
        return asdict(self)


def metrics_at_threshold(scores, labels, p_thres: float) -> MetricsReport:
    s, y = _check(scores, labels)
    pred = s > p_thres
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    total = tp + fp + tn + fn
    both = 0 < y.sum() < len(y)
    return MetricsReport(
        accuracy=(tp + tn) / total if total else 0.0,
        sensitivity=tp / (tp + fn) if tp + fn else 0.0,
        far=fp / (fp + tn) if fp + tn else 0.0,
        auc=auc(s, y) if both else None,
        tp=tp, fp=fp, tn=tn, fn=fn,
        threshold=float(p_thres),
    )


def write_metrics(reports: dict[str, MetricsReport | dict], path) -> None:
    out = {k: (v.to_json() if isinstance(v, MetricsReport) else v) for k, v in reports.items()}
    Path(path).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Permutation importance
# --------------------------------------------------------------------------


def permutation_importance(predict: Callable[[np.ndarray], np.ndarray], X, y, feature_names: Sequence[str],
                           repeats: int = 5, seed: int = 0) -> list[tuple[str, float]]:
    """Mean AUC drop when one column is shuffled, sorted from most to least important."""
    if repeats < 3:
        raise EvaluationError("need at least 3 repeats")
    X = np.asarray(X, dtype=float)
    base = auc(predict(X), y)
    rng = np.random.default_rng([seed, 41])
    result = []
    for j, name in enumerate(feature_names):
        col = X[:, j]
        if np.all(col == col[0]):
            result.append((name, 0.0))
            continue
        drops = []
        Xp = X.copy()
        for _ in range(repeats):
            Xp[:, j] = col[rng.permutation(len(col))]
            drops.append(base - auc(predict(Xp), y))
        result.append((name, float(np.mean(drops))))
    return sorted(result, key=lambda kv: -kv[1])


# --------------------------------------------------------------------------
# Ablations and subgroups
# --------------------------------------------------------------------------


def ablation_windows(corpus, classifications, W_values: Sequence[int] = (1, 2, 3, 4, 5, 6), config=None,
                     kinds=("SC1", "SC2")) -> pd.DataFrame:
    """Test AUC per window count, rebuilding the SC datasets each time with fixed seeds."""
    from .experiment import ExperimentConfig, prepare, run_experiment

    config = config or ExperimentConfig()
    bad = [w for w in W_values if not 1 <= w <= 6]
    if bad:
        raise EvaluationError(f"window counts must lie in 1..6, got {bad}")
    rows = []
    for W in W_values:
        cfg = config.with_(window_count=W, kinds=tuple(kinds))
        res = run_experiment(prepare(corpus, classifications, cfg), cfg)
        row = {"window_count": W}
        row.update({k: res.kinds[k].auc for k in kinds})
        row["mean"] = float(np.mean([res.kinds[k].auc for k in kinds]))
        rows.append(row)
    return pd.DataFrame(rows)


FEATURE_SETS = ("TF", "TF+Weather", "TF+Geometrics", "All")


def ablation_features(corpus, classifications, feature_sets: Sequence[str] = FEATURE_SETS, config=None,
                      data=None) -> pd.DataFrame:
    """AUC per feature set (rows) and model (PC, SC1, SC2, Hybrid columns)."""
    from .experiment import ExperimentConfig, prepare, run_experiment

    config = config or ExperimentConfig()
    data = data or prepare(corpus, classifications, config)
    rows = []
    for fs in feature_sets:
        cfg = config.with_(feature_set=fs)
        res = run_experiment(data, cfg)
        row = {"features": fs}
        row.update({k: r.auc for k, r in res.kinds.items()})
        row["Hybrid"] = res.hybrid.auc if res.hybrid else float("nan")
        rows.append(row)
    return pd.DataFrame(rows)


def subgroup_eval(corpus, classifications, grouping: str = "weekday", config=None, data=None) -> pd.DataFrame:
    """Train and test a separate model suite per freeway or weekday/weekend, plus an overall row."""
    from .experiment import ExperimentConfig, prepare, restrict, run_experiment

    if grouping not in ("freeway", "weekday"):
        raise EvaluationError("grouping must be 'freeway' or 'weekday'")
    config = config or ExperimentConfig()
    data = data or prepare(corpus, classifications, config)
    key = (lambda m: m.freeway) if grouping == "freeway" else (lambda m: "weekday" if m.weekday_flag else "weekend")
    values = sorted({key(s.meta) for ds in data.datasets.values() for s in ds.samples})
    rows = []
    for label, sub in [("overall", data)] + [(v, restrict(data, lambda m, v=v: key(m) == v)) for v in values]:
        try:
            res = run_experiment(sub, config)
        except Exception as err:  # degenerate group
            log.warning("subgroup %s skipped: %s", label, err)
            continue
        row = {grouping: label}
        row.update({k: r.auc for k, r in res.kinds.items()})
        row["Hybrid"] = res.hybrid.auc if res.hybrid else float("nan")
        rows.append(row)
    return pd.DataFrame(rows)
