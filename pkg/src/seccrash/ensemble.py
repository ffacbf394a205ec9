"""Voting and stacking ensembles, fixed-FAR thresholds and the PC/SC1/SC2 hybrid."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import learners
from .learners import LearnerSpec, TrainedModel
from .learners.base import dumps, loads, model_from_json, model_to_json

log = logging.getLogger(__name__)

VOTING = ("max", "mean", "median")
META_KINDS = {"linear": None, "logistic": "LogisticRegression", "gbt": "GradientBoostedTrees"}
STRATEGIES = VOTING + tuple(f"stacking-{k}" for k in META_KINDS) + ("auto",)
AUTO_CANDIDATES = ("max", "mean", "median", "stacking-logistic")
DEFAULT_FAR = 0.20
BUNDLE_VERSION = 1


class EnsembleError(ValueError):
    pass


def _weighted_sum(P: np.ndarray, w: np.ndarray, b: float = 0.0) -> np.ndarray:
    out = np.sum(P * w[None, :], axis=1)
    return out + b if b else out


def ensemble_proba(member_probs, strategy: str) -> np.ndarray:
    """Combine member probabilities (rows = samples, columns = members) by voting."""
    P = np.atleast_2d(np.asarray(member_probs, dtype=np.float64))
    if P.size == 0 or P.shape[1] == 0:
        raise EnsembleError("no member probabilities")
    if strategy == "max":
        return P.max(axis=1)
    if strategy == "mean":
        return _weighted_sum(P, np.full(P.shape[1], 1.0 / P.shape[1]))
    if strategy == "median":
        return np.median(P, axis=1)
    raise EnsembleError(f"not a voting strategy: {strategy!r}")


@dataclass(frozen=True)
class LinearMeta:
    weights: np.ndarray
    intercept: float = 0.0

    def predict(self, P: np.ndarray) -> np.ndarray:
        return np.clip(_weighted_sum(P, self.weights, self.intercept), 0.0, 1.0)


def fit_linear_meta(P: np.ndarray, y: np.ndarray) -> LinearMeta:
    A = np.hstack([P, np.ones((len(P), 1))])
    coef, *_ = np.linalg.lstsq(A, y.astype(float), rcond=None)
    return LinearMeta(coef[:-1], float(coef[-1]))


@dataclass
class EnsembleModel:
    members: list[TrainedModel]
    strategy: str
    meta_model: object | None = None  # LinearMeta or TrainedModel
    oof_auc: dict = field(default_factory=dict)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.members[0].feature_names

    @property
    def member_names(self) -> list[str]:
        return [m.kind for m in self.members]

    def member_proba(self, X, feature_names=None) -> np.ndarray:
        return np.column_stack([learners.predict_proba(m, X, feature_names) for m in self.members])

    def combine(self, P: np.ndarray) -> np.ndarray:
        if self.strategy in VOTING:
            return ensemble_proba(P, self.strategy)
        if isinstance(self.meta_model, LinearMeta):
            return self.meta_model.predict(P)
        return learners.predict_proba(self.meta_model, P)

    def predict_proba(self, X, feature_names=None) -> np.ndarray:
        return self.combine(self.member_proba(X, feature_names))


def group_folds(y: np.ndarray, groups: Sequence[str], k: int, seed: int) -> np.ndarray:
    """Fold index per sample; groups stay whole and positives spread evenly."""
    y = np.asarray(y)
    names = sorted(set(groups))
    index = {g: i for i, g in enumerate(names)}
    gid = np.array([index[g] for g in groups])
    pos = np.bincount(gid, weights=y, minlength=len(names))
    size = np.bincount(gid, minlength=len(names))
    order = np.random.default_rng([seed, 31]).permutation(len(names))
    order = order[np.argsort(-pos[order], kind="stable")]
    fold_pos = np.zeros(k)
    fold_neg = np.zeros(k)
    assign = np.empty(len(names), dtype=np.int64)
    for g in order:
        # groups with positives balance positives first, the rest balance negatives
        keys = (fold_neg, fold_pos) if pos[g] > 0 else (fold_pos, fold_neg)
        f = int(np.lexsort(keys)[0])
        assign[g] = f
        fold_pos[f] += pos[g]
        fold_neg[f] += size[g] - pos[g]
    return assign[gid]


def out_of_fold(specs: Sequence[LearnerSpec], X, y, names, groups, k: int = 5, seed: int = 0) -> np.ndarray:
    """Member predictions for each training row from models that never saw its group."""
    y = np.asarray(y)
    n_pos, n_neg = int(y.sum()), int(len(y) - y.sum())
    if min(n_pos, n_neg) < k:
        new_k = max(2, min(n_pos, n_neg))
        log.warning("only %d positives/%d negatives: using %d folds instead of %d", n_pos, n_neg, new_k, k)
        k = new_k
    folds = group_folds(y, groups, k, seed)
    P = np.zeros((len(y), len(specs)))
    for f in range(k):
        test = folds == f
        train = ~test
        if test.sum() == 0:
            continue
        for j, spec in enumerate(specs):
            m = learners.fit(spec, X[train], y[train], names)
            P[test, j] = learners.predict_proba(m, X[test])
    return P


def _auc(scores, labels) -> float:
    from .evaluation import auc

    return auc(scores, labels)


def fit_stacking(members: list[TrainedModel], oof: np.ndarray, y, meta_kind: str, seed: int = 0) -> EnsembleModel:
    if meta_kind not in META_KINDS:
        raise EnsembleError(f"unknown meta learner {meta_kind!r}")
    if meta_kind == "linear":
        meta = fit_linear_meta(oof, np.asarray(y))
    else:
        names = [f"p_{i}_{m.kind}" for i, m in enumerate(members)]
        meta = learners.fit(LearnerSpec(META_KINDS[meta_kind], {}, seed), oof, y, names)
    return EnsembleModel(members, f"stacking-{meta_kind}", meta)


def fit_ensemble(X, y, feature_names, groups=None, strategy: str = "auto",
                 members: Sequence[str] = learners.DEFAULT_MEMBERS, seed: int = 0, folds: int = 5,
                 hyperparameters: dict | None = None) -> EnsembleModel:
    """Fit members on all rows, then the combination rule.

    ``auto`` scores max/mean/median voting and logistic stacking on
    out-of-fold member predictions and keeps the best (earlier wins ties).
    """
    if strategy not in STRATEGIES:
        raise EnsembleError(f"unknown strategy {strategy!r}")
    if len(members) < 1:
        raise EnsembleError("need at least one member")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    hyperparameters = hyperparameters or {}
    specs = [LearnerSpec(k, hyperparameters.get(k, {}), seed + 1000 * i) for i, k in enumerate(members)]
    fitted = [learners.fit(s, X, y, feature_names) for s in specs]
    if strategy in VOTING:
        return EnsembleModel(fitted, strategy)
    groups = list(groups) if groups is not None else [str(i) for i in range(len(y))]
    oof = out_of_fold(specs, X, y, feature_names, groups, folds, seed)
    if strategy.startswith("stacking-"):
        return fit_stacking(fitted, oof, y, strategy.split("-", 1)[1], seed)
    scores = {}
    for cand in AUTO_CANDIDATES:
        if cand in VOTING:
            scores[cand] = _auc(ensemble_proba(oof, cand), y)
        else:
            # meta quality judged on a second level of out-of-fold predictions
            scores[cand] = _auc(_nested_meta_oof(oof, y, groups, cand.split("-", 1)[1], folds, seed), y)
    best = max(AUTO_CANDIDATES, key=lambda c: (scores[c], -AUTO_CANDIDATES.index(c)))
    if best in VOTING:
        model = EnsembleModel(fitted, best)
    else:
        model = fit_stacking(fitted, oof, y, best.split("-", 1)[1], seed)
    model.oof_auc = scores
    return model


def _nested_meta_oof(oof, y, groups, meta_kind, k, seed) -> np.ndarray:
    folds = group_folds(y, groups, k, seed + 7)
    out = np.zeros(len(y))
    for f in range(k):
        test = folds == f
        if test.sum() == 0:
            continue
        train = ~test
        if len(set(np.asarray(y)[train])) < 2 or min(y[train].sum(), (1 - y[train]).sum()) < 2:
            out[test] = ensemble_proba(oof[test], "mean")
            continue
        model = fit_stacking([], oof[train], y[train], meta_kind, seed) if meta_kind == "linear" else None
        if model is None:
            names = [f"p_{i}" for i in range(oof.shape[1])]
            meta = learners.fit(LearnerSpec(META_KINDS[meta_kind], {}, seed), oof[train], y[train], names)
            out[test] = learners.predict_proba(meta, oof[test])
        else:
            out[test] = model.meta_model.predict(oof[test])
    return out


def member_correlation_report(member_probs, names: Sequence[str] | None = None) -> dict:
    """Pairwise Pearson correlations; entries involving a constant member are ``None``."""
    P = np.atleast_2d(np.asarray(member_probs, dtype=float))
    m = P.shape[1]
    if m < 2:
        raise EnsembleError("need at least two members")
    names = list(names) if names is not None else [f"m{i}" for i in range(m)]
    # range, not std: the std of a constant column can round to a tiny nonzero value
    varies = np.ptp(P, axis=0) > 0
    matrix = [[None] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            if varies[i] and varies[j]:
                matrix[i][j] = float(np.corrcoef(P[:, i], P[:, j])[0, 1])
    return {"members": names, "matrix": matrix, "undefined": [names[i] for i in range(m) if not varies[i]]}


# --------------------------------------------------------------------------
# Thresholds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdPolicy:
    p_thres: float
    target_far: float = DEFAULT_FAR
    calibration_id: str = ""
    achieved_far: float = 0.0


def _calibration_id(scores: np.ndarray) -> str:
    return hashlib.sha256(np.sort(np.asarray(scores, dtype="<f8")).tobytes()).hexdigest()[:16]


def far_at(negative_scores, threshold: float) -> float:
    neg = np.asarray(negative_scores, dtype=float)
    return float(np.count_nonzero(neg > threshold)) / len(neg)


def calibrate_threshold(negative_scores, target_far: float = DEFAULT_FAR) -> ThresholdPolicy:
    """Smallest grid threshold with at most ``target_far`` of negatives strictly above it.

    The grid is the sorted unique scores plus 0 and 1.
    """
    neg = np.sort(np.asarray(negative_scores, dtype=float))
    if len(neg) == 0:
        raise EnsembleError("no negative scores to calibrate on")
    if len(neg) < 5:
        log.warning("calibrating on only %d negatives", len(neg))
    allowed = int(np.floor(target_far * len(neg) + 1e-9))
    grid = np.unique(np.concatenate([neg, [0.0, 1.0]]))
    above = len(neg) - np.searchsorted(neg, grid, side="right")
    ok = np.flatnonzero(above <= allowed)
    t = float(grid[ok[0]])
    return ThresholdPolicy(t, target_far, _calibration_id(neg), far_at(neg, t))


# --------------------------------------------------------------------------
# Hybrid
# --------------------------------------------------------------------------

KINDS = ("PC", "SC1", "SC2")


@dataclass
class ModelBundle:
    pc: EnsembleModel
    sc1: EnsembleModel
    sc2: EnsembleModel
    thresholds: dict[str, ThresholdPolicy]
    hybrid_thresholds: dict[str, ThresholdPolicy] | None = None
    hybrid_far_target: float = DEFAULT_FAR
    window_count: int = 4
    version: int = BUNDLE_VERSION

    def model(self, kind: str) -> EnsembleModel:
        return {"PC": self.pc, "SC1": self.sc1, "SC2": self.sc2}[kind]

    def hybrid_policy(self) -> dict[str, ThresholdPolicy]:
        return self.hybrid_thresholds or self.thresholds

    # -- persistence ----------------------------------------------------

    def to_json(self) -> dict:
        def ens(e: EnsembleModel):
            meta = None
            if isinstance(e.meta_model, LinearMeta):
                meta = {"linear": {"weights": e.meta_model.weights.tolist(), "intercept": e.meta_model.intercept}}
            elif e.meta_model is not None:
                meta = {"model": model_to_json(e.meta_model)}
            return {
                "strategy": e.strategy,
                "members": [model_to_json(m) for m in e.members],
                "meta": meta,
                "oof_auc": e.oof_auc,
            }

        def pol(d):
            return None if d is None else {k: vars(v) for k, v in d.items()}

        return {
            "format": "seccrash-bundle",
            "version": self.version,
            "window_count": self.window_count,
            "hybrid_far_target": self.hybrid_far_target,
            "thresholds": pol(self.thresholds),
            "hybrid_thresholds": pol(self.hybrid_thresholds),
            "models": {"PC": ens(self.pc), "SC1": ens(self.sc1), "SC2": ens(self.sc2)},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelBundle":
        if obj.get("format") != "seccrash-bundle":
            raise EnsembleError("not a model bundle")
        if obj.get("version") != BUNDLE_VERSION:
            raise EnsembleError(f"unsupported bundle version {obj.get('version')}")

        def ens(o):
            meta = None
            if o["meta"] and "linear" in o["meta"]:
                meta = LinearMeta(np.array(o["meta"]["linear"]["weights"]), o["meta"]["linear"]["intercept"])
            elif o["meta"]:
                meta = model_from_json(o["meta"]["model"])
            return EnsembleModel([model_from_json(m) for m in o["members"]], o["strategy"], meta, o["oof_auc"])

        def pol(d):
            return None if d is None else {k: ThresholdPolicy(**v) for k, v in d.items()}

        m = obj["models"]
        return cls(ens(m["PC"]), ens(m["SC1"]), ens(m["SC2"]), pol(obj["thresholds"]),
                   pol(obj["hybrid_thresholds"]), obj["hybrid_far_target"], obj["window_count"], obj["version"])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "bundle.bin").write_bytes(dumps(self.to_json()))
        rows = []
        for scope, policies in (("component", self.thresholds), ("hybrid", self.hybrid_thresholds or {})):
            for kind, p in policies.items():
                rows.append({"scope": scope, "model_kind": kind, "p_thres": p.p_thres, "target_far": p.target_far,
                             "calibration_set": p.calibration_id, "achieved_far": p.achieved_far})
        (directory / "thresholds.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        path = Path(directory) / "bundle.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing model bundle {path}")
        return cls.from_json(loads(path.read_bytes()))


def hybrid_predict(pc_prob, sc1_prob, sc2_prob, policy: dict[str, ThresholdPolicy] | ModelBundle):
    """Hybrid score (max of the three) and label (any model above its own threshold)."""
    if isinstance(policy, ModelBundle):
        policy = policy.hybrid_policy()
    probs = np.column_stack([np.atleast_1d(np.asarray(p, dtype=float)) for p in (pc_prob, sc1_prob, sc2_prob)])
    thr = np.array([policy[k].p_thres for k in KINDS])
    labels = (probs > thr[None, :]).any(axis=1)
    out_prob, out_label = probs.max(axis=1), labels.astype(np.int64)
    if np.ndim(pc_prob) == 0:
        return float(out_prob[0]), int(out_label[0])
    return out_prob, out_label


def calibrate_hybrid(policy: dict[str, ThresholdPolicy], negative_scores, target_far: float = DEFAULT_FAR,
                     max_iter: int = 50) -> dict[str, ThresholdPolicy]:
    """Raise the three thresholds together until the OR rule's FAR is at most ``target_far``.

    ``negative_scores`` has one row per validation negative and one column per
    model (PC, SC1, SC2). Thresholds move along a shared per-model FAR level
    ``f``: each is the single-model calibration of its column at ``f``; ``f``
    is found by bisection.
    """
    N = np.asarray(negative_scores, dtype=float)
    if N.ndim != 2 or N.shape[1] != 3 or len(N) == 0:
        raise EnsembleError("need an (n, 3) array of validation negative scores")
    if target_far < 0:
        raise EnsembleError("target FAR unreachable")

    def hybrid_far(thr):
        return float(np.count_nonzero((N > thr[None, :]).any(axis=1))) / len(N)

    current = np.array([policy[k].p_thres for k in KINDS])
    if hybrid_far(current) <= target_far:
        return dict(policy)

    def at(level):
        return [calibrate_threshold(N[:, j], level) for j in range(3)]

    lo, hi = 0.0, max(p.target_far for p in policy.values())
    best = at(lo)
    if hybrid_far(np.array([p.p_thres for p in best])) > target_far:
        raise EnsembleError("target FAR unreachable")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        cand = at(mid)
        if hybrid_far(np.array([p.p_thres for p in cand])) <= target_far:
            lo, best = mid, cand
        else:
            hi = mid
        if hi - lo < 1.0 / (4 * len(N)):
            break
    thr = np.array([p.p_thres for p in best])
    achieved = hybrid_far(thr)
    return {k: replace(p, target_far=target_far, achieved_far=achieved) for k, p in zip(KINDS, best)}
