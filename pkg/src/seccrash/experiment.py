"""End-to-end experiment: datasets, coordinated splits, ensembles, thresholds and the hybrid.

Splits are coordinated across the three models so that a secondary crash
held out from SC1 is also held out from SC2, and the PC vectors used to
score the held-out cases (their primaries and SC1 control crashes) are held
out from PC training. Component thresholds are calibrated on each model's
held-out negatives; the hybrid thresholds on the hybrid set's negatives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import learners
from .corpus import Corpus
from .ensemble import (
    DEFAULT_FAR,
    KINDS,
    EnsembleModel,
    ModelBundle,
    ThresholdPolicy,
    calibrate_hybrid,
    calibrate_threshold,
    fit_ensemble,
    hybrid_predict,
)
from .evaluation import MetricsReport, auc, metrics_at_threshold
from .features import FeatureExtractor, feature_group
from .sampling import (
    PC,
    SC1,
    SC2,
    Dataset,
    DatasetSplit,
    Sample,
    SampleMeta,
    build_pc_dataset,
    build_sc1_dataset,
    build_sc2_dataset,
    read_dataset,
    split,
    write_dataset,
)

log = logging.getLogger(__name__)

FEATURE_GROUPS = {
    "TF": ("traffic",),
    "TF+Weather": ("traffic", "weather"),
    "TF+Geometrics": ("traffic", "geometry"),
    "All": ("traffic", "weather", "geometry"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    window_count: int = 4
    ratio: int = 4
    split_fraction: float = 0.7
    seed: int = 0
    strategy: str = "auto"
    members: tuple[str, ...] = learners.DEFAULT_MEMBERS
    target_far: float = DEFAULT_FAR
    feature_set: str = "All"
    kinds: tuple[str, ...] = KINDS

    def with_(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


@dataclass
class ExperimentData:
    datasets: dict[str, Dataset]
    splits: dict[str, DatasetSplit]
    window_count: int
    corpus: Corpus | None = None
    extractor: FeatureExtractor | None = None


def coordinated_splits(datasets: dict[str, Dataset], fraction: float, seed: int) -> dict[str, DatasetSplit]:
    splits = {}
    held_secondaries: set[str] = set()
    held_crashes: set[str] = set()
    if SC1 in datasets:
        s1 = split(datasets[SC1].samples, fraction, seed)
        splits[SC1] = s1
        for s in s1.test:
            if s.label == 1:
                held_secondaries.add(s.meta.crash_id)
                held_crashes.add(s.meta.primary_id)
            else:
                held_crashes.add(s.meta.crash_id)
    if SC2 in datasets:
        s2 = split(datasets[SC2].samples, fraction, seed,
                   forced_test=lambda s: s.label == 1 and s.meta.crash_id in held_secondaries)
        splits[SC2] = s2
        held_crashes.update(s.meta.primary_id for s in s2.test if s.label == 1)
    if PC in datasets:
        splits[PC] = split(datasets[PC].samples, fraction, seed, forced_test=lambda s: s.meta.crash_id in held_crashes)
    return splits


def prepare(corpus: Corpus, classifications, config: ExperimentConfig = ExperimentConfig(),
            extractor: FeatureExtractor | None = None) -> ExperimentData:
    """Build the datasets a config needs and split them."""
    ex = extractor or FeatureExtractor(corpus)
    classifications = list(classifications)
    datasets = {}
    if PC in config.kinds:
        datasets[PC] = build_pc_dataset(classifications, corpus, extractor=ex)
    if SC1 in config.kinds:
        datasets[SC1] = build_sc1_dataset(classifications, corpus, config.ratio, config.seed, config.window_count, ex)
    if SC2 in config.kinds:
        datasets[SC2] = build_sc2_dataset(classifications, corpus, config.ratio, config.seed, config.window_count, ex)
    return ExperimentData(datasets, coordinated_splits(datasets, config.split_fraction, config.seed),
                          config.window_count, corpus, ex)


def from_files(directory, kinds=KINDS) -> ExperimentData:
    """Datasets and their recorded splits as written by ``write_datasets``."""
    datasets, splits = {}, {}
    for kind in kinds:
        ds, recorded = read_dataset(directory, kind)
        if not recorded:
            raise ValueError(f"{kind} dataset has no recorded split")
        datasets[kind] = ds
        splits[kind] = DatasetSplit([s for s in ds.samples if recorded[s.sample_id] == "train"],
                                    [s for s in ds.samples if recorded[s.sample_id] == "test"], -1)
    W = _window_count(datasets)
    return ExperimentData(datasets, splits, W)


def _window_count(datasets) -> int:
    from .features import parse_feature_name

    for kind in (SC1, SC2):
        if kind in datasets:
            return max(parse_feature_name(n)[2] or 0 for n in datasets[kind].feature_names)
    return 1


def write_datasets(data: ExperimentData, directory) -> None:
    for kind, ds in data.datasets.items():
        write_dataset(ds, directory, data.splits[kind])


def restrict(data: ExperimentData, keep: Callable[[SampleMeta], bool]) -> ExperimentData:
    """Same data limited to samples whose metadata passes ``keep`` (splits preserved)."""
    def sub(samples):
        return [s for s in samples if keep(s.meta)]

    datasets = {k: d.subset(sub(d.samples)) for k, d in data.datasets.items()}
    splits = {k: replace(sp, train=sub(sp.train), test=sub(sp.test)) for k, sp in data.splits.items()}
    return replace(data, datasets=datasets, splits=splits)


def column_mask(names, feature_set: str) -> np.ndarray:
    if feature_set not in FEATURE_GROUPS:
        raise ValueError(f"unknown feature set {feature_set!r}")
    groups = FEATURE_GROUPS[feature_set]
    mask = np.array([feature_group(n) in groups for n in names])
    if not mask.any():
        raise ValueError("feature mask selects no columns")
    return mask


def select(X: np.ndarray, names, wanted) -> np.ndarray:
    """Columns of ``X`` (named ``names``) in the order of ``wanted``."""
    index = {n: i for i, n in enumerate(names)}
    return np.asarray(X)[:, [index[n] for n in wanted]]


@dataclass
class KindResult:
    kind: str
    model: EnsembleModel
    policy: ThresholdPolicy
    auc: float
    member_auc: dict[str, float]
    metrics: MetricsReport
    test_ids: list[str]
    test_scores: np.ndarray
    test_labels: np.ndarray


@dataclass
class HybridResult:
    sample_ids: list[str]
    labels: np.ndarray
    scores: np.ndarray  # columns PC, SC1, SC2
    component_thresholds: dict[str, ThresholdPolicy]
    hybrid_thresholds: dict[str, ThresholdPolicy]
    auc: float
    component_auc: dict[str, float]
    metrics: MetricsReport  # at the hybrid-calibrated thresholds
    component_metrics: dict[str, MetricsReport]  # each model alone, own thresholds
    uncalibrated_metrics: MetricsReport  # OR rule at the component thresholds

    @property
    def prob(self) -> np.ndarray:
        return self.scores.max(axis=1)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    kinds: dict[str, KindResult]
    bundle: ModelBundle | None = None
    hybrid: HybridResult | None = None
    notes: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {k: {"auc": r.auc, "member_auc": r.member_auc, **r.metrics.to_json()} for k, r in self.kinds.items()}
        if self.hybrid:
            out["Hybrid"] = {"auc": self.hybrid.auc, "n": len(self.hybrid.labels),
                             "component_auc": self.hybrid.component_auc, **self.hybrid.metrics.to_json()}
        return out


def train_kind(dataset: Dataset, sp: DatasetSplit, config: ExperimentConfig) -> KindResult:
    mask = column_mask(dataset.feature_names, config.feature_set)
    names = [n for n, m in zip(dataset.feature_names, mask) if m]
    train, test = dataset.subset(sp.train), dataset.subset(sp.test)
    Xtr, Xte = train.X[:, mask], test.X[:, mask]
    model = fit_ensemble(Xtr, train.y, names, [s.group for s in train.samples], config.strategy,
                         config.members, config.seed)
    P = model.member_proba(Xte)
    scores = model.combine(P)
    yte = test.y
    policy = calibrate_threshold(scores[yte == 0], config.target_far)
    member_auc = {f"{i}:{m.kind}": auc(P[:, i], yte) for i, m in enumerate(model.members)}
    return KindResult(dataset.kind, model, policy, auc(scores, yte), member_auc,
                      metrics_at_threshold(scores, yte, policy.p_thres), [s.sample_id for s in test.samples],
                      scores, yte)


def hybrid_set(data: ExperimentData, models: dict[str, EnsembleModel]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Held-out secondaries found in both SC test splits, plus all SC test controls, scored by all three models.

    The PC column scores the crash behind each row: the primary for a
    positive, the control crash for an SC1 control. SC2 controls are
    crash-free instants; the PC model is only triggered by a crash, so their
    PC score is 0. Rows whose crash has no PC vector are dropped.
    """
    pc_data = data.datasets[PC]
    pc_rows = {s.meta.crash_id: s.features for s in pc_data.samples}
    test1 = data.datasets[SC1].subset(data.splits[SC1].test).samples
    test2 = data.datasets[SC2].subset(data.splits[SC2].test).samples
    pos2 = {s.meta.crash_id for s in test2 if s.label == 1}
    rows: list[Sample] = [s for s in test1 if s.label == 1 and s.meta.crash_id in pos2]
    rows += [s for s in test1 if s.label == 0] + [s for s in test2 if s.label == 0]
    ids, labels, st, pc, fired = [], [], [], [], []
    for s in rows:
        crash = s.meta.primary_id if s.label == 1 else s.meta.crash_id
        if crash and crash not in pc_rows:
            continue
        ids.append(s.sample_id)
        labels.append(s.label)
        st.append(s.features)
        fired.append(bool(crash))
        pc.append(pc_rows[crash] if crash else np.zeros(len(pc_data.feature_names)))
    st, pc, fired = np.vstack(st), np.vstack(pc), np.array(fired)
    st_names = data.datasets[SC1].feature_names
    pc_score = np.zeros(len(ids))
    if fired.any():
        pc_model = models[PC]
        pc_score[fired] = pc_model.predict_proba(select(pc[fired], pc_data.feature_names, pc_model.feature_names))
    cols = [
        pc_score,
        models[SC1].predict_proba(select(st, st_names, models[SC1].feature_names)),
        models[SC2].predict_proba(select(st, st_names, models[SC2].feature_names)),
    ]
    return ids, np.asarray(labels, dtype=np.int64), np.column_stack(cols)


def evaluate_hybrid(ids, labels, scores, thresholds: dict[str, ThresholdPolicy], target_far: float) -> HybridResult:
    neg = scores[labels == 0]
    tuned = calibrate_hybrid(thresholds, neg, target_far)
    prob, label = hybrid_predict(scores[:, 0], scores[:, 1], scores[:, 2], tuned)
    tuned_thr = min(p.p_thres for p in tuned.values())
    # the OR label is not a single cut on the max score, so report counts from the label directly
    metrics = _label_metrics(label, labels, prob, tuned_thr)
    _, raw_label = hybrid_predict(scores[:, 0], scores[:, 1], scores[:, 2], thresholds)
    comp = {k: metrics_at_threshold(scores[:, j], labels, thresholds[k].p_thres) for j, k in enumerate(KINDS)}
    return HybridResult(
        list(ids), labels, scores, dict(thresholds), tuned, auc(prob, labels),
        {k: auc(scores[:, j], labels) for j, k in enumerate(KINDS)}, metrics, comp,
        _label_metrics(raw_label, labels, prob, float("nan")),
    )


def _label_metrics(pred, labels, prob, threshold) -> MetricsReport:
    pred = np.asarray(pred).astype(bool)
    y = np.asarray(labels)
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return MetricsReport((tp + tn) / len(y), tp / max(tp + fn, 1), fp / max(fp + tn, 1), auc(prob, y),
                         tp, fp, tn, fn, threshold)


def run_experiment(data: ExperimentData, config: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    if config.window_count != data.window_count:
        raise ValueError("data was prepared for a different window count")
    kinds = {}
    for kind in config.kinds:
        if kind not in data.datasets:
            raise ValueError(f"{kind} dataset not prepared")
        kinds[kind] = train_kind(data.datasets[kind], data.splits[kind], config)
        log.info("%s test AUC %.3f", kind, kinds[kind].auc)
    result = ExperimentResult(config, kinds)
    if set(KINDS) <= set(kinds):
        thresholds = {k: kinds[k].policy for k in KINDS}
        ids, labels, scores = hybrid_set(data, {k: kinds[k].model for k in KINDS})
        if 0 < labels.sum() < len(labels):
            result.hybrid = evaluate_hybrid(ids, labels, scores, thresholds, config.target_far)
        else:
            log.warning("hybrid evaluation set lacks one class; skipped")
        result.bundle = ModelBundle(
            kinds[PC].model, kinds[SC1].model, kinds[SC2].model, thresholds,
            result.hybrid.hybrid_thresholds if result.hybrid else None, config.target_far, config.window_count,
        )
    return result


def evaluate_bundle(data: ExperimentData, bundle: ModelBundle) -> tuple[dict[str, MetricsReport], dict]:
    """Metrics of a saved bundle on the held-out split, with the thresholds it carries.

    Returns the reports and the raw (scores, labels) per model kind, Hybrid
    included when all three datasets are present.
    """
    reports, curves = {}, {}
    models = {k: bundle.model(k) for k in KINDS}
    for kind, ds in data.datasets.items():
        test = ds.subset(data.splits[kind].test)
        model = models[kind]
        scores = model.predict_proba(select(test.X, ds.feature_names, model.feature_names))
        reports[kind] = metrics_at_threshold(scores, test.y, bundle.thresholds[kind].p_thres)
        curves[kind] = (scores, test.y)
    if set(KINDS) <= set(data.datasets):
        ids, labels, S = hybrid_set(data, models)
        prob, label = hybrid_predict(S[:, 0], S[:, 1], S[:, 2], bundle)
        reports["Hybrid"] = _label_metrics(label, labels, prob, min(p.p_thres for p in bundle.hybrid_policy().values()))
        curves["Hybrid"] = (prob, labels)
    return reports, curves
