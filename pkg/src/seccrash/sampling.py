"""Matched case-control datasets for the PC, SC1 and SC2 models, and group-aware splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .contour import NORMAL, PRIMARY, SECONDARY, CrashClassification
from .corpus import DAY_SECONDS, ENVELOPE_SECONDS, Corpus, hour_of, weekday_of
from .features import ExtractionRejected, FeatureExtractor, pc_feature_names, st_feature_names

log = logging.getLogger(__name__)

PC, SC1, SC2 = "PC", "SC1", "SC2"
WEEK_SECONDS = 7 * DAY_SECONDS


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SampleMeta:
    freeway: str
    weekday_flag: bool
    hour_of_day: int
    matched_case_id: str | None = None
    case_id: str = ""
    crash_id: str | None = None  # crash the vector is anchored on, if any
    primary_id: str | None = None
    sc_segment: int = -1
    pc_segment: int = -1
    reference_time: int = 0
    time_gap: int = 0  # seconds from the (pseudo) primary to the reference instant


@dataclass(frozen=True)
class Sample:
    sample_id: str
    model_kind: str
    label: int
    features: np.ndarray = field(repr=False)
    meta: SampleMeta
    group: str = ""


@dataclass
class Dataset:
    kind: str
    feature_names: tuple[str, ...]
    samples: list[Sample]
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def X(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.feature_names)))
        return np.vstack([s.features for s in self.samples])

    @property
    def y(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, samples: Sequence[Sample]) -> "Dataset":
        return Dataset(self.kind, self.feature_names, list(samples))

    def counts(self) -> tuple[int, int]:
        y = self.y
        return int(y.sum()), int(len(y) - y.sum())


@dataclass
class DatasetSplit:
    train: list[Sample]
    test: list[Sample]
    seed: int
    split_fraction: float = 0.7


def _meta(corpus: Corpus, seg: int, ts: int, **kw) -> SampleMeta:
    return SampleMeta(
        freeway=corpus.geometry[seg].freeway,
        weekday_flag=weekday_of(ts) < 5,
        hour_of_day=hour_of(ts),
        **kw,
    )


def _extractor(corpus: Corpus, extractor: FeatureExtractor | None) -> FeatureExtractor:
    return extractor if extractor is not None else FeatureExtractor(corpus)


def build_pc_dataset(classifications: Sequence[CrashClassification], corpus: Corpus,
                     extractor: FeatureExtractor | None = None) -> Dataset:
    """Primary crashes (label 1) against all Normal crashes (label 0)."""
    ex = _extractor(corpus, extractor)
    crashes = corpus.crash_by_id()
    samples, rejected = [], 0
    n_pos = 0
    for c in classifications:
        if c.crash_class not in (PRIMARY, NORMAL):
            continue
        crash = crashes[c.crash_id]
        seg = corpus.crash_segment(crash)
        try:
            vec = ex.pc_vector(seg, crash.timestamp)
        except ExtractionRejected as err:
            rejected += 1
            log.debug("PC %s rejected: %s", c.crash_id, err)
            continue
        label = int(c.crash_class == PRIMARY)
        n_pos += label
        sid = f"PC-{c.crash_id}"
        meta = _meta(corpus, seg, crash.timestamp, case_id=sid, crash_id=c.crash_id,
                     sc_segment=seg, pc_segment=seg, reference_time=crash.timestamp)
        samples.append(Sample(sid, PC, label, vec.values, meta, group=sid))
    if n_pos == 0:
        raise DatasetError("no primary crashes with usable pre-crash data: identify pairs first or use a larger corpus")
    return Dataset(PC, pc_feature_names(), samples, rejected)


def _secondary_cases(classifications, corpus):
    crashes = corpus.crash_by_id()
    for c in classifications:
        if c.crash_class == SECONDARY and c.paired_primary_id is not None:
            yield c, crashes[c.crash_id], crashes[c.paired_primary_id]


def _group_union(samples: list[Sample], shared: dict[str, list[str]]) -> list[Sample]:
    """Merge case groups that share a control source (union-find over case ids)."""
    parent: dict[str, str] = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for cases in shared.values():
        for other in cases[1:]:
            a, b = find(cases[0]), find(other)
            if a != b:
                parent[max(a, b)] = min(a, b)
    return [replace(s, group=find(s.group)) for s in samples]


def build_sc1_dataset(classifications, corpus: Corpus, ratio: int = 4, seed: int = 0, window_count: int = 4,
                      extractor: FeatureExtractor | None = None) -> Dataset:
    """Secondary crashes against Normal crashes at the primary's segment and clock hour.

    A control's windows are referenced at (control time + the case's
    primary-to-secondary delay) on the segment lying the case's segment gap
    upstream of the control.
    """
    ex = _extractor(corpus, extractor)
    topo = corpus.topology
    rng = np.random.default_rng([seed, 11])
    normals: dict[tuple[int, int], list] = {}
    by_id = corpus.crash_by_id()
    for c in classifications:
        if c.crash_class == NORMAL:
            crash = by_id[c.crash_id]
            normals.setdefault((corpus.crash_segment(crash), hour_of(crash.timestamp)), []).append(crash)
    samples, rejected = [], 0
    shared: dict[str, list[str]] = {}
    for cls, sec, prim in _secondary_cases(classifications, corpus):
        sc_seg, pc_seg = corpus.crash_segment(sec), corpus.crash_segment(prim)
        gap = topo.gap(sc_seg, pc_seg)
        delay = sec.timestamp - prim.timestamp
        case_id = f"SC1-{sec.crash_id}"
        try:
            vec = ex.st_vector(sc_seg, pc_seg, sec.timestamp, window_count)
        except ExtractionRejected:
            rejected += 1
            continue
        samples.append(Sample(case_id, SC1, 1, vec.values,
                              _meta(corpus, sc_seg, sec.timestamp, case_id=case_id, crash_id=sec.crash_id,
                                    primary_id=prim.crash_id, sc_segment=sc_seg, pc_segment=pc_seg,
                                    reference_time=sec.timestamp, time_gap=delay), group=case_id))
        pool = [n for n in normals.get((pc_seg, hour_of(prim.timestamp)), ()) if n.timestamp + delay < corpus.t_end]
        chosen = 0
        for k in rng.permutation(len(pool)):
            if chosen >= ratio:
                break
            ctrl = pool[k]
            c_sc = topo.offset(pc_seg, -gap)
            ref = ctrl.timestamp + delay
            try:
                cvec = ex.st_vector(c_sc, pc_seg, ref, window_count)
            except ExtractionRejected:
                rejected += 1
                continue
            sid = f"{case_id}-{ctrl.crash_id}"
            samples.append(Sample(sid, SC1, 0, cvec.values,
                                  _meta(corpus, c_sc, ref, matched_case_id=case_id, case_id=case_id,
                                        crash_id=ctrl.crash_id, primary_id=ctrl.crash_id, sc_segment=c_sc,
                                        pc_segment=pc_seg, reference_time=ref, time_gap=delay), group=case_id))
            shared.setdefault(ctrl.crash_id, []).append(case_id)
            chosen += 1
        if chosen < ratio:
            log.debug("%s: %d of %d controls available", case_id, chosen, ratio)
        if chosen == 0:
            log.debug("%s: no eligible controls", case_id)
    _require_positives(samples, SC1)
    return Dataset(SC1, st_feature_names(window_count), _group_union(samples, shared), rejected)


class EnvelopeIndex:
    """Answers whether any crash envelope covers a segment near an instant."""

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self.times = np.array([c.timestamp for c in corpus.crashes], dtype=np.int64)
        topo = corpus.topology
        self.chains = [frozenset(topo.upstream_chain(corpus.crash_segment(c))) for c in corpus.crashes]

    def clear(self, seg: int, instant: int, window_count: int = 4) -> bool:
        """True if no crash within 2 h covers ``seg`` and the windows lie inside the corpus."""
        c = self.corpus
        if instant - 5 * 60 * (window_count + 2) < c.t0 or instant >= c.t_end:
            return False
        lo = np.searchsorted(self.times, instant - ENVELOPE_SECONDS, side="left")
        hi = np.searchsorted(self.times, instant + ENVELOPE_SECONDS, side="right")
        return not any(seg in self.chains[k] for k in range(lo, hi))


def sc2_control_eligible(corpus: Corpus, seg: int, instant: int, window_count: int = 4) -> bool:
    return EnvelopeIndex(corpus).clear(seg, instant, window_count)


def build_sc2_dataset(classifications, corpus: Corpus, ratio: int = 4, seed: int = 0, window_count: int = 4,
                      extractor: FeatureExtractor | None = None) -> Dataset:
    """Secondary crashes against crash-free instants at the same segment, clock time and weekday."""
    ex = _extractor(corpus, extractor)
    topo = corpus.topology
    rng = np.random.default_rng([seed, 12])
    envelopes = EnvelopeIndex(corpus)

    def eligible(seg, instant):
        return envelopes.clear(seg, instant, window_count)

    samples, rejected = [], 0
    for cls, sec, prim in _secondary_cases(classifications, corpus):
        sc_seg, pc_seg = corpus.crash_segment(sec), corpus.crash_segment(prim)
        delay = sec.timestamp - prim.timestamp
        case_id = f"SC2-{sec.crash_id}"
        try:
            vec = ex.st_vector(sc_seg, pc_seg, sec.timestamp, window_count)
        except ExtractionRejected:
            rejected += 1
            continue
        samples.append(Sample(case_id, SC2, 1, vec.values,
                              _meta(corpus, sc_seg, sec.timestamp, case_id=case_id, crash_id=sec.crash_id,
                                    primary_id=prim.crash_id, sc_segment=sc_seg, pc_segment=pc_seg,
                                    reference_time=sec.timestamp, time_gap=delay), group=case_id))
        weeks = (corpus.t_end - corpus.t0) // WEEK_SECONDS + 1
        offsets = [k for k in range(-weeks, weeks + 1) if k != 0]
        pool = [sec.timestamp + k * WEEK_SECONDS for k in offsets if eligible(sc_seg, sec.timestamp + k * WEEK_SECONDS)]
        chosen = 0
        for k in rng.permutation(len(pool)):
            if chosen >= ratio:
                break
            ref = int(pool[k])
            try:
                cvec = ex.st_vector(sc_seg, pc_seg, ref, window_count)
            except ExtractionRejected:
                rejected += 1
                continue
            sid = f"{case_id}-W{(ref - sec.timestamp) // WEEK_SECONDS:+d}"
            samples.append(Sample(sid, SC2, 0, cvec.values,
                                  _meta(corpus, sc_seg, ref, matched_case_id=case_id, case_id=case_id,
                                        sc_segment=sc_seg, pc_segment=pc_seg, reference_time=ref,
                                        time_gap=delay), group=case_id))
            chosen += 1
        if chosen == 0:
            log.debug("%s: no eligible controls", case_id)
    _require_positives(samples, SC2)
    return Dataset(SC2, st_feature_names(window_count), samples, rejected)


def _require_positives(samples, kind):
    cases = {s.group for s in samples if s.label == 1}
    matched = {s.meta.matched_case_id for s in samples if s.label == 0}
    lonely = sum(1 for s in samples if s.label == 1 and s.sample_id not in matched)
    if lonely:
        log.warning("%s: %d of %d cases have no eligible controls", kind, lonely, len(cases))
    if not any(s.label == 1 for s in samples):
        raise DatasetError(f"{kind}: no secondary crashes with usable windows")


def _group_order(groups: list[str], seed: int) -> list[int]:
    rng = np.random.default_rng([seed, 21])
    return list(rng.permutation(len(groups)))


def split(samples: Sequence[Sample], fraction: float = 0.7, seed: int = 0,
          forced_test: Callable[[Sample], bool] | None = None) -> DatasetSplit:
    """Stratified, group-aware random split.

    Whole case-control groups go to one side. Groups are visited in a seeded
    random order and each lands in train if that moves the train positive and
    negative counts closer to ``round(fraction * count)``. A group with any
    sample matching ``forced_test`` always goes to test.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    labels = np.array([s.label for s in samples])
    for value in (0, 1):
        if (labels == value).sum() < 2:
            raise DatasetError(f"label {value} has fewer than 2 samples")
    members: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        members.setdefault(s.group or s.sample_id, []).append(i)
    names = sorted(members)
    target_p = round(fraction * labels.sum())
    target_n = round(fraction * (len(labels) - labels.sum()))
    p = n = 0
    in_train = np.zeros(len(samples), dtype=bool)
    for g in _group_order(names, seed):
        idx = members[names[g]]
        if forced_test is not None and any(forced_test(samples[i]) for i in idx):
            continue
        gp = int(labels[idx].sum())
        gn = len(idx) - gp
        before = abs(target_p - p) + abs(target_n - n)
        after = abs(target_p - p - gp) + abs(target_n - n - gn)
        if after < before:
            in_train[idx] = True
            p += gp
            n += gn
    train = [s for s, t in zip(samples, in_train) if t]
    test = [s for s, t in zip(samples, in_train) if not t]
    return DatasetSplit(train, test, seed, fraction)


def filter_subgroup(samples: Sequence[Sample], predicate: Callable[[SampleMeta], bool]) -> list[Sample]:
    out = [s for s in samples if predicate(s.meta)]
    if not out:
        log.warning("subgroup filter selected no samples")
    return out


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_dataset(dataset: Dataset, directory, split_: DatasetSplit | None = None) -> None:
    """features.csv and samples.csv for one model kind (``<dir>/<kind>/``)."""
    directory = Path(directory) / dataset.kind
    directory.mkdir(parents=True, exist_ok=True)
    train_ids = {s.sample_id for s in split_.train} if split_ else None
    feat = pd.DataFrame(dataset.X, columns=list(dataset.feature_names))
    feat.insert(0, "model_kind", dataset.kind)
    feat.insert(0, "label", dataset.y)
    feat.insert(0, "sample_id", [s.sample_id for s in dataset.samples])
    feat.to_csv(directory / "features.csv", index=False, float_format="%.17g")
    meta = pd.DataFrame(
        {
            "sample_id": [s.sample_id for s in dataset.samples],
            "model_kind": dataset.kind,
            "label": dataset.y,
            "matched_case_id": [s.meta.matched_case_id or "" for s in dataset.samples],
            "freeway": [s.meta.freeway for s in dataset.samples],
            "weekday_flag": [s.meta.weekday_flag for s in dataset.samples],
            "hour_of_day": [s.meta.hour_of_day for s in dataset.samples],
            "group": [s.group for s in dataset.samples],
            "case_id": [s.meta.case_id for s in dataset.samples],
            "crash_id": [s.meta.crash_id or "" for s in dataset.samples],
            "primary_id": [s.meta.primary_id or "" for s in dataset.samples],
            "sc_segment": [s.meta.sc_segment for s in dataset.samples],
            "pc_segment": [s.meta.pc_segment for s in dataset.samples],
            "reference_time": [s.meta.reference_time for s in dataset.samples],
            "time_gap": [s.meta.time_gap for s in dataset.samples],
        }
    )
    if train_ids is not None:
        meta["split"] = ["train" if s.sample_id in train_ids else "test" for s in dataset.samples]
    meta.to_csv(directory / "samples.csv", index=False)


def read_dataset(directory, kind: str) -> tuple[Dataset, dict[str, str]]:
    """Inverse of ``write_dataset``; also returns the recorded split per sample id."""
    directory = Path(directory) / kind
    feat_path, meta_path = directory / "features.csv", directory / "samples.csv"
    for p in (feat_path, meta_path):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    feat = pd.read_csv(feat_path, float_precision="round_trip")
    meta = pd.read_csv(meta_path, dtype={"matched_case_id": str, "case_id": str, "crash_id": str, "primary_id": str},
                       keep_default_na=False)
    names = tuple(feat.columns[3:])
    X = feat.iloc[:, 3:].to_numpy(dtype=float)
    samples = []
    for i, row in enumerate(meta.itertuples(index=False)):
        m = SampleMeta(
            freeway=str(row.freeway),
            weekday_flag=str(row.weekday_flag) == "True",
            hour_of_day=int(row.hour_of_day),
            matched_case_id=row.matched_case_id or None,
            case_id=str(row.case_id),
            crash_id=row.crash_id or None,
            primary_id=row.primary_id or None,
            sc_segment=int(row.sc_segment),
            pc_segment=int(row.pc_segment),
            reference_time=int(row.reference_time),
            time_gap=int(row.time_gap),
        )
        samples.append(Sample(str(row.sample_id), kind, int(row.label), X[i], m, str(row.group)))
    splits = dict(zip(meta["sample_id"], meta["split"])) if "split" in meta.columns else {}
    return Dataset(kind, names, samples), splits
