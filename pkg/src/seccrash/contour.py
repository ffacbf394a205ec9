"""Impact regions of crashes on the speed contour and primary/secondary pairing."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from .corpus import (
    BINS_PER_DAY,
    ENVELOPE_MILES,
    ENVELOPE_SECONDS,
    BaselineTable,
    Corpus,
    CrashRecord,
    corpus_baseline,
    format_ts,
)

log = logging.getLogger(__name__)

ALPHA = 0.25
PRIMARY, SECONDARY, NORMAL = "Primary", "Secondary", "Normal"
_EIGHT = np.ones((3, 3), dtype=bool)


def speed_delta(speed, mean, std, alpha: float = ALPHA):
    """Speed minus the congestion threshold ``mean - alpha * std``; negative means impacted."""
    return speed - (mean - alpha * std)


@dataclass(frozen=True)
class ImpactCell:
    segment_id: str
    bin_start: int
    delta_speed: float


@dataclass
class ImpactRegion:
    primary_crash_id: str
    cells: list[ImpactCell]
    envelope: tuple[float, int] = (ENVELOPE_MILES, ENVELOPE_SECONDS)

    def cell_keys(self) -> set[tuple[str, int]]:
        return {(c.segment_id, c.bin_start) for c in self.cells}


@dataclass(frozen=True)
class CrashClassification:
    crash_id: str
    crash_class: str
    paired_primary_id: str | None = None
    segment_gap: int | None = None
    has_secondary: bool = False


@dataclass
class ClassificationReport:
    classifications: list[CrashClassification]
    regions: dict[str, ImpactRegion] = field(repr=False)

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(x.crash_class for x in self.classifications)
        return {k: c.get(k, 0) for k in (PRIMARY, SECONDARY, NORMAL)}

    @property
    def secondary_ratio(self) -> float:
        n = len(self.classifications)
        return self.counts[SECONDARY] / n if n else 0.0

    def gap_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(x.segment_gap for x in self.classifications if x.segment_gap is not None).items()))

    def by_id(self) -> dict[str, CrashClassification]:
        return {c.crash_id: c for c in self.classifications}

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(
            {
                "crash_id": [c.crash_id for c in self.classifications],
                "class": [c.crash_class for c in self.classifications],
                "paired_primary_id": [c.paired_primary_id or "" for c in self.classifications],
                "segment_gap": ["" if c.segment_gap is None else c.segment_gap for c in self.classifications],
            }
        ).to_csv(directory / "classifications.csv", index=False)
        rows = [
            (pid, cell.segment_id, format_ts(cell.bin_start), repr(float(cell.delta_speed)))
            for pid, region in self.regions.items()
            for cell in region.cells
        ]
        pd.DataFrame(rows, columns=["primary_crash_id", "segment_id", "bin_start", "delta_speed"]).to_csv(
            directory / "cells.csv", index=False
        )


def envelope_cells(corpus: Corpus, crash: CrashRecord):
    """Segment chain (crash segment first) and local bin range covered by the static envelope."""
    seg = corpus.crash_segment(crash)
    chain = corpus.topology.upstream_chain(seg)
    b0 = corpus.grid.bin_of(crash.timestamp)
    b1 = min(corpus.grid.bin_of(crash.timestamp + ENVELOPE_SECONDS - 1), corpus.grid.n_bins - 1)
    return chain, b0, b1


def impact_region(crash: CrashRecord, corpus: Corpus, baseline: BaselineTable, alpha: float = ALPHA) -> ImpactRegion:
    """Impacted cells in the envelope that are 8-connected to the crash cell.

    The crash cell seeds the fill even when it is not impacted itself (a crash
    late in its bin can leave that bin above threshold); it only joins the
    region when impacted.
    """
    chain, b0, b1 = envelope_cells(corpus, crash)
    seg = chain[0]
    if not baseline.has(seg, b0 % BINS_PER_DAY):
        log.info("crash %s: no baseline at its segment and slot, region empty", crash.crash_id)
        return ImpactRegion(crash.crash_id, [])
    bins = np.arange(b0, b1 + 1)
    slots = bins % BINS_PER_DAY
    speed = corpus.grid.values[np.asarray(chain)[:, None], bins[None, :], 0]
    mean = baseline.mean_speed[chain][:, slots]
    std = baseline.std_speed[chain][:, slots]
    delta = speed_delta(speed, mean, std, alpha)
    impacted = delta < 0  # NaN (missing bin or baseline) compares False
    seeds = impacted.copy()
    seeds[0, 0] = True
    labels, _ = ndimage.label(seeds, structure=_EIGHT)
    member = (labels == labels[0, 0]) & impacted
    geometry = corpus.geometry
    cells = [
        ImpactCell(geometry[chain[r]].segment_id, corpus.grid.bin_start(bins[k]), float(delta[r, k]))
        for r, k in zip(*np.nonzero(member))
    ]
    return ImpactRegion(crash.crash_id, cells)


def pair_secondaries(crashes, regions: dict[str, ImpactRegion], corpus: Corpus) -> list[CrashClassification]:
    """Pair each crash with the earliest earlier crash whose region holds its cell.

    A crash paired to an earlier one is Secondary even if later crashes pair
    to it in turn; ``has_secondary`` records that second role.
    """
    crashes = sorted(crashes, key=lambda c: (c.timestamp, c.crash_id))
    holders: dict[tuple[str, int], list[int]] = {}
    for i, c in enumerate(crashes):
        region = regions.get(c.crash_id)
        if region is None:
            continue
        for key in region.cell_keys():
            holders.setdefault(key, []).append(i)
    pos = corpus.topology.position
    paired: dict[int, int] = {}
    for j, c in enumerate(crashes):
        key = (c.segment_id, corpus.grid.bin_start(corpus.grid.bin_of(c.timestamp)))
        earlier = [i for i in holders.get(key, ()) if crashes[i].timestamp < c.timestamp]
        if earlier:
            paired[j] = min(earlier)
    parents = set(paired.values())
    out = []
    for j, c in enumerate(crashes):
        if j in paired:
            i = paired[j]
            gap = int(pos[corpus.seg(crashes[i].segment_id)] - pos[corpus.seg(c.segment_id)])
            out.append(CrashClassification(c.crash_id, SECONDARY, crashes[i].crash_id, gap, j in parents))
        elif j in parents:
            out.append(CrashClassification(c.crash_id, PRIMARY, None, None, True))
        else:
            out.append(CrashClassification(c.crash_id, NORMAL))
    return out


def classify_corpus(corpus: Corpus, baseline: BaselineTable | None = None, alpha: float = ALPHA) -> ClassificationReport:
    if baseline is None:
        baseline = corpus_baseline(corpus)
    regions = {c.crash_id: impact_region(c, corpus, baseline, alpha) for c in corpus.crashes}
    classes = pair_secondaries(corpus.crashes, regions, corpus)
    report = ClassificationReport(classes, {k: v for k, v in regions.items() if v.cells})
    log.info("classified %d crashes: %s", len(classes), report.counts)
    return report


def load_classifications(path) -> list[CrashClassification]:
    path = Path(path)
    if path.is_dir():
        path = path / "classifications.csv"
    frame = pd.read_csv(path, dtype=str, keep_default_na=False).rename(columns={"class": "crash_class"})
    out = []
    parents = set(frame["paired_primary_id"]) - {""}
    for row in frame.itertuples(index=False):
        out.append(
            CrashClassification(
                row.crash_id,
                row.crash_class,
                row.paired_primary_id or None,
                int(row.segment_gap) if row.segment_gap != "" else None,
                row.crash_id in parents,
            )
        )
    return out

