"""Independent brute-force reimplementations used as test oracles."""
from __future__ import annotations

from collections import deque
from itertools import product

import numpy as np
import pandas as pd

from builders import T0

ALPHA = 0.25


def _seconds(col: pd.Series) -> np.ndarray:
    return (pd.to_datetime(col, utc=True).astype("int64") // 10**9).to_numpy()


def brute_force_contour(traffic: pd.DataFrame, crashes: pd.DataFrame, geometry: pd.DataFrame,
                        mean: np.ndarray, std: np.ndarray, n_bins: int, t0: int = T0):
    """Cell-by-cell impact test, breadth-first flood fill and pairing on one corridor.

    Returns ``(regions, classes)``: regions map crash id to a set of
    (segment_id, bin_start); classes map crash id to (class, paired id, gap).
    """
    geo = geometry.sort_values("order_index").reset_index(drop=True)
    ids = list(geo["segment_id"])
    pos = {sid: k for k, sid in enumerate(ids)}
    miles = dict(zip(ids, geo["miles"].astype(float)))

    speed = {}
    ts = _seconds(traffic["timestamp_utc"])
    for sid, t, v in zip(traffic["segment_id"], ts, traffic["speed_mph"].astype(float)):
        speed.setdefault((sid, t - t % 300), []).append(v)
    speed = {k: sum(v) / len(v) for k, v in speed.items()}

    def impacted(sid, b):
        if (sid, b) not in speed:
            return False
        slot = ((b - t0) // 300) % 288
        return speed[(sid, b)] - (mean[pos[sid], slot] - ALPHA * std[pos[sid], slot]) < 0

    c_ts = _seconds(crashes["timestamp_utc"])
    order = sorted(range(len(crashes)), key=lambda i: (c_ts[i], crashes["crash_id"].iloc[i]))
    regions = {}
    for i in order:
        cid, sid, t = crashes["crash_id"].iloc[i], crashes["segment_id"].iloc[i], int(c_ts[i])
        chain = [sid]
        total = miles[sid]
        k = pos[sid]
        while k > 0 and total + miles[ids[k - 1]] <= 2.0 + 1e-9:
            total += miles[ids[k - 1]]
            k -= 1
            chain.append(ids[k])
        first = t - t % 300
        last = min(t + 7199 - (t + 7199) % 300, t0 + (n_bins - 1) * 300)
        env = {(s, b) for s in chain for b in range(first, last + 1, 300)}
        anchor = (sid, first)
        seen = {anchor}
        queue = deque([anchor])
        while queue:
            s, b = queue.popleft()
            for ds, db in product((-1, 0, 1), (-300, 0, 300)):
                p = pos[s] + ds
                if not 0 <= p < len(ids):
                    continue
                nb = (ids[p], b + db)
                if nb in env and nb not in seen and impacted(*nb):
                    seen.add(nb)
                    queue.append(nb)
        regions[cid] = {c for c in seen if impacted(*c)}

    classes = {}
    paired = {}
    for jj, j in enumerate(order):
        cid, sid, t = crashes["crash_id"].iloc[j], crashes["segment_id"].iloc[j], int(c_ts[j])
        cell = (sid, t - t % 300)
        for i in order[:jj]:
            if c_ts[i] < t and cell in regions[crashes["crash_id"].iloc[i]]:
                paired[cid] = crashes["crash_id"].iloc[i]
                break
    parents = set(paired.values())
    seg_of = dict(zip(crashes["crash_id"], crashes["segment_id"]))
    for cid in crashes["crash_id"]:
        if cid in paired:
            p = paired[cid]
            classes[cid] = ("Secondary", p, pos[seg_of[p]] - pos[seg_of[cid]])
        elif cid in parents:
            classes[cid] = ("Primary", None, None)
        else:
            classes[cid] = ("Normal", None, None)
    return {k: v for k, v in regions.items() if v}, classes


def random_contour_case(rng: np.random.Generator, n_seg: int | None = None):
    """A random one-day corridor with congestion wedges, detached pockets and gaps.

    Returns ``(speed, missing, crashes, mean, std, miles)``.
    """
    S = int(n_seg or rng.integers(4, 21))
    T = 288
    slot = np.arange(T)
    mean = 62 + 4 * np.sin(slot / 288 * 2 * np.pi)[None, :] + rng.uniform(-3, 3, (S, 1))
    std = rng.uniform(1.5, 8.0, (S, T))
    speed = mean + rng.normal(0, 1, (S, T)) * std * 0.4
    miles = np.round(rng.uniform(0.15, 0.8, S), 3)
    crashes = []
    n = int(rng.integers(6, 16))
    for k in range(n):
        s = int(rng.integers(0, S))
        b = int(rng.integers(0, T))
        t = T0 + 300 * b + int(rng.integers(0, 300))
        crashes.append((f"X{k:03d}", s, t))
        if rng.random() < 0.7:  # backward wedge
            reach = int(rng.integers(1, 8))
            dur = int(rng.integers(3, 30))
            depth = rng.uniform(8, 30)
            for g in range(reach):
                if s - g < 0:
                    break
                lo = b + g // 2
                speed[s - g, lo : min(T, lo + dur)] -= depth
            if rng.random() < 0.6:  # a later crash inside the wedge
                g = int(rng.integers(0, reach))
                tb = b + g // 2 + int(rng.integers(0, max(dur, 1)))
                if s - g >= 0 and tb < T:
                    crashes.append((f"Y{k:03d}", s - g, T0 + 300 * tb + int(rng.integers(0, 300))))
    for _ in range(int(rng.integers(0, 5))):  # detached pockets
        s, b = int(rng.integers(0, S)), int(rng.integers(0, T - 3))
        speed[s, b : b + 3] -= 25
    exact = rng.random((S, T)) < 0.02  # cells sitting exactly at the threshold
    speed = np.where(exact, mean - ALPHA * std, speed)
    speed = np.clip(speed, 1.0, None)
    missing = rng.random((S, T)) < 0.03
    return speed, missing, crashes, mean, std, miles


def pair_count_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))
