"""CART-style trees on pre-binned features: single tree, random forest, gradient boosting.

Each feature is cut into at most 255 bins whose edges are observed training
values chosen by rank, so a split ``code <= k`` is the raw test ``x <= edge``.
Because edges are picked by rank, a strictly increasing transform of a
feature leaves every fitted tree unchanged up to the transformed thresholds.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .base import LearnerSpec, TrainedModel, check_training_data, logit, sigmoid

MAX_BINS = 255


def make_edges(X: np.ndarray, max_bins: int = MAX_BINS) -> list[np.ndarray]:
    edges = []
    n = len(X)
    for j in range(X.shape[1]):
        col = np.sort(X[:, j])
        uniq = np.unique(col)
        if len(uniq) <= max_bins:
            edges.append(uniq)
        else:
            pos = np.linspace(0, n - 1, max_bins).round().astype(np.int64)
            edges.append(np.unique(col[pos]))
    return edges


def encode(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    codes = np.empty(X.shape, dtype=np.uint8)
    for j, e in enumerate(edges):
        codes[:, j] = np.minimum(np.searchsorted(e, X[:, j], side="left"), 255)
    return codes


@njit(cache=True)
def _grow(codes, target, hess, weight, max_depth, min_leaf, min_split, max_features, lam, newton, seed):
    """Grow one tree; returns (feature, bin, left, right, value, n_nodes).

    Split gain is the weighted squared-error reduction of ``target``; leaves
    hold the weighted mean (``newton`` false) or sum(w*t) / (sum(w*h) + lam).
    """
    np.random.seed(seed)
    n, d = codes.shape
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full(max_nodes, -1, np.int32)
    tbin = np.zeros(max_nodes, np.int32)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    value = np.zeros(max_nodes)

    m = 0
    for i in range(n):
        if weight[i] > 0:
            m += 1
    idx = np.empty(m, np.int64)
    m = 0
    for i in range(n):
        if weight[i] > 0:
            idx[m] = i
            m += 1

    st_node = np.empty(max_nodes, np.int64)
    st_lo = np.empty(max_nodes, np.int64)
    st_hi = np.empty(max_nodes, np.int64)
    st_depth = np.empty(max_nodes, np.int64)
    sp = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = m
    st_depth[0] = 0
    sp = 1
    n_nodes = 1
    feats = np.arange(d)
    hw = np.zeros(256)
    hs = np.zeros(256)
    k_feat = min(max_features, d)

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]
        depth = st_depth[sp]
        W = 0.0
        S = 0.0
        H = 0.0
        SS = 0.0
        for p in range(lo, hi):
            i = idx[p]
            W += weight[i]
            S += weight[i] * target[i]
            H += weight[i] * hess[i]
            SS += weight[i] * target[i] * target[i]
        if newton:
            value[node] = S / (H + lam)
        else:
            value[node] = S / W if W > 0 else 0.0
        if depth >= max_depth or W < min_split or W < 2 * min_leaf:
            continue
        parent = S * S / W
        best_gain = 1e-9 * SS + 1e-300
        best_f = -1
        best_b = -1
        for k in range(k_feat):
            j = k + np.random.randint(d - k)
            tmp = feats[k]
            feats[k] = feats[j]
            feats[j] = tmp
        for k in range(k_feat):
            f = feats[k]
            hw[:] = 0.0
            hs[:] = 0.0
            top = 0
            for p in range(lo, hi):
                i = idx[p]
                b = codes[i, f]
                hw[b] += weight[i]
                hs[b] += weight[i] * target[i]
                if b > top:
                    top = b
            wl = 0.0
            sl = 0.0
            for b in range(top):
                wl += hw[b]
                sl += hs[b]
                if wl < min_leaf:
                    continue
                wr = W - wl
                if wr < min_leaf:
                    break
                sr = S - sl
                gain = sl * sl / wl + sr * sr / wr - parent
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
        if best_f < 0:
            continue
        # partition idx[lo:hi] on codes <= best_b
        a = lo
        z = hi - 1
        while a <= z:
            if codes[idx[a], best_f] <= best_b:
                a += 1
            else:
                tmp = idx[a]
                idx[a] = idx[z]
                idx[z] = tmp
                z -= 1
        feat[node] = best_f
        tbin[node] = best_b
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[sp] = n_nodes
        st_lo[sp] = lo
        st_hi[sp] = a
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = n_nodes + 1
        st_lo[sp] = a
        st_hi[sp] = hi
        st_depth[sp] = depth + 1
        sp += 1
        n_nodes += 2
    return feat, tbin, left, right, value, n_nodes


@njit(cache=True)
def _predict_forest(X, feat, thr, left, right, value):
    """Leaf value of every tree for every row: returns (n_rows, n_trees)."""
    n = X.shape[0]
    T = feat.shape[0]
    out = np.empty((n, T))
    for t in range(T):
        for i in range(n):
            node = 0
            while feat[t, node] >= 0:
                if X[i, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[i, t] = value[t, node]
    return out


@njit(cache=True)
def _predict_codes(codes, feat, tbin, left, right, value):
    n = codes.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feat[node] >= 0:
            if codes[i, feat[node]] <= tbin[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


class _Forest:
    """Accumulates grown trees into fixed-width arrays with raw thresholds."""

    def __init__(self, edges, max_depth):
        self.edges = edges
        self.width = 2 ** (max_depth + 1) - 1
        self.rows = {k: [] for k in ("feature", "threshold", "left", "right", "value")}

    def add(self, grown) -> None:
        feat, tbin, left, right, value, n_nodes = grown
        thr = np.zeros(self.width)
        for node in range(n_nodes):
            if feat[node] >= 0:
                thr[node] = self.edges[feat[node]][tbin[node]]
        self.rows["feature"].append(feat)
        self.rows["threshold"].append(thr)
        self.rows["left"].append(left)
        self.rows["right"].append(right)
        self.rows["value"].append(value)

    def arrays(self) -> dict:
        return {k: np.stack(v) for k, v in self.rows.items()}


def _forest_values(params: dict, X: np.ndarray) -> np.ndarray:
    return _predict_forest(
        np.ascontiguousarray(X, dtype=np.float64),
        params["feature"],
        params["threshold"],
        params["left"],
        params["right"],
        params["value"],
    )


def _resolve_max_features(value, d: int) -> int:
    if value in ("all", None):
        return d
    if value == "sqrt":
        return max(1, int(np.sqrt(d)))
    return max(1, min(int(value), d))


def _seeds(seed: int, n: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32) & 0x7FFFFFFF


def fit_tree(spec: LearnerSpec, X, y, feature_names) -> TrainedModel:
    X, y = check_training_data(X, y)
    hp = spec.params
    edges = make_edges(X)
    codes = encode(X, edges)
    forest = _Forest(edges, hp["max_depth"])
    ones = np.ones(len(y))
    forest.add(
        _grow(codes, y, ones, ones, hp["max_depth"], hp["min_samples_leaf"], hp["min_samples_split"],
              _resolve_max_features(hp["max_features"], X.shape[1]), 0.0, False, int(_seeds(spec.seed, 1)[0]))
    )
    return TrainedModel(spec, tuple(feature_names), forest.arrays())


def fit_forest(spec: LearnerSpec, X, y, feature_names) -> TrainedModel:
    X, y = check_training_data(X, y)
    hp = spec.params
    edges = make_edges(X)
    codes = encode(X, edges)
    forest = _Forest(edges, hp["max_depth"])
    n = len(y)
    rng = np.random.default_rng(spec.seed)
    seeds = _seeds(spec.seed, hp["n_estimators"])
    ones = np.ones(n)
    mf = _resolve_max_features(hp["max_features"], X.shape[1])
    for t in range(hp["n_estimators"]):
        weight = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
        forest.add(
            _grow(codes, y, ones, weight, hp["max_depth"], hp["min_samples_leaf"], hp["min_samples_split"],
                  mf, 0.0, False, int(seeds[t]))
        )
    return TrainedModel(spec, tuple(feature_names), forest.arrays())


def predict_tree_members(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Per-tree probabilities, shape (n_rows, n_trees)."""
    return _forest_values(model.params, X)


def predict_forest(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    return np.clip(predict_tree_members(model, X).mean(axis=1), 0.0, 1.0)


def fit_regression_tree(X, target, hess, max_depth, min_leaf=1, min_split=2, reg_lambda=1.0, seed=0):
    """One Newton-leaf regression tree on raw features; returns a predict function."""
    X = np.asarray(X, dtype=np.float64)
    edges = make_edges(X)
    codes = encode(X, edges)
    forest = _Forest(edges, max_depth)
    ones = np.ones(len(X))
    forest.add(_grow(codes, np.asarray(target, float), np.asarray(hess, float), ones, max_depth, min_leaf,
                     min_split, X.shape[1], reg_lambda, True, seed))
    params = forest.arrays()
    return lambda Z: _forest_values(params, Z)[:, 0]


def fit_boosting(spec: LearnerSpec, X, y, feature_names) -> TrainedModel:
    """Gradient boosting with logistic loss: each tree fits the residual ``y - p``
    by squared error and its leaves take a Newton step ``sum(r) / (sum(p(1-p)) + lambda)``."""
    X, y = check_training_data(X, y)
    hp = spec.params
    edges = make_edges(X)
    codes = encode(X, edges)
    forest = _Forest(edges, hp["max_depth"])
    base = logit(y.mean())
    F = np.full(len(y), base)
    ones = np.ones(len(y))
    lr = hp["learning_rate"]
    seeds = _seeds(spec.seed, hp["n_estimators"])
    for t in range(hp["n_estimators"]):
        p = sigmoid(F)
        grown = _grow(codes, y - p, p * (1 - p), ones, hp["max_depth"], hp["min_samples_leaf"],
                      hp["min_samples_split"], X.shape[1], hp["reg_lambda"], True, int(seeds[t]))
        forest.add(grown)
        F += lr * _predict_codes(codes, *grown[:5])
    params = forest.arrays()
    params["base_score"] = np.array([base])
    params["learning_rate"] = np.array([lr])
    return TrainedModel(spec, tuple(feature_names), params)


def boosting_raw(model: TrainedModel, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
    leaves = _forest_values(model.params, X)
    if n_trees is not None:
        leaves = leaves[:, :n_trees]
    return model.params["base_score"][0] + model.params["learning_rate"][0] * leaves.sum(axis=1)


def staged_raw(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Raw scores after 1..n trees, shape (n_trees, n_rows)."""
    leaves = _forest_values(model.params, X)
    return model.params["base_score"][0] + model.params["learning_rate"][0] * np.cumsum(leaves, axis=1).T


def predict_boosting(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    return sigmoid(boosting_raw(model, X))
