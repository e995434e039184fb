"""Random forest of Gini-impurity CART trees.

Training is deterministic given (data, params): tree ``i`` draws all of its
randomness from a generator seeded with ``(seed, i)``, so the worker count
does not change the model.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import isqrt
from typing import Sequence

import numpy as np

_LOGGER = logging.getLogger(__name__)


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: str | int = "sqrt"
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ForestError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ForestError("max_depth must be >= 0")
        if isinstance(self.max_features, str) and self.max_features != "sqrt":
            raise ForestError(f"unknown max_features {self.max_features!r}")
        if not isinstance(self.max_features, str) and self.max_features < 1:
            raise ForestError("max_features must be >= 1")

    def n_candidate_features(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, isqrt(n_features))
        return min(int(self.max_features), n_features)


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, tree_index]))


@dataclass
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray
    n_samples: np.ndarray
    impurity: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.feature.size)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active[rows] = self.feature[node[rows]] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.label[self.apply(X)]

    def importances(self, n_features: int) -> np.ndarray:
        imp = np.zeros(n_features)
        for i in np.flatnonzero(self.feature >= 0):
            l, r = self.left[i], self.right[i]
            decrease = (
                self.n_samples[i] * self.impurity[i]
                - self.n_samples[l] * self.impurity[l]
                - self.n_samples[r] * self.impurity[r]
            )
            imp[self.feature[i]] += max(decrease, 0.0)
        return imp / self.n_samples[0]


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    return 1.0 - float((counts.astype(np.float64) ** 2).sum()) / float(n * n)


def _best_split(sub: np.ndarray, y: np.ndarray, n_classes: int, feats: np.ndarray, min_leaf: int):
    """Best (feature, threshold) by Gini gain; `sub` holds columns `feats`.

    `feats` must be ascending.  Ties go to the lowest feature index, then the
    lowest threshold.  Returns None when no candidate split satisfies
    `min_leaf`.
    """
    n = y.size
    # equal values never straddle a candidate split, so sort stability is moot
    order = np.argsort(sub, axis=0)
    sorted_vals = np.take_along_axis(sub, order, axis=0)
    ys = y[order]
    totals = np.bincount(y, minlength=n_classes)
    # occurrence index of each label among earlier positions of its column
    pos = np.arange(n)[:, None]
    grouped = np.argsort(ys * n + pos, axis=0)
    gy = np.take_along_axis(ys, grouped, axis=0)
    starts = np.searchsorted(np.sort(y), np.arange(n_classes))
    occ = np.empty_like(ys)
    np.put_along_axis(occ, grouped, pos - starts[gy], axis=0)
    # running sum_c left_c^2 and sum_c T_c * left_c, exact in integers
    left_sq = np.cumsum(2 * occ + 1, axis=0)[:-1]
    left_dot = np.cumsum(totals[ys], axis=0)[:-1]
    right_sq = int((totals ** 2).sum()) - 2 * left_dot + left_sq
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    # sum_c cl^2/nl + sum_c cr^2/nr is maximal where weighted Gini is minimal;
    # compare as exact fractions via a common denominator
    num = left_sq * n_right + right_sq * n_left
    valid = sorted_vals[:-1] < sorted_vals[1:]
    if min_leaf > 1:
        valid &= (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    denom = n_left * n_right
    score = np.where(valid, num / denom, -np.inf)
    best_val = score.max()
    # exact re-check among near-maxima removes float rounding from tie-breaks
    cand_rows, cand_cols = np.nonzero(score >= best_val * (1 - 1e-12))
    best = None
    for r, c in sorted(zip(cand_rows.tolist(), cand_cols.tolist()), key=lambda rc: (rc[1], rc[0])):
        key = (int(num[r, c]), int(denom[r, 0]))
        if best is None or key[0] * best[0][1] > best[0][0] * key[1]:
            best = (key, r, c)
    _, row, col = best
    # thresholds are observed values, so routing any input depends only on
    # its order relative to training values (monotone-transform invariant)
    return int(feats[col]), float(sorted_vals[row, col])


def _varying_features(XT: np.ndarray, idx: np.ndarray, perm: np.ndarray, m: int) -> np.ndarray:
    """First `m` features in `perm` order that are not constant on `idx`, sorted.

    `XT` is the feature-major (transposed) training matrix.
    """
    found: list[np.ndarray] = []
    n_found = 0
    step = 4 * m
    for lo in range(0, perm.size, step):
        cols = perm[lo:lo + step]
        block = XT[cols][:, idx]
        varying = cols[block.min(axis=1) < block.max(axis=1)]
        found.append(varying[: m - n_found])
        n_found += found[-1].size
        if n_found >= m:
            break
    return np.sort(np.concatenate(found)) if found else np.zeros(0, dtype=np.int64)


def build_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    params: ForestParams,
    rng: np.random.Generator,
    sample: np.ndarray | None = None,
) -> Tree:
    n_features = X.shape[1]
    m = params.n_candidate_features(n_features)
    XT = np.ascontiguousarray(X.T)
    idx_all = np.arange(y.size) if sample is None else sample

    feature, threshold, left, right, label, n_samples, impurity = ([] for _ in range(7))

    def new_node(idx: np.ndarray) -> int:
        counts = np.bincount(y[idx], minlength=n_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(int(np.argmax(counts)))
        n_samples.append(float(idx.size))
        impurity.append(_gini(counts))
        return len(feature) - 1

    root = new_node(idx_all)
    stack = [(root, idx_all, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if impurity[node] <= 0.0 or idx.size < 2 * params.min_samples_leaf:
            continue
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        feats = _varying_features(XT, idx, rng.permutation(n_features), m)
        if feats.size == 0:
            continue
        split = _best_split(XT[feats][:, idx].T, y[idx], n_classes, feats, params.min_samples_leaf)
        if split is None:
            continue
        f, thr = split
        go_left = XT[f, idx] <= thr
        li = new_node(idx[go_left])
        ri = new_node(idx[~go_left])
        feature[node], threshold[node], left[node], right[node] = f, thr, li, ri
        stack.append((ri, idx[~go_left], depth + 1))
        stack.append((li, idx[go_left], depth + 1))

    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        label=np.array(label, dtype=np.int64),
        n_samples=np.array(n_samples, dtype=np.float64),
        impurity=np.array(impurity, dtype=np.float64),
    )


@dataclass
class Forest:
    trees: list[Tree]
    class_list: list[str]
    n_features: int
    feature_names: Sequence[str] | None = None
    params: ForestParams = field(default_factory=ForestParams)

    def votes(self, X: np.ndarray) -> np.ndarray:
        """Per-class vote fractions, shape (n_samples, n_classes)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ForestError(f"expected {self.n_features} features, got {X.shape[1]}")
        counts = np.zeros((X.shape[0], len(self.class_list)))
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            counts[rows, tree.predict(X)] += 1
        return counts / len(self.trees)

    def predict_indices(self, X: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, i.e. class_list order on ties
        return np.argmax(self.votes(X), axis=1)

    def predict_labels(self, X: np.ndarray) -> list[str]:
        return [self.class_list[i] for i in self.predict_indices(X)]


def _draw_sample(params: ForestParams, rng: np.random.Generator, n: int) -> np.ndarray:
    """Sorted training rows of one tree; the first draw from its generator."""
    return np.sort(rng.integers(0, n, size=n)) if params.bootstrap else np.arange(n)


def train(X: np.ndarray, labels: Sequence[str], params: ForestParams = ForestParams(), n_jobs: int = 1,
          feature_names: Sequence[str] | None = None) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise ForestError("feature matrix and labels disagree in length")
    if feature_names is not None and len(feature_names) != X.shape[1]:
        raise ForestError("feature schema mismatch")
    if not np.all(np.isfinite(X)):
        raise ForestError("feature matrix contains NaN or infinity")
    class_list = sorted(set(labels))
    if len(class_list) < 2:
        raise ForestError("training data must contain at least 2 classes")
    code = {c: i for i, c in enumerate(class_list)}
    y = np.array([code[l] for l in labels], dtype=np.int64)
    n = y.size

    def fit_one(i: int) -> Tree:
        rng = tree_rng(params.seed, i)
        sample = _draw_sample(params, rng, n)
        return build_tree(X, y, len(class_list), params, rng, sample)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(fit_one, range(params.n_trees)))
    else:
        trees = [fit_one(i) for i in range(params.n_trees)]
    _LOGGER.debug("trained %d trees on %d samples", len(trees), n)
    return Forest(trees, class_list, X.shape[1], feature_names, params)


def predict(forest: Forest, vector: np.ndarray) -> tuple[str, dict[str, float]]:
    """Label and per-class vote fractions for one feature vector."""
    fractions = forest.votes(np.asarray(vector, dtype=np.float64).reshape(1, -1))[0]
    best = int(np.argmax(fractions))
    return forest.class_list[best], {c: float(v) for c, v in zip(forest.class_list, fractions)}


def feature_importance(forest: Forest) -> dict[str, float]:
    """Mean decrease in Gini impurity, normalized to sum to 1.

    A forest in which no tree ever split returns all zeros.
    """
    imp = np.mean([t.importances(forest.n_features) for t in forest.trees], axis=0)
    total = imp.sum()
    if total > 0:
        imp = imp / total
    names = forest.feature_names or [f"f{i}" for i in range(forest.n_features)]
    return {name: float(v) for name, v in zip(names, imp)}


def oob_accuracy(forest: Forest, X: np.ndarray, labels: Sequence[str]) -> float:
    """Out-of-bag accuracy; `X` and `labels` must be the training data."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not forest.params.bootstrap:
        raise ForestError("out-of-bag estimate needs bootstrap sampling")
    counts = np.zeros((n, len(forest.class_list)))
    for i, tree in enumerate(forest.trees):
        in_bag = np.zeros(n, dtype=bool)
        in_bag[_draw_sample(forest.params, tree_rng(forest.params.seed, i), n)] = True
        rows = np.flatnonzero(~in_bag)
        counts[rows, tree.predict(X[rows])] += 1
    scored = counts.sum(axis=1) > 0
    if not scored.any():
        raise ForestError("every sample was in-bag for every tree")
    code = {c: k for k, c in enumerate(forest.class_list)}
    y = np.array([code[l] for l in labels])
    return float(np.mean(np.argmax(counts[scored], axis=1) == y[scored]))
