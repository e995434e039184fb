import numpy as np
import pytest

from oracles import gini_counts
from wfbench.features import FEATURE_NAMES, GROUPS, feature_matrix, group_of
from wfbench.forest import (
    Forest,
    ForestError,
    ForestParams,
    Tree,
    _best_split,
    feature_importance,
    oob_accuracy,
    predict,
    train,
)
from wfbench.synth import SynthParams, generate_synthetic


def stump(feature=0, threshold=0.5, left_label=0, right_label=1, n=(10, 5, 5), impurity=(0.5, 0.0, 0.0)):
    return Tree(
        feature=np.array([feature, -1, -1]),
        threshold=np.array([threshold, 0.0, 0.0]),
        left=np.array([1, -1, -1]),
        right=np.array([2, -1, -1]),
        label=np.array([0, left_label, right_label]),
        n_samples=np.array(n),
        impurity=np.array(impurity),
    )


def leaf(label):
    return Tree(*(np.array([v]) for v in (-1, 0.0, -1, -1, label, 1, 0.0)))


def separable(n_per=10, n_features=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2 * n_per, n_features))
    X[:, 0] = [0.0] * n_per + [1.0] * n_per
    return X, ["A"] * n_per + ["B"] * n_per


def test_separable_feature_training_accuracy():
    X, y = separable()
    forest = train(X, y, ForestParams(n_trees=10, max_features=5, seed=1))
    assert forest.predict_labels(X) == y


def test_determinism_across_worker_counts():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 20))
    y = [f"c{i % 3}" for i in range(60)]
    X[:, 3] += np.arange(60) % 3
    probe = rng.normal(size=(30, 20))
    a = train(X, y, ForestParams(n_trees=15, seed=9), n_jobs=1)
    b = train(X, y, ForestParams(n_trees=15, seed=9), n_jobs=4)
    assert np.array_equal(a.votes(probe), b.votes(probe))
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.threshold, tb.threshold)


def test_oob_accuracy_on_separable_synthetic():
    syn = generate_synthetic(SynthParams(num_classes=4, samples_per_class=10, overlap=0.0, seed=5))
    X = feature_matrix(syn.dataset)
    forest = train(X, syn.dataset.labels, ForestParams(n_trees=50, seed=2))
    assert oob_accuracy(forest, X, syn.dataset.labels) >= 0.9


def test_stump_prediction():
    forest = Forest([stump()], ["A", "B"], 3)
    label, fractions = predict(forest, np.array([0.9, 0.0, 0.0]))
    assert label == "B" and fractions == {"A": 0.0, "B": 1.0}


def test_vote_arithmetic():
    forest = Forest([leaf(0), leaf(0), leaf(1)], ["A", "B"], 2)
    label, fractions = predict(forest, np.zeros(2))
    assert label == "A"
    assert fractions == pytest.approx({"A": 2 / 3, "B": 1 / 3})
    assert sum(fractions.values()) == pytest.approx(1.0)


def test_vote_tie_goes_to_class_order():
    forest = Forest([leaf(1), leaf(0)], ["A", "B"], 2)
    assert predict(forest, np.zeros(2))[0] == "A"


def test_stump_importance():
    forest = Forest([stump()], ["A", "B"], 3, ["f0", "f1", "f2"])
    assert feature_importance(forest) == {"f0": 1.0, "f1": 0.0, "f2": 0.0}


def test_importance_without_splits_is_zero():
    forest = Forest([leaf(0)], ["A", "B"], 2)
    assert feature_importance(forest) == {"f0": 0.0, "f1": 0.0}


def test_importance_invariants():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(80, 12))
    X[:, 5] = 0.0  # constant: can never split
    y = ["a" if v > 0 else "b" for v in X[:, 2] + 0.3 * rng.normal(size=80)]
    imp = feature_importance(train(X, y, ForestParams(n_trees=20, seed=0)))
    values = np.array(list(imp.values()))
    assert np.all(values >= 0)
    assert values.sum() == pytest.approx(1.0, abs=1e-9)
    assert imp["f5"] == 0.0
    assert max(imp, key=imp.get) == "f2"


def test_top_importance_in_volume_group():
    # classes differ only in total bytes; everything else is shared noise
    rng = np.random.default_rng(11)
    n = 120
    X = rng.normal(size=(n, len(FEATURE_NAMES)))
    labels = [f"c{i % 4}" for i in range(n)]
    X[:, FEATURE_NAMES.index("bytes_total")] = [int(l[1]) * 1e5 + rng.normal() for l in labels]
    forest = train(X, labels, ForestParams(n_trees=30, seed=1), feature_names=FEATURE_NAMES)
    imp = feature_importance(forest)
    top = max(imp, key=imp.get)
    assert group_of(FEATURE_NAMES.index(top)) == "volumes"


def test_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(90, 8))
    y = [f"c{int(v)}" for v in np.digitize(X[:, 1] + X[:, 4] + 0.5 * rng.normal(size=90), [-0.7, 0.7])]
    base = train(X, y, ForestParams(n_trees=20, seed=6))
    Xt = X.copy()
    Xt[:, 1] = np.exp(2 * X[:, 1]) + 5
    moved = train(Xt, y, ForestParams(n_trees=20, seed=6))
    for ta, tb in zip(base.trees, moved.trees):
        probe = rng.normal(size=(200, 8))
        probe_t = probe.copy()
        probe_t[:, 1] = np.exp(2 * probe[:, 1]) + 5
        assert np.array_equal(ta.predict(X), tb.predict(Xt))
        assert np.array_equal(ta.predict(probe), tb.predict(probe_t))
        assert np.array_equal(ta.feature, tb.feature)


def _brute_best_split(X, y, n_classes):
    """Exhaustive search with the documented tie-break order."""
    best = None
    n = len(y)
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f]))
        for lo, hi in zip(values, values[1:]):
            left = [y[i] for i in range(n) if X[i, f] <= lo]
            right = [y[i] for i in range(n) if X[i, f] > lo]
            cl = [left.count(c) for c in range(n_classes)]
            cr = [right.count(c) for c in range(n_classes)]
            w = (len(left) * gini_counts(cl) + len(right) * gini_counts(cr)) / n
            key = (round(w, 12), f, lo)
            if best is None or key < best[0]:
                best = (key, f, lo)
    return best[1], best[2]


def test_best_split_matches_exhaustive_search():
    rng = np.random.default_rng(21)
    for _ in range(40):
        n, m, k = int(rng.integers(4, 25)), int(rng.integers(1, 5)), int(rng.integers(2, 4))
        X = rng.integers(0, 5, size=(n, m)).astype(float)
        y = rng.integers(0, k, size=n)
        if all(len(set(X[:, f])) == 1 for f in range(m)):
            continue
        got = _best_split(X, y, k, np.arange(m), 1)
        assert got == _brute_best_split(X, y, k)


def test_training_errors():
    X, y = separable()
    with pytest.raises(ForestError):
        train(X, ["A"] * len(y))
    with pytest.raises(ForestError):
        train(X, y, feature_names=["x"])
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ForestError):
        train(bad, y)
    forest = train(X, y, ForestParams(n_trees=2))
    with pytest.raises(ForestError):
        forest.votes(np.zeros((1, 3)))


@pytest.mark.parametrize("kw", [{"n_trees": 0}, {"min_samples_leaf": 0}, {"max_features": "log2"},
                                {"max_features": 0}, {"max_depth": -1}])
def test_invalid_params(kw):
    with pytest.raises(ForestError):
        ForestParams(**kw)


def test_max_depth_and_min_leaf_respected():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 6))
    y = [f"c{i % 5}" for i in range(100)]
    forest = train(X, y, ForestParams(n_trees=5, max_depth=2, min_samples_leaf=7, seed=0))
    for tree in forest.trees:
        leaves = tree.feature < 0
        assert np.all(tree.n_samples[leaves] >= 7)
        depth = np.zeros(tree.node_count, dtype=int)
        for i in range(tree.node_count):
            if tree.feature[i] >= 0:
                depth[tree.left[i]] = depth[tree.right[i]] = depth[i] + 1
        assert depth.max() <= 2


def test_sqrt_candidates():
    assert ForestParams().n_candidate_features(601) == 24
    assert ForestParams(max_features=1000).n_candidate_features(601) == 601
