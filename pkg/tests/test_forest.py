import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interpguard import forest
from interpguard._validation import DegenerateForestError, ModelVersionError, NotFittedError
from interpguard.forest import RandomForest


def brute_force_gini(X, y, feature, threshold):
    total = 0.0
    for side in (X[:, feature] <= threshold, X[:, feature] > threshold):
        n = side.sum()
        if n:
            p1 = sum(1 for v in y[side] if v == 1) / n
            total += n / len(y) * (1 - p1 ** 2 - (1 - p1) ** 2)
    return total


def test_gini_values():
    assert forest.gini([5, 5]) == 0.5
    assert forest.gini([7, 0]) == 0.0
    assert forest.gini([0, 0]) == 1.0 - 0.0


@given(st.integers(0, 10_000), st.integers(2, 100))
@settings(max_examples=50, deadline=None)
def test_split_search_matches_enumeration(seed, n):
    rng = np.random.default_rng(seed)
    X = np.round(rng.random((n, 3)), 1)
    y = rng.integers(0, 2, n)
    for f in range(3):
        imp, thr = forest.best_split_on_feature(X[:, f], y)
        values = np.unique(X[:, f])
        candidates = [(brute_force_gini(X, y, f, (a + b) / 2), (a + b) / 2) for a, b in zip(values, values[1:])]
        if not candidates:
            assert imp == np.inf
            continue
        best = min(c[0] for c in candidates)
        assert imp == pytest.approx(best, abs=1e-12)
        assert forest.split_impurity(X, y, f, thr) == pytest.approx(brute_force_gini(X, y, f, thr), abs=1e-12)
        assert brute_force_gini(X, y, f, thr) == pytest.approx(best, abs=1e-12)


def test_separable_one_feature():
    X = np.linspace(0, 1, 40)[:, None]
    y = (X[:, 0] > 0.5).astype(int)
    rf = RandomForest(n_trees=5, max_depth=3, max_features=1, bootstrap=False).fit(X, y)
    assert all(t.max_depth == 1 for t in rf.trees_)
    assert np.all(rf.predict(X) == y)


def test_xor_single_stump_limit():
    X = np.array(list(itertools.product([0.0, 1.0], repeat=2)) * 10)
    y = (X[:, 0] != X[:, 1]).astype(int)
    rf = RandomForest(n_trees=1, max_depth=1, max_features=2, bootstrap=False).fit(X, y)
    assert np.mean(rf.predict(X) == y) <= 0.75
    # every axis-aligned stump on XOR scores at most 0.75
    for f in range(2):
        left = X[:, f] <= 0.5
        for lv, rv in itertools.product([0, 1], repeat=2):
            assert np.mean(np.where(left, lv, rv) == y) <= 0.75


def test_internal_nodes_split_nontrivially():
    rng = np.random.default_rng(1)
    X = rng.random((200, 6))
    y = (X[:, 0] + 0.3 * rng.random(200) > 0.6).astype(int)
    rf = RandomForest(n_trees=10, max_depth=6, max_features=2, seed=3).fit(X, y)
    for tree in rf.trees_:
        internal = np.flatnonzero(tree.feature >= 0)
        for node in internal:
            assert tree.counts[tree.left[node]].sum() > 0 and tree.counts[tree.right[node]].sum() > 0
            np.testing.assert_array_equal(tree.counts[tree.left[node]] + tree.counts[tree.right[node]],
                                          tree.counts[node])
        assert np.all(tree.counts.sum(axis=1) > 0)


def test_vote_matches_recount_and_ties():
    rng = np.random.default_rng(2)
    X = rng.random((300, 15))
    y = (X[:, 3] > X[:, 7]).astype(int)
    rf = RandomForest(n_trees=20, seed=4).fit(X, y)
    test = rng.random((100, 15))
    votes = np.array([[int(t.counts[t.apply(row[None])[0]][1] > t.counts[t.apply(row[None])[0]][0])
                       for row in test] for t in rf.trees_])
    np.testing.assert_array_equal(rf.tree_votes(test), votes)
    fraction = votes.sum(axis=0) / len(rf.trees_)
    np.testing.assert_array_equal(rf.vote_fraction(test), fraction)
    np.testing.assert_array_equal(rf.predict(test), (votes.sum(axis=0) * 2 > len(rf.trees_)).astype(int))
    tie = RandomForest(n_trees=2, seed=0)
    tie.trees_ = [rf.trees_[0], rf.trees_[0]]
    tie.n_features_in_ = 15
    tie.trees_[1] = forest.Tree(*(np.asarray(a).copy() for a in (
        rf.trees_[0].feature, rf.trees_[0].threshold, rf.trees_[0].left, rf.trees_[0].right,
        rf.trees_[0].counts[:, ::-1], rf.trees_[0].depth)))
    np.testing.assert_array_equal(tie.vote_fraction(test), 0.5)
    assert not tie.predict(test).any()


def test_all_agree_and_single_tree():
    X = np.linspace(0, 1, 50)[:, None]
    y = (X[:, 0] > 0.3).astype(int)
    rf = RandomForest(n_trees=7, max_features=1, seed=1).fit(X, y)
    assert rf.vote_fraction(np.array([[0.95]]))[0] == 1.0
    one = RandomForest(n_trees=1, seed=1).fit(X, y)
    np.testing.assert_array_equal(one.predict(X), one.trees_[0].predict(X))


def test_seeded_determinism_and_oob():
    rng = np.random.default_rng(5)
    X = rng.random((150, 5))
    y = (X[:, 1] > 0.5).astype(int)
    a = RandomForest(n_trees=15, seed=9).fit(X, y)
    b = RandomForest(n_trees=15, seed=9).fit(X, y)
    for ta, tb in zip(a.trees_, b.trees_):
        np.testing.assert_array_equal(ta.threshold, tb.threshold)
        np.testing.assert_array_equal(ta.feature, tb.feature)
    assert 0 <= a.oob_error_ < 0.2


def test_degenerate_inputs():
    X = np.random.default_rng(0).random((10, 2))
    with pytest.raises(DegenerateForestError):
        RandomForest().fit(X, np.zeros(10, int))
    with pytest.raises(DegenerateForestError):
        RandomForest(n_trees=0).fit(X, np.arange(10) % 2)
    with pytest.raises(NotFittedError):
        RandomForest().predict(X)


def test_no_gradient_api():
    public = {name for name in dir(RandomForest) if not name.startswith("_")}
    assert not any("grad" in name or "backward" in name for name in public)
    assert not any("grad" in name for name in dir(forest) if not name.startswith("_"))


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    X = rng.random((120, 15))
    y = (X.sum(axis=1) > 7.5).astype(int)
    rf = RandomForest(n_trees=12, seed=2).fit(X, y)
    rf.save(tmp_path / "f.npz")
    back = RandomForest.load(tmp_path / "f.npz")
    np.testing.assert_array_equal(back.vote_fraction(X), rf.vote_fraction(X))
    arrays = rf.to_arrays()
    arrays["forest/header"] = np.frombuffer(bytes(arrays["forest/header"]).replace(b'"version": 1',
                                                                                  b'"version": 7'), np.uint8)
    with pytest.raises(ModelVersionError):
        RandomForest.from_arrays(arrays)
