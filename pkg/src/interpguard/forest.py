"""Binary random forest with Gini splits, built from scratch.

Trees are stored as flat node arrays. A node with ``feature == -1`` is a leaf.
Samples go left when ``x[feature] <= threshold``. The forest's verdict is a
majority vote over trees with ties resolved to class 0 (benign). The model is
deliberately non-differentiable: there is no gradient operation here.
"""

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import DegenerateForestError, InputShapeError, ModelFormatError, ModelVersionError, \
    NotFittedError, check_finite

FOREST_FORMAT_VERSION = 1


@dataclass
class Tree:
    feature: np.ndarray      # int64, -1 at leaves
    threshold: np.ndarray    # float64
    left: np.ndarray         # int64, -1 at leaves
    right: np.ndarray
    counts: np.ndarray       # (n_nodes, 2) training class counts per node
    depth: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def max_depth(self):
        return int(self.depth.max()) if len(self.depth) else 0

    def apply(self, X):
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.max_depth):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return node

    def predict(self, X):
        c = self.counts[self.apply(X)]
        return (c[:, 1] > c[:, 0]).astype(np.int64)


def gini(counts):
    """Gini impurity of class-count vector(s) along the last axis."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1)
    p = np.divide(counts, total[..., None], out=np.zeros_like(counts), where=total[..., None] > 0)
    return 1.0 - (p ** 2).sum(axis=-1)


def split_impurity(X, y, feature, threshold):
    """Size-weighted child Gini impurity of one candidate split (direct recount)."""
    left = X[:, feature] <= threshold
    out = 0.0
    for side in (left, ~left):
        counts = np.bincount(y[side], minlength=2)
        out += side.sum() / len(y) * gini(counts)
    return float(out)


def best_split_on_feature(values, y):
    """Lowest weighted Gini split of one feature.

    Returns ``(impurity, threshold)``, or ``(inf, nan)`` when the feature is
    constant on these samples.
    """
    order = np.argsort(values, kind="stable")
    v, ys = values[order], y[order]
    n = len(v)
    valid = np.flatnonzero(v[1:] > v[:-1]) + 1   # left-partition sizes
    if not valid.size:
        return np.inf, np.nan
    ones = np.cumsum(ys)[valid - 1].astype(np.float64)
    n_left = valid.astype(np.float64)
    n_right = n - n_left
    ones_right = ys.sum() - ones
    p_left, p_right = ones / n_left, ones_right / n_right
    weighted = (n_left * 2 * p_left * (1 - p_left) + n_right * 2 * p_right * (1 - p_right)) / n
    k = int(np.argmin(weighted))
    lo, hi = v[valid[k] - 1], v[valid[k]]
    threshold = lo + (hi - lo) / 2
    if not lo <= threshold < hi:
        threshold = lo
    return float(weighted[k]), float(threshold)


def build_tree(X, y, max_depth, max_features, rng, min_samples_split=2):
    """Grow one tree; ``max_features`` features are drawn per node.

    If none of the drawn features can split the node, the remaining features
    are tried in random order before the node becomes a leaf.
    """
    n_features = X.shape[1]
    feature, threshold, left, right, counts, depth = [], [], [], [], [], []

    def new_node(idx, d):
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=2))
        depth.append(d)
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y)), 0), np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        c = counts[node]
        if depth[node] >= max_depth or len(idx) < min_samples_split or c.min() == 0:
            continue
        order = rng.permutation(n_features)
        best = (np.inf, -1, np.nan)
        for pos, f in enumerate(order):
            if pos >= max_features and best[1] >= 0:
                break
            imp, thr = best_split_on_feature(X[idx, f], y[idx])
            if imp < best[0]:
                best = (imp, int(f), thr)
        if best[1] < 0:
            continue
        _, f, thr = best
        go_left = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left_idx, right_idx = idx[go_left], idx[~go_left]
        left[node] = new_node(left_idx, depth[node] + 1)
        right[node] = new_node(right_idx, depth[node] + 1)
        stack.append((right[node], right_idx))
        stack.append((left[node], left_idx))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(counts, dtype=np.int64).reshape(-1, 2), np.array(depth, dtype=np.int64))


class RandomForest(ClassifierMixin, BaseEstimator):
    """Bagged Gini trees for labels in {0, 1}.

    ``predict`` returns 1 only when strictly more than half the trees vote 1.
    ``vote_fraction`` is the fraction of trees voting 1 and serves as a score.
    """

    def __init__(self, n_trees=100, max_depth=8, max_features=4, bootstrap=True, seed=0, min_samples_split=2):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.seed = seed
        self.min_samples_split = min_samples_split

    def fit(self, X, y):
        X = check_finite(X, "features")
        if X.ndim != 2:
            raise InputShapeError(f"features must be 2-D, got shape {X.shape}")
        y = np.asarray(y).astype(np.int64)
        if y.shape != (len(X),):
            raise InputShapeError("one label per feature row is required")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("forest labels must be 0 (benign) or 1 (adversarial)")
        if len(np.unique(y)) < 2:
            raise DegenerateForestError("training labels contain a single class")
        if self.n_trees < 1:
            raise DegenerateForestError("a forest needs at least one tree")
        n = len(y)
        self.trees_ = []
        oob_votes = np.zeros((n, 2))
        for t in range(self.n_trees):
            rng = np.random.default_rng([int(self.seed), t])
            idx = rng.integers(n, size=n) if self.bootstrap else np.arange(n)
            tree = build_tree(X[idx], y[idx], self.max_depth, self.max_features, rng, self.min_samples_split)
            self.trees_.append(tree)
            if self.bootstrap:
                out = np.setdiff1d(np.arange(n), idx)
                if out.size:
                    oob_votes[out, tree.predict(X[out])] += 1
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        seen = oob_votes.sum(axis=1) > 0
        if self.bootstrap and seen.any():
            oob_pred = (oob_votes[seen, 1] > oob_votes[seen, 0]).astype(np.int64)
            self.oob_error_ = float(np.mean(oob_pred != y[seen]))
        else:
            self.oob_error_ = float("nan")
        return self

    def _check(self, X):
        if not getattr(self, "trees_", None):
            raise NotFittedError("forest has no trees; fit it first")
        X = check_finite(X, "features")
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise InputShapeError(f"expected (N, {self.n_features_in_}) features, got {X.shape}")
        return X

    def tree_votes(self, X):
        """``(n_trees, N)`` matrix of per-tree class outputs."""
        X = self._check(X)
        return np.stack([tree.predict(X) for tree in self.trees_])

    def vote_fraction(self, X):
        return self.tree_votes(X).mean(axis=0)

    def predict(self, X):
        return (self.vote_fraction(X) > 0.5).astype(np.int64)

    def predict_proba(self, X):
        f = self.vote_fraction(X)
        return np.stack([1 - f, f], axis=1)

    # -- persistence ---------------------------------------------------------

    def to_arrays(self, prefix="forest"):
        if not getattr(self, "trees_", None):
            raise NotFittedError("forest has no trees; fit it first")
        header = {"version": FOREST_FORMAT_VERSION, "params": self.get_params(), "n_features": self.n_features_in_,
                  "oob_error": self.oob_error_, "n_trees": len(self.trees_)}
        arrays = {f"{prefix}/header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
        for t, tree in enumerate(self.trees_):
            for name in ("feature", "threshold", "left", "right", "counts", "depth"):
                arrays[f"{prefix}/{t}/{name}"] = getattr(tree, name)
        return arrays

    @classmethod
    def from_arrays(cls, arrays, prefix="forest"):
        try:
            header = json.loads(bytes(arrays[f"{prefix}/header"]).decode())
        except (KeyError, ValueError) as exc:
            raise ModelFormatError(f"no forest header under {prefix!r}") from exc
        if header.get("version") != FOREST_FORMAT_VERSION:
            raise ModelVersionError(f"forest format version {header.get('version')} is not supported")
        forest = cls(**header["params"])
        try:
            forest.trees_ = [Tree(*(np.asarray(arrays[f"{prefix}/{t}/{name}"])
                                    for name in ("feature", "threshold", "left", "right", "counts", "depth")))
                             for t in range(header["n_trees"])]
        except KeyError as exc:
            raise ModelFormatError(f"forest arrays are incomplete: missing {exc}") from exc
        forest.n_features_in_ = header["n_features"]
        forest.oob_error_ = header["oob_error"]
        forest.classes_ = np.array([0, 1])
        return forest

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(fh, **self.to_arrays())

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            return cls.from_arrays(dict(data))
