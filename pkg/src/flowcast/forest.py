"""Regression trees and a bagged random forest, used for impurity-based
feature importance only."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from flowcast.errors import DataError

LEAF = -1


@dataclass
class RegressionTree:
    """Flat array tree. ``feature[i] == LEAF`` marks a leaf.

    A sample goes left at node ``i`` when ``x[feature[i]] <= threshold[i]``.
    ``impurity_decrease`` is the drop in summed squared error achieved by the
    split (variance reduction times node sample count); zero at leaves.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    impurity_decrease: np.ndarray
    n_samples: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.shape[0]

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == LEAF

    def depth(self) -> int:
        deepest, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.is_leaf(node):
                deepest = max(deepest, d)
            else:
                stack.extend([(self.left[node], d + 1), (self.right[node], d + 1)])
        return deepest

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        nodes = np.zeros(X.shape[0], dtype=np.intp)
        active = self.feature[nodes] != LEAF
        while active.any():
            cur = nodes[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            nodes[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[nodes] != LEAF
        return nodes

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def _best_split(X, y, idx, candidates, min_samples_leaf):
    """Best (gain, feature, threshold) over ``candidates``; feature -1 if none."""
    yn = y[idx]
    n = yn.shape[0]
    yc = yn - yn.mean()
    total_sse = float(yc @ yc)
    best_gain, best_feature, best_threshold = 0.0, LEAF, 0.0
    if total_sse <= 0.0:
        return best_gain, best_feature, best_threshold
    n_left = np.arange(1, n)
    n_right = n - n_left
    size_ok = (n_left >= min_samples_leaf) & (n_right >= min_samples_leaf)
    for f in candidates:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        ys = yc[order]
        total = ys.sum()
        left_sum = np.cumsum(ys)[:-1]
        right_sum = total - left_sum
        gain = left_sum ** 2 / n_left + right_sum ** 2 / n_right - total ** 2 / n
        valid = size_ok & (xs[1:] > xs[:-1])
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        j = int(np.argmax(gain))
        if gain[j] > best_gain:
            lo, hi = xs[j], xs[j + 1]
            mid = 0.5 * (lo + hi)
            if mid >= hi:
                mid = lo
            best_gain, best_feature, best_threshold = float(gain[j]), int(f), float(mid)
    # guard against splits that only shuffle rounding error
    if best_gain <= 1e-12 * total_sse:
        return 0.0, LEAF, 0.0
    return best_gain, best_feature, best_threshold


def fit_tree(X, y, max_depth: int, min_samples_leaf: int = 1,
             features_per_split: int | None = None, rng=None) -> RegressionTree:
    """Greedy variance-reduction tree on all rows of ``X``.

    Each split examines ``features_per_split`` features drawn without
    replacement from ``rng`` (all features when None).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("cannot fit a tree on empty data")
    n_features = X.shape[1]
    mtry = n_features if features_per_split is None else int(features_per_split)
    if not 1 <= mtry <= n_features:
        raise DataError(f"features_per_split must lie in [1, {n_features}]")
    rng = rng if rng is not None else np.random.default_rng(0)

    feature, threshold, left, right, value, decrease, counts = [], [], [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[idx].mean()))
        decrease.append(0.0)
        counts.append(idx.shape[0])
        return len(feature) - 1

    root = new_node(np.arange(X.shape[0]))
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or idx.shape[0] < 2 * min_samples_leaf:
            continue
        if mtry == n_features:
            candidates = np.arange(n_features)
        else:
            candidates = rng.choice(n_features, size=mtry, replace=False)
        gain, f, thr = _best_split(X, y, idx, candidates, min_samples_leaf)
        if f == LEAF:
            continue
        mask = X[idx, f] <= thr
        left_idx, right_idx = idx[mask], idx[~mask]
        feature[node], threshold[node], decrease[node] = f, thr, gain
        left[node] = new_node(left_idx)
        right[node] = new_node(right_idx)
        # right pushed first so the left subtree is built first
        stack.append((right[node], right_idx, depth + 1))
        stack.append((left[node], left_idx, depth + 1))

    return RegressionTree(
        np.array(feature, dtype=np.intp), np.array(threshold), np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp), np.array(value), np.array(decrease),
        np.array(counts, dtype=np.intp))


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 5
    features_per_split: int | None = None  # ceil(F / 3) when None
    seed: int = 0

    def resolved_features_per_split(self, n_features: int) -> int:
        if self.features_per_split is None:
            return max(1, math.ceil(n_features / 3))
        return self.features_per_split


@dataclass
class RandomForest:
    trees: list[RegressionTree]
    features_per_split: int
    bootstrap_seed: int
    n_features: int

    def predict(self, X) -> np.ndarray:
        return np.mean([tree.predict(X) for tree in self.trees], axis=0)


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, tree_index])


def fit_random_forest(X, y, config: ForestConfig | None = None) -> RandomForest:
    """Bagged trees; tree ``t`` draws its bootstrap and feature subsets from
    a generator seeded by ``(seed, t)`` so trees are independent of fit order."""
    config = config or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, n_features = X.shape
    if n == 0 or y.shape[0] != n:
        raise DataError("forest needs a non-empty design with matching targets")
    if n < 2 * config.min_samples_leaf:
        raise DataError(f"need at least {2 * config.min_samples_leaf} rows, got {n}")
    if config.n_trees < 1:
        raise DataError("n_trees must be at least 1")
    mtry = config.resolved_features_per_split(n_features)
    trees = []
    for t in range(config.n_trees):
        rng = tree_rng(config.seed, t)
        boot = rng.integers(0, n, size=n)
        trees.append(fit_tree(X[boot], y[boot], config.max_depth,
                              config.min_samples_leaf, mtry, rng))
    return RandomForest(trees, mtry, config.seed, n_features)


def rf_importance(forest: RandomForest) -> np.ndarray:
    """Impurity decrease per feature summed over all trees, normalized to sum 1."""
    scores = np.zeros(forest.n_features)
    for tree in forest.trees:
        split = tree.feature != LEAF
        np.add.at(scores, tree.feature[split], tree.impurity_decrease[split])
    total = scores.sum()
    return scores / total if total > 0 else scores
