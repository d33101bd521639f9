"""Gini CART over vector-valued targets.

Targets are a matrix with one column per output. Impurity is the sum over
columns of p(1 - p), which gives per-output Gini for multi-label 0/1 targets
and (half) the usual multi-class Gini for one-hot targets, so both trees share
one split search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Node:
    value: np.ndarray
    n_samples: int
    impurity: float
    feature: int | None = None
    threshold: float | None = None
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        out = {
            "value": [float(v) for v in self.value],
            "n_samples": int(self.n_samples),
            "impurity": float(self.impurity),
        }
        if not self.is_leaf:
            out.update(
                feature=int(self.feature),
                threshold=float(self.threshold),
                left=self.left.to_dict(),
                right=self.right.to_dict(),
            )
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Node":
        node = cls(np.asarray(data["value"], dtype=float), data["n_samples"], data["impurity"])
        if "feature" in data:
            node.feature = data["feature"]
            node.threshold = data["threshold"]
            node.left = cls.from_dict(data["left"])
            node.right = cls.from_dict(data["right"])
        return node


def impurity(Y: np.ndarray) -> float:
    p = Y.mean(axis=0)
    return float((p * (1.0 - p)).sum())


def best_split(X, Y, min_samples_leaf):
    """Lowest weighted-impurity split as ``(feature, threshold, score)`` or None."""
    n = len(X)
    parent = impurity(Y) * n
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = Y[order]
        csum = np.cumsum(ys, axis=0)
        total = csum[-1]
        counts = np.arange(1, n)
        left_sum = csum[:-1]
        right_sum = total - left_sum
        pl = left_sum / counts[:, None]
        pr = right_sum / (n - counts)[:, None]
        score = counts * (pl * (1 - pl)).sum(axis=1) + (n - counts) * (pr * (1 - pr)).sum(axis=1)
        valid = (xs[1:] > xs[:-1]) & (counts >= min_samples_leaf) & (n - counts >= min_samples_leaf)
        if not valid.any():
            continue
        score = np.where(valid, score, np.inf)
        i = int(np.argmin(score))
        if score[i] < parent - 1e-12 and (best is None or score[i] < best[2] - 1e-12):
            best = (j, float((xs[i] + xs[i + 1]) / 2.0), float(score[i]))
    return best


def build_tree(X, Y, max_depth=3, min_samples_leaf=5) -> Node:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    return _grow(X, Y, 0, max_depth, min_samples_leaf)


def _grow(X, Y, depth, max_depth, min_leaf):
    node = Node(Y.mean(axis=0), len(Y), impurity(Y))
    if depth >= max_depth or len(Y) < 2 * min_leaf or node.impurity <= 0.0:
        return node
    split = best_split(X, Y, min_leaf)
    if split is None:
        return node
    j, thr, _ = split
    mask = X[:, j] <= thr
    node.feature, node.threshold = j, thr
    node.left = _grow(X[mask], Y[mask], depth + 1, max_depth, min_leaf)
    node.right = _grow(X[~mask], Y[~mask], depth + 1, max_depth, min_leaf)
    return node


def predict(root: Node, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty((len(X), len(root.value)))
    _fill(root, X, np.arange(len(X)), out)
    return out


def _fill(node, X, idx, out):
    if node.is_leaf:
        out[idx] = node.value
        return
    go_left = X[idx, node.feature] <= node.threshold
    _fill(node.left, X, idx[go_left], out)
    _fill(node.right, X, idx[~go_left], out)


def iter_nodes(root: Node):
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        if not node.is_leaf:
            stack.extend((node.right, node.left))


def depth(root: Node) -> int:
    if root.is_leaf:
        return 0
    return 1 + max(depth(root.left), depth(root.right))
