"""Small squared-loss gradient-boosted regression trees with exact greedy splits
and gain importance. Used only to rank features."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class NoSplitError(ValueError):
    """Raised when no feature can be split (all columns constant)."""


@dataclass(frozen=True)
class GBDTConfig:
    rounds: int = 100
    depth: int = 3
    lr: float = 0.1
    min_samples_leaf: float = 5

    def __post_init__(self):
        if self.rounds < 0 or self.depth < 1:
            raise ValueError("rounds >= 0 and depth >= 1 required")
        if not 0.0 < self.lr <= 1.0:
            raise ValueError("learning rate must lie in (0, 1]")
        if self.min_samples_leaf <= 0:
            raise ValueError("min_samples_leaf must be positive")


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    gain: list[float] = field(default_factory=list)

    def add(self, value: float) -> int:
        for arr, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1),
                       (self.value, value), (self.gain, 0.0)):
            arr.append(v)
        return len(self.value) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        feat = np.array(self.feature)
        thr = np.array(self.threshold)
        left, right = np.array(self.left), np.array(self.right)
        rows = np.arange(X.shape[0])
        while True:
            inner = feat[node] >= 0
            if not inner.any():
                break
            idx = rows[inner]
            go_left = X[idx, feat[node[idx]]] <= thr[node[idx]]
            node[idx] = np.where(go_left, left[node[idx]], right[node[idx]])
        return np.array(self.value)[node]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("feature", "threshold", "left", "right", "value", "gain")}


@dataclass
class GBDTModel:
    base_score: float
    learning_rate: float
    trees: list[RegressionTree]
    feature_names: list[str]
    train_loss: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def to_json(self) -> str:
        return json.dumps({"base_score": self.base_score, "learning_rate": self.learning_rate,
                           "feature_names": self.feature_names, "trees": [t.to_dict() for t in self.trees]})


@dataclass(frozen=True)
class Split:
    gain: float
    feature: int
    threshold: float


def best_split(X: np.ndarray, r: np.ndarray, w: np.ndarray, min_leaf: float) -> Split | None:
    """Exact greedy search for the split maximizing the weighted SSE reduction.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    W, S = w.sum(), np.dot(w, r)
    parent = S * S / W
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        x = X[order, j]
        cw = np.cumsum(w[order])
        cs = np.cumsum(w[order] * r[order])
        # candidate cut after position i when x[i] < x[i+1]
        cut = np.nonzero(x[:-1] < x[1:])[0]
        if cut.size == 0:
            continue
        wl, sl = cw[cut], cs[cut]
        wr, sr = W - wl, S - sl
        ok = (wl >= min_leaf) & (wr >= min_leaf)
        if not ok.any():
            continue
        cut, wl, sl, wr, sr = cut[ok], wl[ok], sl[ok], wr[ok], sr[ok]
        gains = sl * sl / wl + sr * sr / wr - parent
        k = int(np.argmax(gains))  # first max -> lowest threshold
        if best is None or gains[k] > best.gain:
            best = Split(float(gains[k]), j, float(0.5 * (x[cut[k]] + x[cut[k] + 1])))
    return best


def _grow(tree: RegressionTree, X, r, w, depth: int, cfg: GBDTConfig) -> int:
    node = tree.add(float(np.dot(w, r) / w.sum()))
    if depth >= cfg.depth or w.sum() < 2 * cfg.min_samples_leaf:
        return node
    split = best_split(X, r, w, cfg.min_samples_leaf)
    scale = float(np.dot(w, r * r)) + 1e-300
    if split is None or split.gain <= 1e-12 * scale:
        return node
    go_left = X[:, split.feature] <= split.threshold
    tree.feature[node] = split.feature
    tree.threshold[node] = split.threshold
    tree.gain[node] = split.gain
    lft = _grow(tree, X[go_left], r[go_left], w[go_left], depth + 1, cfg)
    rgt = _grow(tree, X[~go_left], r[~go_left], w[~go_left], depth + 1, cfg)
    tree.left[node], tree.right[node] = lft, rgt
    return node


def fit(X, y, config: GBDTConfig | None = None, feature_names: list[str] | None = None,
        sample_weight=None) -> GBDTModel:
    cfg = config or GBDTConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be n x p and y length n")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite values in training data")
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != y.shape or np.any(w <= 0):
        raise ValueError("sample weights must be positive, one per row")
    if w.sum() < 2 * cfg.min_samples_leaf:
        raise ValueError(f"need at least {2 * cfg.min_samples_leaf} rows (by weight)")
    if X.shape[1] == 0 or np.all(X.min(axis=0) == X.max(axis=0)):
        raise NoSplitError("every feature is constant; nothing to split")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length mismatch")
    base = float(np.dot(w, y) / w.sum())
    pred = np.full_like(y, base)
    model = GBDTModel(base, cfg.lr, [], names)
    model.train_loss.append(float(np.dot(w, (y - pred) ** 2) / w.sum()))
    for _ in range(cfg.rounds):
        tree = RegressionTree()
        _grow(tree, X, y - pred, w, 0, cfg)
        pred = pred + cfg.lr * tree.predict(X)
        model.trees.append(tree)
        model.train_loss.append(float(np.dot(w, (y - pred) ** 2) / w.sum()))
    return model


def predict(model: GBDTModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    out = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        out += model.learning_rate * tree.predict(X)
    return out[0] if single else out


def gain_importance(model: GBDTModel) -> dict[str, float]:
    """Total split gain per feature, normalized to sum to one."""
    totals = np.zeros(model.n_features)
    for tree in model.trees:
        for f, g in zip(tree.feature, tree.gain):
            if f >= 0:
                totals[f] += g
    total = totals.sum()
    if total <= 0:
        raise NoSplitError("model has no splits; importance undefined")
    return dict(zip(model.feature_names, (totals / total).tolist()))
