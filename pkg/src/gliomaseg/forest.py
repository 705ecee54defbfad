"""Random-forest regression built from CART trees.

Each tree sees a bootstrap sample and, at every node, a random subset of
ceil(d/3) features.  Node randomness is drawn from a stream keyed by
(seed, tree index, heap position of the node), so a tree grown to depth k+1
is an exact refinement of the same tree grown to depth k.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyData, NonFiniteInput, TooFewSamples


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 30
    max_depth: int = 10
    seed: int = 0
    max_features: int | None = None  # None -> ceil(d / 3)

    def features_per_split(self, d: int) -> int:
        m = self.max_features or math.ceil(d / 3)
        return max(1, min(d, m))


@dataclass
class Tree:
    """Flat array form; ``feature[i] == -1`` marks a leaf."""

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def _new(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.value) - 1

    @property
    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def predict_one(self, x) -> float:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return self.value[i]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.predict_one(row) for row in X], dtype=np.float64)


@dataclass
class ForestModel:
    config: ForestConfig
    n_features: int
    trees: list
    feature_names: list | None = None  # column labels, when the caller has them

    @property
    def tree_count(self) -> int:
        return len(self.trees)

    def to_json(self) -> str:
        return json.dumps({
            "config": asdict(self.config),
            "n_features": self.n_features,
            "trees": [asdict(t) for t in self.trees],
            "feature_names": self.feature_names,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        d = json.loads(text)
        return cls(ForestConfig(**d["config"]), d["n_features"], [Tree(**t) for t in d["trees"]],
                   d.get("feature_names"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "ForestModel":
        return cls.from_json(Path(path).read_text())


def bootstrap_indices(seed: int, tree_index: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed, tree_index, 0])
    return rng.integers(0, n, size=n)


def _best_split(X, y, idx, features):
    """Return (gain, feature, threshold) of the best split, or None."""
    ys = y[idx]
    centred = ys - ys.mean()
    total_sse = float((centred * centred).sum())
    n = idx.size
    best = None
    for f in features:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_s, ys_s = xs[order], centred[order]
        s1 = np.cumsum(ys_s)[:-1]
        s2 = np.cumsum(ys_s * ys_s)[:-1]
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        t1 = s1[-1] + ys_s[-1] if n > 1 else 0.0
        t2 = s2[-1] + ys_s[-1] ** 2 if n > 1 else 0.0
        sse_l = s2 - s1 * s1 / nl
        sse_r = (t2 - s2) - (t1 - s1) ** 2 / nr
        gain = total_sse - sse_l - sse_r
        valid = xs_s[:-1] < xs_s[1:]
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        pos = int(np.argmax(gain))  # first maximum -> lowest threshold
        g = float(gain[pos])
        if best is None or g > best[0]:
            best = (g, int(f), 0.5 * (float(xs_s[pos]) + float(xs_s[pos + 1])))
    if best is None or not best[0] > 1e-12 * max(total_sse, 1e-300):
        return None
    return best


def fit_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, tree_index: int) -> Tree:
    n, d = X.shape
    m = cfg.features_per_split(d)
    tree = Tree()
    idx = bootstrap_indices(cfg.seed, tree_index, n)
    # (node position in tree arrays, heap id, sample indices, depth)
    root = tree._new(float(y[idx].mean()))
    stack = [(root, 1, idx, 0)]
    while stack:
        node, heap_id, ids, depth = stack.pop()
        ys = y[ids]
        if depth >= cfg.max_depth or ids.size < 2 or np.all(ys == ys[0]):
            continue
        rng = np.random.default_rng([cfg.seed, tree_index, heap_id])
        features = np.sort(rng.choice(d, size=m, replace=False))
        split = _best_split(X, y, ids, features)
        if split is None:
            continue
        _, f, thr = split
        go_left = X[ids, f] <= thr
        li, ri = ids[go_left], ids[~go_left]
        left = tree._new(float(y[li].mean()))
        right = tree._new(float(y[ri].mean()))
        tree.feature[node], tree.threshold[node] = f, thr
        tree.left[node], tree.right[node] = left, right
        stack.append((right, 2 * heap_id + 1, ri, depth + 1))
        stack.append((left, 2 * heap_id, li, depth + 1))
    return tree


def _check_xy(features, targets):
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"features {X.shape} and targets {y.shape} are inconsistent")
    if X.shape[0] < 2:
        raise EmptyData(f"need at least 2 samples, got {X.shape[0]}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise NonFiniteInput("features or targets contain NaN/inf")
    return X, y


def _fit_one(args):
    X, y, cfg, t = args
    return fit_tree(X, y, cfg, t)


def fit(features, targets, cfg: ForestConfig = ForestConfig(), jobs: int = 1) -> ForestModel:
    X, y = _check_xy(features, targets)
    work = [(X, y, cfg, t) for t in range(cfg.n_trees)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(_fit_one, work))
    else:
        trees = [_fit_one(w) for w in work]
    return ForestModel(cfg, X.shape[1], trees)


def predict_raw(model: ForestModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise DimensionMismatch(f"model expects {model.n_features} features, got {X.shape[1]}")
    return np.mean([t.predict(X) for t in model.trees], axis=0)


def predict(model: ForestModel, x) -> float:
    """Mean leaf value over trees for one feature vector, clamped at 0 days."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("predict takes one feature vector; use predict_many")
    return float(max(predict_raw(model, x[None])[0], 0.0))


def predict_many(model: ForestModel, X) -> np.ndarray:
    return np.maximum(predict_raw(model, X), 0.0)


def fold_assignment(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


def cross_validate(features, targets, folds: int = 5, grid=((30, 10),), seed: int = 0,
                   score=None) -> tuple[tuple[int, int], dict]:
    """k-fold CV over (n_trees, max_depth) pairs.

    ``score(pred_days, true_days)`` defaults to survival-class accuracy.
    Ties prefer fewer trees, then shallower depth.
    """
    X, y = _check_xy(features, targets)
    if X.shape[0] < folds:
        raise TooFewSamples(f"{X.shape[0]} samples cannot fill {folds} folds")
    if score is None:
        from .survival import bucket_accuracy as score
    parts = fold_assignment(X.shape[0], folds, seed)
    scores = {}
    for n_trees, depth in sorted({(int(a), int(b)) for a, b in grid}):
        cfg = ForestConfig(n_trees=n_trees, max_depth=depth, seed=seed)
        per_fold = []
        for k, test in enumerate(parts):
            train = np.concatenate([p for j, p in enumerate(parts) if j != k])
            model = fit(X[train], y[train], cfg)
            per_fold.append(score(predict_many(model, X[test]), y[test]))
        scores[(n_trees, depth)] = float(np.mean(per_fold))
    best = None
    for key in sorted(scores):
        if best is None or scores[key] > scores[best]:
            best = key
    return best, scores
