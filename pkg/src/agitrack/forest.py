"""Tree-ensemble classifiers: Extra Trees, Random Forest, and gradient-boosted
regression trees on logistic loss, written from scratch for full control over
determinism and serialization.

Per-tree RNG streams are derived from the master seed by tree index, so
serial and (potential) parallel builds produce identical models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .core import ValidationError

MODEL_FORMAT_VERSION = 1


class ForestKind(str, Enum):
    EXTRA_TREES = "extra_trees"
    RANDOM_FOREST = "random_forest"
    GRADIENT_BOOSTED = "gradient_boosted"


@dataclass
class Dataset:
    """Feature matrix + binary labels with a named schema."""

    schema: Tuple[str, ...]
    rows: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ValidationError("rows must be a 2-D matrix")
        n, d = self.rows.shape
        if n == 0:
            raise ValidationError("dataset must contain at least one row")
        if len(self.schema) != d:
            raise ValidationError("schema length must match row width")
        if self.labels.shape != (n,):
            raise ValidationError("labels must be one per row")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValidationError("labels must be binary 0/1")
        if np.any(~np.isfinite(self.rows)):
            raise ValidationError("rows must be finite (no NaN/Inf)")
        if self.groups is not None:
            self.groups = np.asarray(self.groups)
            if self.groups.shape != (n,):
                raise ValidationError("groups must be one per row")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        groups = self.groups[idx] if self.groups is not None else None
        return Dataset(self.schema, self.rows[idx], self.labels[idx], groups)


def split_train_test(
    ds: Dataset, train_fraction: float, seed: int
) -> Tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie in (0, 1)")
    if ds.n < 2:
        raise ValidationError("need at least 2 rows to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_train = int(math.floor(ds.n * train_fraction))
    n_train = min(max(n_train, 1), ds.n - 1)
    return ds.take(perm[:n_train]), ds.take(perm[n_train:])


def oversample_minority(ds: Dataset, seed: int) -> Dataset:
    counts = np.bincount(ds.labels, minlength=2)
    if counts[0] == 0 or counts[1] == 0:
        raise ValidationError("oversampling requires both classes present")
    if counts[0] == counts[1]:
        return ds
    minority = int(np.argmin(counts))
    need = int(abs(counts[0] - counts[1]))
    minority_idx = np.nonzero(ds.labels == minority)[0]
    rng = np.random.default_rng(seed)
    extra = rng.choice(minority_idx, size=need, replace=True)
    idx = np.concatenate([np.arange(ds.n), extra])
    return ds.take(idx)


@dataclass
class Tree:
    """Flat-array binary tree. Leaves have feature == -1; value is the
    positive-class probability (classification trees) or the additive score
    (boosted regression trees)."""

    feature: List[int] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    left: List[int] = field(default_factory=list)
    right: List[int] = field(default_factory=list)
    value: List[float] = field(default_factory=list)

    def add_leaf(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    def add_split(self, feature: int, threshold: float) -> int:
        self.feature.append(int(feature))
        self.threshold.append(float(threshold))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        val = np.asarray(self.value)
        node = np.zeros(len(X), dtype=np.int64)
        live = feat[node] >= 0
        while np.any(live):
            idx = np.nonzero(live)[0]
            cur = node[idx]
            go_left = X[idx, feat[cur]] < thr[cur]
            node[idx] = np.where(go_left, left[cur], right[cur])
            live[idx] = feat[node[idx]] >= 0
        return val[node]

    def to_doc(self) -> dict:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "value": self.value,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Tree":
        return cls(
            feature=[int(v) for v in doc["feature"]],
            threshold=[float(v) for v in doc["threshold"]],
            left=[int(v) for v in doc["left"]],
            right=[int(v) for v in doc["right"]],
            value=[float(v) for v in doc["value"]],
        )


def _gini(pos: float, total: float) -> float:
    if total <= 0:
        return 0.0
    p = pos / total
    return 2.0 * p * (1.0 - p)


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tree_index,)))


def _best_random_split(
    X: np.ndarray, y: np.ndarray, features: np.ndarray, rng: np.random.Generator
) -> Tuple[float, int, float]:
    """Extra-Trees node search: one uniform threshold per candidate feature."""
    n = len(y)
    pos = float(np.sum(y))
    parent = _gini(pos, n)
    best = (0.0, -1, 0.0)
    for f in features:
        col = X[:, f]
        lo = float(col.min())
        hi = float(col.max())
        if lo == hi:
            continue
        thr = float(rng.uniform(lo, hi))
        mask = col < thr
        n_l = int(np.count_nonzero(mask))
        if n_l == 0 or n_l == n:
            continue
        pos_l = float(np.sum(y[mask]))
        gain = parent - (
            n_l / n * _gini(pos_l, n_l) + (n - n_l) / n * _gini(pos - pos_l, n - n_l)
        )
        if gain > best[0]:
            best = (gain, int(f), thr)
    return best


def _best_exhaustive_split(
    X: np.ndarray, y: np.ndarray, features: np.ndarray
) -> Tuple[float, int, float]:
    """Best Gini split over all midpoint thresholds of the candidate features."""
    n = len(y)
    pos = float(np.sum(y))
    parent = _gini(pos, n)
    best = (0.0, -1, 0.0)
    for f in features:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        ys = y[order]
        distinct = np.nonzero(np.diff(xs) > 0)[0]
        if len(distinct) == 0:
            continue
        cum_pos = np.cumsum(ys)
        n_l = distinct + 1
        pos_l = cum_pos[distinct].astype(np.float64)
        n_r = n - n_l
        pos_r = pos - pos_l
        p_l = pos_l / n_l
        p_r = pos_r / n_r
        child = (n_l / n) * 2 * p_l * (1 - p_l) + (n_r / n) * 2 * p_r * (1 - p_r)
        gains = parent - child
        k = int(np.argmax(gains))
        if gains[k] > best[0]:
            thr = 0.5 * (xs[distinct[k]] + xs[distinct[k] + 1])
            best = (float(gains[k]), int(f), float(thr))
    return best


def _best_variance_split(
    X: np.ndarray, r: np.ndarray, features: np.ndarray
) -> Tuple[float, int, float]:
    """Best squared-error-reduction split for boosted regression trees."""
    n = len(r)
    total = float(np.sum(r))
    sse_parent = float(np.sum(r * r)) - total * total / n
    best = (0.0, -1, 0.0)
    for f in features:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        rs = r[order]
        distinct = np.nonzero(np.diff(xs) > 0)[0]
        if len(distinct) == 0:
            continue
        csum = np.cumsum(rs)
        csq = np.cumsum(rs * rs)
        n_l = distinct + 1
        sum_l = csum[distinct]
        sq_l = csq[distinct]
        n_r = n - n_l
        sum_r = total - sum_l
        sq_r = csq[-1] - sq_l
        sse = (sq_l - sum_l**2 / n_l) + (sq_r - sum_r**2 / n_r)
        gains = sse_parent - sse
        k = int(np.argmax(gains))
        if gains[k] > best[0] + 1e-12:
            thr = 0.5 * (xs[distinct[k]] + xs[distinct[k] + 1])
            best = (float(gains[k]), int(f), float(thr))
    return best


def _grow_classification_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    *,
    exhaustive: bool,
    max_features: int,
    min_samples_split: int,
    max_depth: Optional[int],
    importance: np.ndarray,
) -> Tree:
    tree = Tree()
    n_root = len(y)

    def build(idx: np.ndarray, depth: int) -> int:
        ys = y[idx]
        n = len(idx)
        pos = float(np.sum(ys))
        if (
            n < min_samples_split
            or pos == 0.0
            or pos == n
            or (max_depth is not None and depth >= max_depth)
        ):
            return tree.add_leaf(pos / n)
        features = rng.choice(X.shape[1], size=max_features, replace=False)
        sub = X[idx]
        if exhaustive:
            gain, f, thr = _best_exhaustive_split(sub, ys, features)
        else:
            gain, f, thr = _best_random_split(sub, ys, features, rng)
        if f < 0 or gain <= 0.0:
            return tree.add_leaf(pos / n)
        importance[f] += gain * n / n_root
        node = tree.add_split(f, thr)
        mask = sub[:, f] < thr
        left = build(idx[mask], depth + 1)
        right = build(idx[~mask], depth + 1)
        tree.left[node] = left
        tree.right[node] = right
        return node

    build(np.arange(len(y)), 0)
    return tree


def _grow_regression_tree(
    X: np.ndarray,
    r: np.ndarray,
    hessian: np.ndarray,
    *,
    max_depth: int,
    min_samples_split: int,
    importance: np.ndarray,
) -> Tree:
    tree = Tree()
    n_root = len(r)
    all_features = np.arange(X.shape[1])

    def leaf_value(idx: np.ndarray) -> float:
        num = float(np.sum(r[idx]))
        den = float(np.sum(hessian[idx]))
        if den <= 1e-12:
            return 0.0
        return float(np.clip(num / den, -4.0, 4.0))

    def build(idx: np.ndarray, depth: int) -> int:
        if len(idx) < min_samples_split or depth >= max_depth:
            return tree.add_leaf(leaf_value(idx))
        gain, f, thr = _best_variance_split(X[idx], r[idx], all_features)
        if f < 0:
            return tree.add_leaf(leaf_value(idx))
        importance[f] += gain / n_root
        node = tree.add_split(f, thr)
        mask = X[idx, f] < thr
        left = build(idx[mask], depth + 1)
        right = build(idx[~mask], depth + 1)
        tree.left[node] = left
        tree.right[node] = right
        return node

    build(np.arange(len(r)), 0)
    return tree


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


class _ForestBase(BaseEstimator, ClassifierMixin):
    """Shared fit/predict machinery; subclasses set `kind` and tree growth."""

    kind: ForestKind

    def _validate_fit_args(self, X, y) -> Tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise ValidationError("X must be a non-empty 2-D matrix")
        if y.shape != (X.shape[0],) or not np.all(np.isin(y, (0, 1))):
            raise ValidationError("y must be binary 0/1, one label per row")
        if np.any(~np.isfinite(X)):
            raise ValidationError("X must be finite")
        return X, y

    def _validate_rows(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.schema_):
            raise ValidationError(
                f"row length {X.shape[1]} != schema length {len(self.schema_)}"
            )
        if np.any(~np.isfinite(X)):
            raise ValidationError("rows must be finite")
        return X

    def fit(self, X, y, schema: Optional[Sequence[str]] = None):
        raise NotImplementedError

    def _scores(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        X = self._validate_rows(X)
        p = self._scores(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def score_row(self, row) -> float:
        """Positive-class probability for one feature row."""
        return float(self.predict_proba(np.asarray(row)[None, :])[0, 1])

    @property
    def feature_importances_(self) -> np.ndarray:
        total = float(np.sum(self._raw_importance_))
        if total <= 0.0:
            return np.zeros_like(self._raw_importance_)
        return self._raw_importance_ / total

    def _doc_header(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind.value,
            "seed": self.seed,
            "hyperparams": self.get_params(),
            "schema": list(self.schema_),
        }

    def to_doc(self) -> dict:
        doc = self._doc_header()
        doc["trees"] = [t.to_doc() for t in self.trees_]
        doc["importance"] = [float(v) for v in self._raw_importance_]
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")


class ExtraTrees(_ForestBase):
    """Extremely randomized trees: no bootstrap, sqrt(d) candidate features
    per node, one uniform-random threshold per candidate, best Gini kept."""

    kind = ForestKind.EXTRA_TREES

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: Optional[int] = None,
        min_samples_split: int = 2,
        seed: int = 0,
    ) -> None:
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.seed = seed

    def fit(self, X, y, schema: Optional[Sequence[str]] = None):
        X, y = self._validate_fit_args(X, y)
        d = X.shape[1]
        self.schema_ = tuple(schema) if schema else tuple(f"f{i}" for i in range(d))
        self._raw_importance_ = np.zeros(d)
        max_features = max(1, math.isqrt(d) + (0 if math.isqrt(d) ** 2 == d else 1))
        self.trees_ = []
        for t in range(self.n_trees):
            rng = _tree_rng(self.seed, t)
            self.trees_.append(
                _grow_classification_tree(
                    X,
                    y,
                    rng,
                    exhaustive=False,
                    max_features=max_features,
                    min_samples_split=self.min_samples_split,
                    max_depth=self.max_depth,
                    importance=self._raw_importance_,
                )
            )
        return self

    def _scores(self, X: np.ndarray) -> np.ndarray:
        acc = np.zeros(len(X))
        for tree in self.trees_:
            acc += tree.predict(X)
        return acc / len(self.trees_)


class RandomForest(_ForestBase):
    """Bootstrap per tree; exhaustive best Gini threshold among sqrt(d)
    sampled features at each node."""

    kind = ForestKind.RANDOM_FOREST

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: Optional[int] = None,
        min_samples_split: int = 2,
        seed: int = 0,
    ) -> None:
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.seed = seed

    def fit(self, X, y, schema: Optional[Sequence[str]] = None):
        X, y = self._validate_fit_args(X, y)
        n, d = X.shape
        self.schema_ = tuple(schema) if schema else tuple(f"f{i}" for i in range(d))
        self._raw_importance_ = np.zeros(d)
        max_features = max(1, math.isqrt(d) + (0 if math.isqrt(d) ** 2 == d else 1))
        self.trees_ = []
        for t in range(self.n_trees):
            rng = _tree_rng(self.seed, t)
            boot = rng.integers(0, n, size=n)
            self.trees_.append(
                _grow_classification_tree(
                    X[boot],
                    y[boot],
                    rng,
                    exhaustive=True,
                    max_features=max_features,
                    min_samples_split=self.min_samples_split,
                    max_depth=self.max_depth,
                    importance=self._raw_importance_,
                )
            )
        return self

    def _scores(self, X: np.ndarray) -> np.ndarray:
        acc = np.zeros(len(X))
        for tree in self.trees_:
            acc += tree.predict(X)
        return acc / len(self.trees_)


class GradientBoostedTrees(_ForestBase):
    """Additive depth-limited regression trees on logistic loss with
    shrinkage; leaf values are Newton steps on the binomial deviance."""

    kind = ForestKind.GRADIENT_BOOSTED

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: int = 3,
        min_samples_split: int = 2,
        learning_rate: float = 0.1,
        seed: int = 0,
    ) -> None:
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y, schema: Optional[Sequence[str]] = None):
        X, y = self._validate_fit_args(X, y)
        n, d = X.shape
        self.schema_ = tuple(schema) if schema else tuple(f"f{i}" for i in range(d))
        self._raw_importance_ = np.zeros(d)
        pos = float(np.mean(y))
        pos = min(max(pos, 1e-6), 1.0 - 1e-6)
        self.base_score_ = float(np.log(pos / (1.0 - pos)))
        score = np.full(n, self.base_score_)
        yf = y.astype(np.float64)
        self.trees_ = []
        for _ in range(self.n_trees):
            p = _sigmoid(score)
            residual = yf - p
            hessian = p * (1.0 - p)
            tree = _grow_regression_tree(
                X,
                residual,
                hessian,
                max_depth=self.max_depth,
                min_samples_split=self.min_samples_split,
                importance=self._raw_importance_,
            )
            score += self.learning_rate * tree.predict(X)
            self.trees_.append(tree)
        return self

    def _scores(self, X: np.ndarray) -> np.ndarray:
        score = np.full(len(X), self.base_score_)
        for tree in self.trees_:
            score += self.learning_rate * tree.predict(X)
        return _sigmoid(score)

    def to_doc(self) -> dict:
        doc = super().to_doc()
        doc["base_score"] = self.base_score_
        return doc


_KIND_TO_CLASS = {
    ForestKind.EXTRA_TREES: ExtraTrees,
    ForestKind.RANDOM_FOREST: RandomForest,
    ForestKind.GRADIENT_BOOSTED: GradientBoostedTrees,
}


def train(
    ds: Dataset,
    kind: ForestKind,
    hyperparams: Optional[Dict] = None,
    seed: int = 0,
) -> _ForestBase:
    params = dict(hyperparams or {})
    params["seed"] = seed
    model = _KIND_TO_CLASS[ForestKind(kind)](**params)
    model.fit(ds.rows, ds.labels, schema=ds.schema)
    return model


def load_model(path: str) -> _ForestBase:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return model_from_doc(doc)


def model_from_doc(doc: dict) -> _ForestBase:
    kind = ForestKind(doc["kind"])
    cls = _KIND_TO_CLASS[kind]
    model = cls(**doc["hyperparams"]) if doc.get("hyperparams") else cls()
    model.schema_ = tuple(doc["schema"])
    model.trees_ = [Tree.from_doc(t) for t in doc["trees"]]
    model._raw_importance_ = np.asarray(doc["importance"], dtype=np.float64)
    if kind == ForestKind.GRADIENT_BOOSTED:
        model.base_score_ = float(doc["base_score"])
    return model


def auc_score(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Rank-statistic AUC with tie handling (ties contribute 1/2 a pair)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[labels == 1]))
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]
    confusion: np.ndarray  # [[tn, fp], [fn, tp]]
    per_feature_importance: np.ndarray

    def to_doc(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "confusion": self.confusion.tolist(),
            "per_feature_importance": [float(v) for v in self.per_feature_importance],
        }


def evaluate(model: _ForestBase, test: Dataset, threshold: float = 0.5) -> EvalReport:
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    scores = model.predict_proba(test.rows)[:, 1]
    return evaluate_scores(scores, test.labels, threshold, model.feature_importances_)


def evaluate_scores(
    scores: np.ndarray,
    labels: np.ndarray,
    threshold: float = 0.5,
    importance: Optional[np.ndarray] = None,
) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    pred = (np.asarray(scores) >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    n = len(labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return EvalReport(
        accuracy=(tp + tn) / n,
        precision=precision,
        recall=recall,
        f1=f1,
        auc=auc_score(scores, labels),
        confusion=np.array([[tn, fp], [fn, tp]], dtype=np.int64),
        per_feature_importance=(
            importance if importance is not None else np.array([])
        ),
    )
