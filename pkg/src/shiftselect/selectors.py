"""Algorithm selectors: models mapping dataset descriptors to algorithm suitability scores.

Every selector exposes ``scores(descriptors, perf=None)`` returning a
``(J, M)`` array (higher = more suitable) and ``probabilities`` for the
binary test-time rule. Descriptors are raw ``(d_sc, d_ls, d_cs, r, n, d)``
rows; each selector applies its own stored preprocessing.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _nn
from . import tree as cart
from .metadataset import (
    DEFAULT_EPSILON,
    DESCRIPTOR_FIELDS,
    LOG_FIELDS,
    DatasetDescriptor,
    MetaDataset,
    Standardizer,
)

log = logging.getLogger(__name__)

SELECTOR_KINDS = (
    "mlp_multilabel",
    "regression",
    "linear",
    "knn",
    "tree",
    "mimic_tree",
    "global_best",
    "random",
    "oracle",
)
SHIFT_FIELDS = ("d_sc", "d_ls", "d_cs")
NAIVE_FIELDS = ("n", "d")
RULES = ("top_logit", "binary_random")


@dataclass(frozen=True)
class MlpSpec:
    hidden_layers: int = 4
    width: int = 128
    epochs: int = 2000
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.hidden_layers < 0 or self.epochs < 1:
            raise ValueError(f"invalid MLP spec {self}")

    @property
    def hidden(self) -> tuple[int, ...]:
        return (self.width,) * self.hidden_layers


@dataclass(frozen=True)
class TreeSpec:
    max_depth: int = 3
    min_samples_leaf: int = 5

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


def naive_descriptor_view(descriptor) -> np.ndarray:
    """Only the trivial properties: training size and dimensionality."""
    if isinstance(descriptor, DatasetDescriptor):
        return np.array([descriptor.n, descriptor.d], dtype=float)
    arr = np.asarray(descriptor, dtype=float)
    cols = [DESCRIPTOR_FIELDS.index(f) for f in NAIVE_FIELDS]
    return arr[..., cols]


def shift_magnitude_view(X) -> np.ndarray:
    """Replace each shift degree by its distance from the balanced value 0.5."""
    X = np.array(X, dtype=float, copy=True)
    cols = [DESCRIPTOR_FIELDS.index(f) for f in SHIFT_FIELDS]
    X[..., cols] = np.abs(X[..., cols] - 0.5)
    return X


def _as_matrix(descriptors) -> np.ndarray:
    if isinstance(descriptors, DatasetDescriptor):
        return descriptors.as_array()[None, :]
    if isinstance(descriptors, MetaDataset):
        return descriptors.descriptors()
    if isinstance(descriptors, (list, tuple)) and descriptors and isinstance(
        descriptors[0], DatasetDescriptor
    ):
        return np.vstack([d.as_array() for d in descriptors])
    return np.atleast_2d(np.asarray(descriptors, dtype=float))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class Selector:
    kind = "base"

    def __init__(self, algorithms: Sequence[str], features: Sequence[str] = DESCRIPTOR_FIELDS):
        self.algorithms = tuple(algorithms)
        self.features = tuple(features)
        unknown = set(self.features) - set(DESCRIPTOR_FIELDS)
        if unknown:
            raise ValueError(f"unknown descriptor features {sorted(unknown)}")
        self.meta_fingerprint: str | None = None

    @property
    def n_algorithms(self) -> int:
        return len(self.algorithms)

    def _columns(self, X):
        X = _as_matrix(X)
        return X[:, [DESCRIPTOR_FIELDS.index(f) for f in self.features]]

    def scores(self, descriptors, perf=None) -> np.ndarray:
        raise NotImplementedError

    def probabilities(self, descriptors, perf=None) -> np.ndarray:
        return self.scores(descriptors, perf)

    def select(self, descriptors, rule="top_logit", rng=None, perf=None) -> np.ndarray:
        probs = self.probabilities(descriptors, perf) if rule == "binary_random" else None
        scores = self.scores(descriptors, perf)
        if rule == "top_logit":
            return np.argmax(scores, axis=1)
        if rule == "binary_random":
            rng = rng if rng is not None else np.random.default_rng(0)
            return np.array([select_algorithm(p, rule, rng) for p in probs])
        raise ValueError(f"unknown selection rule {rule!r}")

    # serialization
    def _params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "algorithms": list(self.algorithms),
            "features": list(self.features),
            "meta_fingerprint": self.meta_fingerprint,
            **self._params(),
        }


# ---------------------------------------------------------------------------
# parametric selectors


class NetworkSelector(Selector):
    """Multi-label network over standardized descriptors (MLP or linear)."""

    def __init__(self, kind, net, standardizer, spec, algorithms, features, masked=()):
        super().__init__(algorithms, features)
        self.kind = kind
        self.net = net
        self.standardizer = standardizer
        self.spec = spec
        self.masked = tuple(masked)
        self.loss_history: np.ndarray | None = None

    def inputs(self, descriptors) -> np.ndarray:
        Z = self.standardizer.transform(self._columns(descriptors))
        if self.masked:
            # standardized mean of a masked feature is exactly 0
            Z[:, [self.features.index(f) for f in self.masked]] = 0.0
        return Z

    def scores(self, descriptors, perf=None):
        return self.net.forward(self.inputs(descriptors))

    def probabilities(self, descriptors, perf=None):
        return _sigmoid(self.scores(descriptors))

    def _params(self):
        return {
            "spec": asdict(self.spec),
            "parameters": self.net.to_dict(),
            "standardization": self.standardizer.to_dict(),
            "masked": list(self.masked),
        }


class RegressionSelector(Selector):
    """Predicts each algorithm's error from descriptor + one-hot algorithm id."""

    kind = "regression"

    def __init__(self, net, standardizer, spec, algorithms, features, epsilon=DEFAULT_EPSILON):
        super().__init__(algorithms, features)
        self.net = net
        self.standardizer = standardizer
        self.spec = spec
        self.epsilon = epsilon
        self.loss_history: np.ndarray | None = None

    def predicted_errors(self, descriptors) -> np.ndarray:
        Z = self.standardizer.transform(self._columns(descriptors))
        rows = expand_one_hot(Z, self.n_algorithms)
        return self.net.forward(rows).reshape(len(Z), self.n_algorithms)

    def scores(self, descriptors, perf=None):
        return -self.predicted_errors(descriptors)

    def probabilities(self, descriptors, perf=None):
        pred = self.predicted_errors(descriptors)
        return (pred - pred.min(axis=1, keepdims=True) <= self.epsilon).astype(float)

    def _params(self):
        return {
            "spec": asdict(self.spec),
            "parameters": self.net.to_dict(),
            "standardization": self.standardizer.to_dict(),
            "epsilon": self.epsilon,
        }


def expand_one_hot(Z, n_algorithms) -> np.ndarray:
    """Each descriptor row repeated M times with a one-hot algorithm code appended."""
    J = len(Z)
    rep = np.repeat(Z, n_algorithms, axis=0)
    codes = np.tile(np.eye(n_algorithms), (J, 1))
    return np.hstack([rep, codes])


def _standardizer_for(X, features):
    return Standardizer.fit(X, [i for i, f in enumerate(features) if f in LOG_FIELDS])


def _require_records(meta, minimum=2):
    if len(meta) < minimum:
        raise ValueError(f"need at least {minimum} meta records, got {len(meta)}")


def train_mlp_selector(
    meta: MetaDataset,
    spec: MlpSpec = MlpSpec(),
    features: Sequence[str] = DESCRIPTOR_FIELDS,
    masked: Sequence[str] = (),
    kind: str = "mlp_multilabel",
) -> NetworkSelector:
    """Multi-label selector minimizing binary cross-entropy against suitability labels."""
    _require_records(meta)
    features = tuple(features)
    X = meta.descriptors()[:, [DESCRIPTOR_FIELDS.index(f) for f in features]]
    std = _standardizer_for(X, features)
    if std.dropped:
        log.warning("constant descriptor features dropped: %s", [features[i] for i in std.dropped])
    rng = np.random.default_rng(spec.seed)
    net = _nn.MLP(len(features), spec.hidden, len(meta.algorithms), rng)
    sel = NetworkSelector(kind, net, std, spec, meta.algorithms, features, masked)
    targets = meta.label_matrix().astype(float)
    sel.loss_history = _nn.fit(net, sel.inputs(meta.descriptors()), targets, _nn.bce_with_logits, spec.epochs, spec.lr)
    return sel


def train_linear_selector(
    meta: MetaDataset,
    spec: MlpSpec = MlpSpec(hidden_layers=0),
    features: Sequence[str] = DESCRIPTOR_FIELDS,
    masked: Sequence[str] = (),
) -> NetworkSelector:
    """One-vs-rest logistic outputs (no hidden layer) trained with BCE."""
    spec = MlpSpec(0, spec.width, spec.epochs, spec.lr, spec.seed)
    return train_mlp_selector(meta, spec, features, masked, kind="linear")


def train_regression_selector(
    meta: MetaDataset,
    spec: MlpSpec = MlpSpec(),
    features: Sequence[str] = DESCRIPTOR_FIELDS,
) -> RegressionSelector:
    """Network regressing each algorithm's error; selection is the lowest prediction."""
    _require_records(meta)
    features = tuple(features)
    X = meta.descriptors()[:, [DESCRIPTOR_FIELDS.index(f) for f in features]]
    std = _standardizer_for(X, features)
    rng = np.random.default_rng(spec.seed)
    M = len(meta.algorithms)
    net = _nn.MLP(len(features) + M, spec.hidden, 1, rng)
    sel = RegressionSelector(net, std, spec, meta.algorithms, features, meta.epsilon)
    rows = expand_one_hot(std.transform(X), M)
    targets = meta.perf_matrix().reshape(-1, 1)
    sel.loss_history = _nn.fit(net, rows, targets, _nn.mse, spec.epochs, spec.lr)
    return sel


# ---------------------------------------------------------------------------
# non-parametric selectors


class KNNSelector(Selector):
    kind = "knn"

    def __init__(self, Z, labels, standardizer, k, algorithms, features):
        super().__init__(algorithms, features)
        self.Z = np.asarray(Z, dtype=float)
        self.labels = np.asarray(labels, dtype=float)
        self.standardizer = standardizer
        self.k = k

    def scores(self, descriptors, perf=None):
        Q = self.standardizer.transform(self._columns(descriptors))
        d2 = ((Q[:, None, :] - self.Z[None, :, :]) ** 2).sum(axis=2)
        # stable sort: equidistant neighbours resolved by record order
        nearest = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        return self.labels[nearest].mean(axis=1)

    def _params(self):
        return {
            "spec": {"k": self.k},
            "parameters": {"Z": self.Z.tolist(), "labels": self.labels.tolist()},
            "standardization": self.standardizer.to_dict(),
        }


def train_knn_selector(meta: MetaDataset, k: int = 5, features: Sequence[str] = DESCRIPTOR_FIELDS) -> KNNSelector:
    if len(meta) == 0:
        raise ValueError("empty meta-dataset")
    if k > len(meta):
        log.warning("k=%d exceeds %d records; clamping", k, len(meta))
        k = len(meta)
    features = tuple(features)
    X = meta.descriptors()[:, [DESCRIPTOR_FIELDS.index(f) for f in features]]
    std = _standardizer_for(X, features)
    return KNNSelector(std.transform(X), meta.label_matrix(), std, k, meta.algorithms, features)


class TreeSelector(Selector):
    """CART whose leaves hold mean label vectors (or class frequencies for a mimic tree).

    Trees work on raw descriptor values so thresholds read in natural units;
    a mimic tree sees shift degrees as |d - 0.5|.
    """

    def __init__(self, root, spec, algorithms, features, kind="tree"):
        super().__init__(algorithms, features)
        self.root = root
        self.spec = spec
        self.kind = kind

    def inputs(self, descriptors):
        X = _as_matrix(descriptors)
        if self.kind == "mimic_tree":
            X = shift_magnitude_view(X)
        return X[:, [DESCRIPTOR_FIELDS.index(f) for f in self.features]]

    def scores(self, descriptors, perf=None):
        return cart.predict(self.root, self.inputs(descriptors))

    @property
    def feature_names(self) -> list[str]:
        if self.kind == "mimic_tree":
            return [f"|{f}-0.5|" if f in SHIFT_FIELDS else f for f in self.features]
        return list(self.features)

    def _params(self):
        return {"spec": asdict(self.spec), "parameters": self.root.to_dict()}


def train_tree_selector(
    meta: MetaDataset, spec: TreeSpec = TreeSpec(), features: Sequence[str] = DESCRIPTOR_FIELDS
) -> TreeSelector:
    if len(meta) == 0:
        raise ValueError("empty meta-dataset")
    sel = TreeSelector(None, spec, meta.algorithms, features)
    sel.root = cart.build_tree(sel.inputs(meta.descriptors()), meta.label_matrix(), spec.max_depth, spec.min_samples_leaf)
    return sel


def train_mimic_tree(meta: MetaDataset, mlp: Selector, spec: TreeSpec = TreeSpec()) -> TreeSelector:
    """Single-output tree fit to the MLP's top-logit choices on the meta-train records."""
    choices = mlp.select(meta.descriptors())
    targets = np.eye(len(meta.algorithms))[choices]
    sel = TreeSelector(None, spec, meta.algorithms, DESCRIPTOR_FIELDS, kind="mimic_tree")
    sel.root = cart.build_tree(sel.inputs(meta.descriptors()), targets, spec.max_depth, spec.min_samples_leaf)
    return sel


class GlobalBestSelector(Selector):
    """Always the algorithm with the lowest mean error over the meta-train tasks."""

    kind = "global_best"

    def __init__(self, best: int, algorithms):
        super().__init__(algorithms)
        self.best = int(best)

    def scores(self, descriptors, perf=None):
        out = np.zeros((len(_as_matrix(descriptors)), self.n_algorithms))
        out[:, self.best] = 1.0
        return out

    def _params(self):
        return {"spec": {}, "parameters": {"best": self.best}}


def train_global_best(meta: MetaDataset) -> GlobalBestSelector:
    if len(meta) == 0:
        raise ValueError("empty meta-dataset")
    return GlobalBestSelector(int(np.argmin(meta.perf_matrix().mean(axis=0))), meta.algorithms)


class RandomSelector(Selector):
    """Uniform random scores, a pure function of (seed, descriptor)."""

    kind = "random"

    def __init__(self, seed: int, algorithms):
        super().__init__(algorithms)
        self.seed = int(seed)

    def scores(self, descriptors, perf=None):
        X = _as_matrix(descriptors)
        out = np.empty((len(X), self.n_algorithms))
        for i, row in enumerate(X):
            digest = hashlib.sha256(row.astype("<f8").tobytes()).digest()
            key = int.from_bytes(digest[:8], "little")
            out[i] = np.random.default_rng([self.seed, key]).uniform(size=self.n_algorithms)
        return out

    def _params(self):
        return {"spec": {}, "parameters": {"seed": self.seed}}


class OracleSelector(Selector):
    """Scores are the negated true errors; needs the performance rows."""

    kind = "oracle"

    def scores(self, descriptors, perf=None):
        if perf is None:
            raise ValueError("the oracle selector needs the true performance vectors")
        return -np.atleast_2d(np.asarray(perf, dtype=float))

    def probabilities(self, descriptors, perf=None):
        s = self.scores(descriptors, perf)
        return (s.max(axis=1, keepdims=True) - s <= 1e-12).astype(float)

    def _params(self):
        return {"spec": {}, "parameters": {}}


# ---------------------------------------------------------------------------
# inference helpers


def predict_scores(selector: Selector, descriptor, perf=None) -> np.ndarray:
    """Scores for a single descriptor (M-vector)."""
    return selector.scores(descriptor, perf)[0]


def select_algorithm(scores, rule: str = "top_logit", rng=None, threshold: float = 0.5) -> int:
    """Pick one algorithm index from a score vector.

    ``top_logit`` takes the argmax (lowest index on ties). ``binary_random``
    draws uniformly among entries above ``threshold`` and falls back to the
    argmax when none qualifies.
    """
    scores = np.asarray(scores, dtype=float)
    if rule == "top_logit":
        return int(np.argmax(scores))
    if rule == "binary_random":
        positives = np.flatnonzero(scores > threshold)
        if positives.size == 0:
            return int(np.argmax(scores))
        if positives.size == 1:
            return int(positives[0])
        rng = rng if rng is not None else np.random.default_rng(0)
        return int(positives[rng.integers(positives.size)])
    raise ValueError(f"unknown selection rule {rule!r}")


# ---------------------------------------------------------------------------
# splitting and persistence


def split_meta(meta: MetaDataset, train_fraction: float = 0.8, seed: int = 0):
    """Deterministic train/eval split by hashing each task id."""
    train, held = [], []
    for i, tid in enumerate(meta.task_ids):
        digest = hashlib.sha256(f"{seed}:{tid}".encode()).digest()
        u = int.from_bytes(digest[:8], "big") / 2.0**64
        (train if u < train_fraction else held).append(i)
    return meta.subset(train), meta.subset(held)


def meta_fingerprint(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def save_selector(selector: Selector, path: str | Path) -> None:
    Path(path).write_text(json.dumps(selector.to_dict(), sort_keys=True))


def load_selector(path: str | Path) -> Selector:
    return selector_from_dict(json.loads(Path(path).read_text()))


def selector_from_dict(data: dict) -> Selector:
    kind = data["kind"]
    algorithms = tuple(data["algorithms"])
    features = tuple(data.get("features", DESCRIPTOR_FIELDS))
    params = data.get("parameters", {})
    if kind in ("mlp_multilabel", "linear"):
        sel = NetworkSelector(
            kind,
            _nn.MLP.from_dict(params),
            Standardizer.from_dict(data["standardization"]),
            MlpSpec(**data["spec"]),
            algorithms,
            features,
            data.get("masked", ()),
        )
    elif kind == "regression":
        sel = RegressionSelector(
            _nn.MLP.from_dict(params),
            Standardizer.from_dict(data["standardization"]),
            MlpSpec(**data["spec"]),
            algorithms,
            features,
            data.get("epsilon", DEFAULT_EPSILON),
        )
    elif kind == "knn":
        sel = KNNSelector(
            params["Z"],
            params["labels"],
            Standardizer.from_dict(data["standardization"]),
            data["spec"]["k"],
            algorithms,
            features,
        )
    elif kind in ("tree", "mimic_tree"):
        sel = TreeSelector(cart.Node.from_dict(params), TreeSpec(**data["spec"]), algorithms, features, kind)
    elif kind == "global_best":
        sel = GlobalBestSelector(params["best"], algorithms)
    elif kind == "random":
        sel = RandomSelector(params["seed"], algorithms)
    elif kind == "oracle":
        sel = OracleSelector(algorithms)
    else:
        raise ValueError(f"unknown selector kind {kind!r}")
    sel.meta_fingerprint = data.get("meta_fingerprint")
    return sel
