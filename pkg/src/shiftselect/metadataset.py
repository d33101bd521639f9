"""Dataset descriptors and the dataset-of-datasets built from trained candidate algorithms."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .algorithms import ALGORITHMS, TrainConfig, run_all_algorithms
from .shiftgen import (
    DegenerateInputError,
    GroupedPool,
    TaskDataset,
    TaskSpec,
    group_histogram,
    materialize,
    quantify_shifts,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DESCRIPTOR_FIELDS = ("d_sc", "d_ls", "d_cs", "r", "n", "d")
LOG_FIELDS = ("r", "n")
DEFAULT_EPSILON = 0.05
EPSILON_GRID = (0.0, 0.025, 0.05, 0.10)
DESCRIPTOR_MODES = ("oracle", "proxy", "estimated")
METRICS = ("worst_group", "average_group")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetDescriptor:
    d_sc: float
    d_ls: float
    d_cs: float
    r: float
    n: int
    d: int
    provenance: str = field(default="oracle", compare=False)

    def __post_init__(self):
        for name in ("d_sc", "d_ls", "d_cs"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")
        if not self.r > 0:
            raise ValueError(f"availability must be positive, got {self.r}")
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in DESCRIPTOR_FIELDS], dtype=float)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in DESCRIPTOR_FIELDS}

    @classmethod
    def from_array(cls, values, provenance="oracle") -> "DatasetDescriptor":
        v = [float(x) for x in values]
        return cls(v[0], v[1], v[2], v[3], int(round(v[4])), int(round(v[5])), provenance)

    @classmethod
    def from_dict(cls, data: dict, provenance="oracle") -> "DatasetDescriptor":
        return cls(
            float(data["d_sc"]),
            float(data["d_ls"]),
            float(data["d_cs"]),
            float(data["r"]),
            int(data["n"]),
            int(data["d"]),
            provenance,
        )


# ---------------------------------------------------------------------------
# availability and pseudo-attributes


def _mean_distance_to_centroid(X, members):
    if members.sum() == 0:
        return 0.0
    pts = X[members]
    return float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).mean())


def estimate_availability(X, y, a) -> float:
    """Ratio of mean distance to class centroids over mean distance to attribute centroids.

    Large values mean the attribute clusters are tighter than the class
    clusters, i.e. the spurious feature is easy to pick up.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    a = np.asarray(a)
    for name, v in (("class", y), ("attribute", a)):
        if not (np.any(v == 1) and np.any(v == -1)):
            raise DegenerateInputError(f"both {name} values must be present")
    num = sum(_mean_distance_to_centroid(X, y == c) for c in (1, -1))
    den = sum(_mean_distance_to_centroid(X, a == c) for c in (1, -1))
    if den <= 0.0:
        raise DegenerateInputError("attribute clusters are single points; availability is unbounded")
    return num / den


def kmeans2(X, rng, restarts=10, max_iter=100):
    """Two-means with farthest-point seeding; returns (labels, centroids, converged).

    Each restart seeds one centre at a random sample and the other at the
    sample farthest from it. The restart with the lowest inertia wins.
    """
    X = np.asarray(X, dtype=float)
    best = None
    for _ in range(restarts):
        first = X[int(rng.integers(len(X)))]
        second = X[int(np.argmax(((X - first) ** 2).sum(axis=1)))]
        centroids = np.vstack([first, second])
        converged = False
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            labels = np.argmin(d2, axis=1)
            new = np.vstack(
                [X[labels == k].mean(axis=0) if np.any(labels == k) else centroids[k] for k in (0, 1)]
            )
            if np.array_equal(new, centroids):
                converged = True
                break
            centroids = new
        inertia = float(((X - centroids[labels]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, labels, centroids, converged)
    return best[1], best[2], best[3]


def estimate_attributes(X, y, rng, restarts=10, max_iter=100):
    """Pseudo-attributes in {-1, +1} from per-class two-means clustering.

    Cluster identities are matched across the two classes by nearest
    centroids, then flipped globally so the larger attribute population is +1.
    Returns ``(attributes, converged)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    attrs = np.zeros(len(y), dtype=np.int64)
    centroids = {}
    converged = True
    for c in (1, -1):
        idx = np.flatnonzero(y == c)
        if len(idx) < 2:
            raise DegenerateInputError(f"class {c:+d} has fewer than 2 samples")
        # lexicographic order makes the result independent of sample order
        order = np.lexsort(X[idx].T[::-1])
        labels, cents, ok = kmeans2(X[idx[order]], rng, restarts, max_iter)
        converged &= ok
        cluster = np.empty(len(idx), dtype=np.int64)
        cluster[order] = labels
        attrs[idx] = np.where(cluster == 0, 1, -1)
        centroids[c] = cents
    pos, neg = centroids[1], centroids[-1]
    straight = np.linalg.norm(pos[0] - neg[0]) + np.linalg.norm(pos[1] - neg[1])
    crossed = np.linalg.norm(pos[0] - neg[1]) + np.linalg.norm(pos[1] - neg[0])
    if crossed < straight:
        attrs[y == -1] *= -1
    if np.sum(attrs == 1) < np.sum(attrs == -1):
        attrs = -attrs
    return attrs, bool(converged)


# ---------------------------------------------------------------------------
# descriptors


def _task_d(task: TaskDataset) -> int:
    return int(task.meta.get("d", task.p))


def compute_descriptor_oracle(task: TaskDataset) -> DatasetDescriptor:
    """Ground-truth degrees from the train histogram; generative availability when known."""
    s = quantify_shifts(task.train_counts())
    r = task.meta.get("r")
    provenance = "oracle"
    if r is None:
        r = estimate_availability(task.X_train, task.y_train, task.a_train)
        provenance = "proxy"
    return DatasetDescriptor(s.d_sc, s.d_ls, s.d_cs, float(r), task.n, _task_d(task), provenance)


def compute_descriptor_proxy(task: TaskDataset) -> DatasetDescriptor:
    """True degrees with availability measured from data using true attributes."""
    s = quantify_shifts(task.train_counts())
    r = estimate_availability(task.X_train, task.y_train, task.a_train)
    return DatasetDescriptor(s.d_sc, s.d_ls, s.d_cs, r, task.n, _task_d(task), "proxy")


def compute_descriptor_estimated(task: TaskDataset, rng: np.random.Generator) -> DatasetDescriptor:
    """Descriptor from pseudo-attributes; the label shift uses the (known) class labels."""
    pseudo, converged = estimate_attributes(task.X_train, task.y_train, rng)
    s = quantify_shifts(group_histogram(task.y_train, pseudo))
    true_ls = quantify_shifts(task.train_counts()).d_ls
    try:
        r = estimate_availability(task.X_train, task.y_train, pseudo)
    except DegenerateInputError:
        r = float(task.meta.get("r") or 1.0)
        converged = False
    provenance = "estimated" if converged else "estimated-unconverged"
    return DatasetDescriptor(s.d_sc, true_ls, s.d_cs, r, task.n, _task_d(task), provenance)


def compute_descriptor(task: TaskDataset, mode: str = "oracle", rng=None) -> DatasetDescriptor:
    if mode == "oracle":
        return compute_descriptor_oracle(task)
    if mode == "proxy":
        return compute_descriptor_proxy(task)
    if mode == "estimated":
        if rng is None:
            rng = np.random.default_rng([int(task.meta.get("seed", 0)), 1])
        return compute_descriptor_estimated(task, rng)
    raise ValueError(f"unknown descriptor mode {mode!r}; expected one of {DESCRIPTOR_MODES}")


# ---------------------------------------------------------------------------
# labels and records


def suitability_labels(perf, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """1 for every algorithm whose error is within ``epsilon`` of the best."""
    perf = np.asarray(perf, dtype=float)
    # slack absorbs float noise in differences of error fractions
    return (perf - perf.min() <= epsilon + 1e-12).astype(np.int64)


@dataclass
class MetaRecord:
    task_id: str
    descriptor: DatasetDescriptor
    perf: np.ndarray
    labels: np.ndarray
    extras: dict = field(default_factory=dict)

    def to_json(self, epsilon: float) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "task_id": self.task_id,
            "descriptor": {k: _plain(v) for k, v in self.descriptor.to_dict().items()},
            "perf": [float(x) for x in self.perf],
            "labels": [int(x) for x in self.labels],
            "epsilon": float(epsilon),
            "extras": {k: _plain(v) for k, v in sorted(self.extras.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "MetaRecord":
        return cls(
            task_id=str(data["task_id"]),
            descriptor=DatasetDescriptor.from_dict(data["descriptor"]),
            perf=np.asarray(data["perf"], dtype=float),
            labels=np.asarray(data["labels"], dtype=np.int64),
            extras=dict(data.get("extras", {})),
        )


def _plain(value):
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)) and not isinstance(value, bool):
        return int(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    return value


@dataclass
class MetaDataset:
    records: list[MetaRecord]
    epsilon: float = DEFAULT_EPSILON
    algorithms: tuple[str, ...] = ALGORITHMS
    metric: str = "worst_group"

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def task_ids(self) -> list[str]:
        return [r.task_id for r in self.records]

    def descriptors(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, len(DESCRIPTOR_FIELDS)))
        return np.vstack([r.descriptor.as_array() for r in self.records])

    def perf_matrix(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, len(self.algorithms)))
        return np.vstack([r.perf for r in self.records])

    def label_matrix(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, len(self.algorithms)), dtype=np.int64)
        return np.vstack([r.labels for r in self.records])

    def subset(self, indices: Iterable[int]) -> "MetaDataset":
        return replace(self, records=[self.records[i] for i in indices])

    def relabel(self, epsilon: float) -> "MetaDataset":
        records = [replace(r, labels=suitability_labels(r.perf, epsilon)) for r in self.records]
        return replace(self, records=records, epsilon=epsilon)

    def with_metric(self, metric: str) -> "MetaDataset":
        """Swap the performance vector to the other group-error metric and relabel."""
        if metric == self.metric:
            return self
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        key_new = "avg_perf" if metric == "average_group" else "wg_perf"
        key_old = "wg_perf" if metric == "average_group" else "avg_perf"
        records = []
        for r in self.records:
            if key_new not in r.extras:
                raise KeyError(f"record {r.task_id} has no {key_new}")
            perf = np.asarray(r.extras[key_new], dtype=float)
            extras = {k: v for k, v in r.extras.items() if k != key_new}
            extras[key_old] = [float(x) for x in r.perf]
            records.append(replace(r, perf=perf, labels=suitability_labels(perf, self.epsilon), extras=extras))
        return replace(self, records=records, metric=metric)

    def restrict(self, algorithms: Sequence[str]) -> "MetaDataset":
        """Keep only the given algorithms' columns and recompute labels."""
        algorithms = tuple(algorithms)
        if len(set(algorithms)) != len(algorithms):
            raise ValueError(f"repeated algorithm in {algorithms}")
        cols = [self.algorithms.index(a) for a in algorithms]
        records = []
        for r in self.records:
            perf = r.perf[cols]
            records.append(replace(r, perf=perf, labels=suitability_labels(perf, self.epsilon)))
        return replace(self, records=records, algorithms=algorithms)

    def with_descriptors(self, descriptors: dict[str, DatasetDescriptor]) -> "MetaDataset":
        return replace(
            self, records=[replace(r, descriptor=descriptors[r.task_id]) for r in self.records]
        )


# ---------------------------------------------------------------------------
# persistence


def _header(meta: MetaDataset) -> dict:
    return {
        "kind": "header",
        "schema_version": SCHEMA_VERSION,
        "epsilon": float(meta.epsilon),
        "algorithms": list(meta.algorithms),
        "metric": meta.metric,
        "descriptor_fields": list(DESCRIPTOR_FIELDS),
    }


def save_meta(meta: MetaDataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(_header(meta), sort_keys=True) + "\n")
        for record in meta.records:
            fh.write(json.dumps(record.to_json(meta.epsilon), sort_keys=True) + "\n")


def load_meta(path: str | Path) -> MetaDataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SchemaError(f"{path}: empty file, expected a header record")
    parsed = []
    for lineno, line in enumerate(lines, 1):
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
    header = parsed[0]
    if header.get("kind") != "header":
        raise SchemaError(f"{path}:1: first record must be the header")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"{path}: schema version {header.get('schema_version')} != supported {SCHEMA_VERSION}"
        )
    records = []
    for lineno, data in enumerate(parsed[1:], 2):
        if data.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{path}:{lineno}: schema version mismatch")
        try:
            records.append(MetaRecord.from_json(data))
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad record ({exc})") from exc
    return MetaDataset(
        records=records,
        epsilon=float(header["epsilon"]),
        algorithms=tuple(header["algorithms"]),
        metric=header.get("metric", "worst_group"),
    )


# ---------------------------------------------------------------------------
# assembly


def describe_spec(spec: TaskSpec, mode: str, pool: GroupedPool | None = None) -> DatasetDescriptor:
    task = materialize(spec, pool)
    return compute_descriptor(task, mode, np.random.default_rng([spec.seed, 1]))


def process_task(spec: TaskSpec, config: TrainConfig, mode: str, pool=None) -> dict:
    """Materialize one task, describe it, and run all algorithms; JSON-ready result."""
    try:
        task = materialize(spec, pool)
        descriptor = compute_descriptor(task, mode, np.random.default_rng([spec.seed, 1]))
        result = run_all_algorithms(task, config)
    except Exception as exc:  # a bad task must not abort the sweep
        return {"task_id": spec.task_id, "error": f"{type(exc).__name__}: {exc}"}
    runs = result["runs"]
    return {
        "task_id": spec.task_id,
        "descriptor": {k: _plain(v) for k, v in descriptor.to_dict().items()},
        "provenance": descriptor.provenance,
        "wg": [r["wg_error"] for r in runs],
        "avg": [r["avg_error"] for r in runs],
        "per_group": [r["per_group_errors"] for r in runs],
        "train_loss_final": [r["train_loss_final"] for r in runs],
        "ensemble": result["ensemble"],
    }


def _record_from_result(res: dict, epsilon: float) -> MetaRecord:
    perf = np.asarray(res["wg"], dtype=float)
    return MetaRecord(
        task_id=res["task_id"],
        descriptor=DatasetDescriptor.from_dict(res["descriptor"], res.get("provenance", "oracle")),
        perf=perf,
        labels=suitability_labels(perf, epsilon),
        extras={
            "avg_perf": res["avg"],
            "ensemble_wg": res["ensemble"]["wg_error"],
            "ensemble_avg": res["ensemble"]["avg_error"],
        },
    )


def _read_partial(path: Path) -> dict[str, dict]:
    done = {}
    if not path.exists():
        return done
    with open(path) as fh:
        for line in fh:
            try:
                res = json.loads(line)
            except json.JSONDecodeError:
                break  # torn final line from an interrupted run
            done[res["task_id"]] = res
    return done


def _run_one(args):
    spec, config, mode = args
    return process_task(spec, config, mode)


def assemble_meta_dataset(
    specs: Sequence[TaskSpec],
    config: TrainConfig = TrainConfig(),
    epsilon: float = DEFAULT_EPSILON,
    descriptor_mode: str = "oracle",
    workers: int = 1,
    partial_path: str | Path | None = None,
    pool: GroupedPool | None = None,
    limit: int | None = None,
    progress=None,
) -> tuple[MetaDataset, list[dict]]:
    """Train every algorithm on every task and collect the meta-dataset.

    Completed tasks are appended to ``partial_path`` as they finish, so an
    interrupted sweep resumes where it stopped. Records come back in spec
    order regardless of completion order. ``limit`` stops after that many new
    tasks (used to simulate interruption). Returns ``(meta, failures)``.
    """
    if descriptor_mode not in DESCRIPTOR_MODES:
        raise ValueError(f"unknown descriptor mode {descriptor_mode!r}")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("task ids must be unique")
    partial = Path(partial_path) if partial_path is not None else None
    done = _read_partial(partial) if partial is not None else {}
    if partial is not None and done:
        # rewrite without any torn tail so appends start on a clean line
        with open(partial, "w") as fh:
            for res in done.values():
                fh.write(json.dumps(res, sort_keys=True) + "\n")
    todo = [s for s in specs if s.task_id not in done]
    if limit is not None:
        todo = todo[:limit]

    sink = open(partial, "a") if partial is not None else None
    try:
        jobs = [(s, config, descriptor_mode) for s in todo]
        if pool is not None or workers <= 1:
            results = (process_task(s, config, descriptor_mode, pool) for s in todo)
            executor = None
        else:
            executor = ProcessPoolExecutor(max_workers=workers)
            results = executor.map(_run_one, jobs, chunksize=4)
        for i, res in enumerate(results):
            done[res["task_id"]] = res
            if sink is not None:
                sink.write(json.dumps(res, sort_keys=True) + "\n")
                sink.flush()
            if progress is not None:
                progress(i + 1, len(todo))
        if executor is not None:
            executor.shutdown()
    finally:
        if sink is not None:
            sink.close()

    records, failures = [], []
    for spec in specs:
        res = done.get(spec.task_id)
        if res is None:
            continue
        if "error" in res:
            failures.append({"task_id": res["task_id"], "error": res["error"]})
            log.warning("task %s failed: %s", res["task_id"], res["error"])
        else:
            records.append(_record_from_result(res, epsilon))
    return MetaDataset(records=records, epsilon=epsilon), failures


def save_failures(failures: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for f in failures:
            fh.write(json.dumps(f, sort_keys=True) + "\n")


def default_workers() -> int:
    value = os.environ.get("SHIFTSELECT_WORKERS")
    return max(1, int(value)) if value else 1


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    """log10 on size-like columns, then z-scoring with stored statistics.

    Columns with zero spread are mapped to 0 and listed in ``dropped``.
    """

    mean: np.ndarray
    std: np.ndarray
    log_columns: tuple[int, ...]
    dropped: tuple[int, ...] = ()

    @classmethod
    def fit(cls, X, log_columns: Sequence[int] = (3, 4)) -> "Standardizer":
        Z = cls._log(np.asarray(X, dtype=float), tuple(log_columns))
        mean = Z.mean(axis=0)
        std = Z.std(axis=0)
        dropped = tuple(int(i) for i in np.flatnonzero(std < 1e-12))
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean, std, tuple(log_columns), dropped)

    @staticmethod
    def _log(X, log_columns):
        X = X.copy()
        if log_columns:
            X[:, list(log_columns)] = np.log10(X[:, list(log_columns)])
        return X

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = (self._log(X, self.log_columns) - self.mean) / self.std
        if self.dropped:
            Z[:, list(self.dropped)] = 0.0
        return Z

    def inverse_transform(self, Z) -> np.ndarray:
        X = np.atleast_2d(np.asarray(Z, dtype=float)) * self.std + self.mean
        if self.log_columns:
            X[:, list(self.log_columns)] = 10.0 ** X[:, list(self.log_columns)]
        return X

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "log_columns": list(self.log_columns),
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Standardizer":
        return cls(
            np.asarray(data["mean"], dtype=float),
            np.asarray(data["std"], dtype=float),
            tuple(data["log_columns"]),
            tuple(data.get("dropped", ())),
        )
