"""Construction of binary classification tasks with controlled distribution shifts.

Groups are the four (class, attribute) combinations, always indexed as::

    0: G1 = (y=+1, a=+1)    1: G2 = (y=-1, a=+1)
    2: G3 = (y=+1, a=-1)    3: G4 = (y=-1, a=-1)

Labels and attributes are coded in {-1, +1}.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GROUP_NAMES = ("G1(y=+1,a=+1)", "G2(y=-1,a=+1)", "G3(y=+1,a=-1)", "G4(y=-1,a=-1)")
GROUP_LABELS = np.array([[1, 1], [-1, 1], [1, -1], [-1, -1]])  # (y, a) per group
SHIFT_NAMES = ("d_sc", "d_ls", "d_cs")
SINGLE_SHIFT_GRID = (0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99)

_FEASIBILITY_TOL = 1e-9
_MAX_REJECTION_ATTEMPTS = 100_000


class InfeasibleShiftError(ValueError):
    """Requested degrees imply a negative number of samples in some group."""


class DegenerateInputError(ValueError):
    pass


class PoolCapacityError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShiftDegrees:
    """Spurious correlation, label shift and covariate shift; 0.5 means no shift."""

    d_sc: float
    d_ls: float
    d_cs: float

    def __post_init__(self):
        for name in SHIFT_NAMES:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.d_sc, self.d_ls, self.d_cs], dtype=float)

    def flip_attribute(self) -> "ShiftDegrees":
        return ShiftDegrees(1.0 - self.d_sc, self.d_ls, 1.0 - self.d_cs)


@dataclass(frozen=True)
class GroupCounts:
    g1: int
    g2: int
    g3: int
    g4: int

    def __post_init__(self):
        for value in self.as_tuple():
            if value < 0:
                raise ValueError(f"negative group count in {self.as_tuple()}")

    @property
    def n(self) -> int:
        return self.g1 + self.g2 + self.g3 + self.g4

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.g1, self.g2, self.g3, self.g4)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.int64)

    @classmethod
    def from_sequence(cls, values: Sequence[int]) -> "GroupCounts":
        return cls(*(int(v) for v in values))

    def flip_attribute(self) -> "GroupCounts":
        # a -> -a swaps G1 <-> G3 and G2 <-> G4
        return GroupCounts(self.g3, self.g4, self.g1, self.g2)


def group_index(y: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Map label/attribute arrays in {-1, +1} to group indices 0..3."""
    y = np.asarray(y)
    a = np.asarray(a)
    return (y < 0).astype(np.int64) + 2 * (a < 0).astype(np.int64)


def group_histogram(y: np.ndarray, a: np.ndarray) -> GroupCounts:
    return GroupCounts.from_sequence(np.bincount(group_index(y, a), minlength=4))


def quantify_shifts(counts: GroupCounts) -> ShiftDegrees:
    n = counts.n
    if n == 0:
        raise DegenerateInputError("cannot quantify shifts of an empty training set")
    g1, g2, g3, g4 = counts.as_tuple()
    return ShiftDegrees((g1 + g4) / n, (g1 + g3) / n, (g1 + g2) / n)


def group_fractions(s: ShiftDegrees) -> np.ndarray:
    """Real-valued group fractions solving the linear system for the degrees."""
    f1 = (s.d_sc + s.d_ls + s.d_cs - 1.0) / 2.0
    return np.array([f1, s.d_cs - f1, s.d_ls - f1, s.d_sc - f1])


def is_feasible(s: ShiftDegrees) -> bool:
    return bool(np.all(group_fractions(s) >= -_FEASIBILITY_TOL))


def solve_group_counts(n: int, s: ShiftDegrees) -> GroupCounts:
    """Integer group counts summing to ``n`` that realize the requested degrees.

    The real solution is rounded with the largest-remainder method, so every
    count is within one sample of the exact value and each degree is within
    2/n of the request.
    """
    if n < 4:
        raise DegenerateInputError(f"n={n} is too small; need at least 4 samples")
    real = n * group_fractions(s)
    bad = np.flatnonzero(real < -_FEASIBILITY_TOL * n)
    if bad.size:
        names = ", ".join(f"{GROUP_NAMES[i]}={real[i] / n:.4f}" for i in bad)
        raise InfeasibleShiftError(f"degrees {s} imply negative group fractions: {names}")
    real = np.clip(real, 0.0, None)
    floors = np.floor(real + 1e-9).astype(np.int64)
    remainder = int(n - floors.sum())
    if remainder > 0:
        frac = real - floors
        # stable sort: ties go to the lower group index
        order = np.argsort(-frac, kind="stable")
        floors[order[:remainder]] += 1
    elif remainder < 0:
        order = np.argsort(real - floors, kind="stable")
        for i in order:
            if remainder == 0:
                break
            if floors[i] > 0:
                floors[i] -= 1
                remainder += 1
    return GroupCounts.from_sequence(floors)


def sample_degrees(
    rng: np.random.Generator,
    mode: str = "triple",
    grid: Sequence[float] | None = None,
    shift: str | None = None,
) -> ShiftDegrees:
    """Draw shift degrees.

    ``triple`` samples uniformly from the feasible region of the unit cube by
    rejection. ``single_shift`` sets one degree (``shift``, random if None) to a
    value from ``grid`` and leaves the other two at 0.5.
    """
    if mode == "triple":
        for _ in range(_MAX_REJECTION_ATTEMPTS):
            s = ShiftDegrees(*(float(v) for v in rng.uniform(0.0, 1.0, size=3)))
            if is_feasible(s):
                return s
        raise SamplingError("rejection sampling exceeded attempt cap")
    if mode == "single_shift":
        grid = SINGLE_SHIFT_GRID if grid is None else tuple(grid)
        if not grid:
            raise ValueError("single_shift mode needs a non-empty grid")
        if shift is None:
            shift = SHIFT_NAMES[int(rng.integers(3))]
        if shift not in SHIFT_NAMES:
            raise ValueError(f"unknown shift {shift!r}")
        value = float(grid[int(rng.integers(len(grid)))])
        values = {name: 0.5 for name in SHIFT_NAMES}
        values[shift] = value
        return ShiftDegrees(**values)
    raise ValueError(f"unknown sampling mode {mode!r}")


def single_shift_degrees(grid: Sequence[float] = SINGLE_SHIFT_GRID) -> list[ShiftDegrees]:
    """Every single-shift configuration on ``grid``, with the no-shift point once."""
    out: list[ShiftDegrees] = []
    seen = set()
    for name in SHIFT_NAMES:
        for value in grid:
            values = {k: 0.5 for k in SHIFT_NAMES}
            values[name] = float(value)
            s = ShiftDegrees(**values)
            if s not in seen:
                seen.add(s)
                out.append(s)
    return out


@dataclass
class TaskDataset:
    """Train split (possibly shifted) and group-balanced test split."""

    X_train: np.ndarray
    y_train: np.ndarray
    a_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    a_test: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.y_train)

    @property
    def p(self) -> int:
        return self.X_train.shape[1]

    @property
    def train_groups(self) -> np.ndarray:
        return group_index(self.y_train, self.a_train)

    @property
    def test_groups(self) -> np.ndarray:
        return group_index(self.y_test, self.a_test)

    def train_counts(self) -> GroupCounts:
        return group_histogram(self.y_train, self.a_train)

    def test_counts(self) -> GroupCounts:
        return group_histogram(self.y_test, self.a_test)


def _test_per_group(n_te: int) -> int:
    if n_te < 4 or n_te % 4:
        raise DegenerateInputError(f"n_te={n_te} must be a positive multiple of 4")
    return n_te // 4


def _gaussian_groups(counts, d, r, core_variance, rng):
    sigma_c = np.sqrt(core_variance)
    sigma_a = np.sqrt(core_variance / r)
    blocks_x, blocks_y, blocks_a = [], [], []
    for g, count in enumerate(counts):
        y, a = GROUP_LABELS[g]
        x_core = rng.normal(float(y), sigma_c, size=(count, d))
        x_attr = rng.normal(float(a), sigma_a, size=(count, d))
        blocks_x.append(np.hstack([x_core, x_attr]))
        blocks_y.append(np.full(count, y, dtype=np.int64))
        blocks_a.append(np.full(count, a, dtype=np.int64))
    X = np.vstack(blocks_x)
    y = np.concatenate(blocks_y)
    a = np.concatenate(blocks_a)
    perm = rng.permutation(len(y))
    return X[perm], y[perm], a[perm]


def generate_synthetic_task(
    n: int,
    d: int,
    r: float,
    s: ShiftDegrees,
    n_te: int,
    rng: np.random.Generator,
    core_variance: float = 1.0,
) -> TaskDataset:
    """Gaussian task with core block x_c ~ N(y, s2) and spurious block x_a ~ N(a, s2/r).

    ``s2`` is ``core_variance``; features are ``[x_c, x_a]`` with length ``2 * d``.
    """
    if r <= 0:
        raise ValueError(f"availability must be positive, got {r}")
    if d < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    if core_variance <= 0:
        raise ValueError(f"core variance must be positive, got {core_variance}")
    per_group = _test_per_group(n_te)
    counts = solve_group_counts(n, s)
    X_tr, y_tr, a_tr = _gaussian_groups(counts.as_tuple(), d, r, core_variance, rng)
    X_te, y_te, a_te = _gaussian_groups((per_group,) * 4, d, r, core_variance, rng)
    meta = {
        "source": "synthetic",
        "n": n,
        "n_te": n_te,
        "d": d,
        "p": 2 * d,
        "r": float(r),
        "core_variance": float(core_variance),
        "degrees": asdict(s),
        "counts": list(counts.as_tuple()),
    }
    return TaskDataset(X_tr, y_tr, a_tr, X_te, y_te, a_te, meta)


@dataclass
class GroupedPool:
    """Annotated samples from which tasks are composed by resampling."""

    X: np.ndarray
    y: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        if not (len(self.X) == len(self.y) == len(self.a)):
            raise ValueError("X, y, a must have the same length")
        if not (np.isin(self.y, (-1, 1)).all() and np.isin(self.a, (-1, 1)).all()):
            raise ValueError("labels and attributes must be coded in {-1, +1}")

    @property
    def group_indices(self) -> list[np.ndarray]:
        groups = group_index(self.y, self.a)
        return [np.flatnonzero(groups == g) for g in range(4)]


def build_task_from_pool(
    pool: GroupedPool,
    counts: GroupCounts,
    n_te: int,
    rng: np.random.Generator,
    replace: bool = False,
) -> TaskDataset:
    per_group = _test_per_group(n_te)
    train_idx, test_idx = [], []
    for g, (idx, want) in enumerate(zip(pool.group_indices, counts.as_tuple())):
        if replace:
            if len(idx) == 0 and (want or per_group):
                raise PoolCapacityError(f"{GROUP_NAMES[g]} is empty in the pool")
            train_idx.append(rng.choice(idx, size=want, replace=True) if want else idx[:0])
            test_idx.append(rng.choice(idx, size=per_group, replace=True))
            continue
        need = want + per_group
        if len(idx) < need:
            raise PoolCapacityError(
                f"{GROUP_NAMES[g]} needs {need} samples ({want} train + {per_group} test), "
                f"pool has {len(idx)}"
            )
        chosen = rng.permutation(idx)[:need]
        train_idx.append(chosen[:want])
        test_idx.append(chosen[want:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = rng.permutation(np.concatenate(test_idx))
    meta = {
        "source": "pool",
        "n": counts.n,
        "n_te": n_te,
        "d": pool.X.shape[1],
        "p": pool.X.shape[1],
        "counts": list(counts.as_tuple()),
        "degrees": asdict(quantify_shifts(counts)) if counts.n else None,
    }
    return TaskDataset(
        pool.X[tr], pool.y[tr], pool.a[tr], pool.X[te], pool.y[te], pool.a[te], meta
    )


# ---------------------------------------------------------------------------
# task specifications


def derive_seed(master_seed: int, index: int) -> int:
    """Independent per-task seed from the master seed and the task index."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    source: str
    n: int
    d: int
    r: float
    d_sc: float
    d_ls: float
    d_cs: float
    n_te: int
    seed: int
    core_variance: float = 1.0

    @property
    def degrees(self) -> ShiftDegrees:
        return ShiftDegrees(self.d_sc, self.d_ls, self.d_cs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(
            task_id=str(data["task_id"]),
            source=str(data["source"]),
            n=int(data["n"]),
            d=int(data["d"]),
            r=float(data["r"]),
            d_sc=float(data["d_sc"]),
            d_ls=float(data["d_ls"]),
            d_cs=float(data["d_cs"]),
            n_te=int(data["n_te"]),
            seed=int(data["seed"]),
            core_variance=float(data.get("core_variance", 1.0)),
        )


def materialize(spec: TaskSpec, pool: GroupedPool | None = None) -> TaskDataset:
    rng = np.random.default_rng(spec.seed)
    if spec.source == "synthetic":
        task = generate_synthetic_task(
            spec.n, spec.d, spec.r, spec.degrees, spec.n_te, rng, spec.core_variance
        )
    elif spec.source == "pool":
        if pool is None:
            raise ValueError(f"task {spec.task_id} needs a grouped pool to materialize")
        task = build_task_from_pool(pool, solve_group_counts(spec.n, spec.degrees), spec.n_te, rng)
        task.meta["r"] = None
    else:
        raise ValueError(f"unknown task source {spec.source!r}")
    task.meta["task_id"] = spec.task_id
    task.meta["seed"] = spec.seed
    return task


def pool_test_size(n: int) -> int:
    """Half the training size, rounded down to a multiple of 4 (at least 4)."""
    return max(4, (n // 2) // 4 * 4)


def save_task_specs(specs: Iterable[TaskSpec], path: str | Path) -> None:
    with open(path, "w") as fh:
        for spec in specs:
            fh.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")


def load_task_specs(path: str | Path) -> list[TaskSpec]:
    specs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                specs.append(TaskSpec.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad task spec ({exc})") from exc
    return specs


def save_tasks(tasks: Iterable[TaskDataset], directory: str | Path) -> Path:
    """Cache materialized tasks as one ``.npz`` each plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, task in enumerate(tasks):
        name = f"{task.meta.get('task_id', f'task{i:05d}')}.npz"
        np.savez(
            directory / name,
            X_train=task.X_train,
            y_train=task.y_train,
            a_train=task.a_train,
            X_test=task.X_test,
            y_test=task.y_test,
            a_test=task.a_test,
        )
        manifest.append({"file": name, "meta": task.meta})
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_tasks(directory: str | Path) -> list[TaskDataset]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tasks = []
    for entry in manifest:
        with np.load(directory / entry["file"]) as data:
            arrays = {k: data[k] for k in data.files}
        tasks.append(TaskDataset(meta=entry["meta"], **arrays))
    return tasks


def build_task_grid(
    sizes: Sequence[int],
    dims: Sequence[int],
    availabilities: Sequence[float],
    n_triples: int,
    single_shift_grid: Sequence[float] | None = SINGLE_SHIFT_GRID,
    master_seed: int = 0,
    subsample: int | None = None,
    source: str = "synthetic",
    core_variance: float = 1.0,
) -> list[TaskSpec]:
    """Cartesian grid of sizes x dims x availabilities x degrees.

    The degree list is ``n_triples`` feasible triples drawn once from the
    master seed plus every single-shift configuration. ``subsample`` keeps a
    seeded random subset of the grid (ids stay those of the full grid).
    """
    rng = np.random.default_rng([int(master_seed), 0])
    degrees = [sample_degrees(rng, "triple") for _ in range(n_triples)]
    if single_shift_grid:
        degrees += single_shift_degrees(single_shift_grid)
    specs = []
    index = 0
    for n in sizes:
        for d in dims:
            for r in availabilities:
                for s in degrees:
                    n_te = int(n) if source == "synthetic" else pool_test_size(int(n))
                    specs.append(
                        TaskSpec(
                            task_id=f"t{index:05d}",
                            source=source,
                            n=int(n),
                            d=int(d),
                            r=float(r),
                            d_sc=s.d_sc,
                            d_ls=s.d_ls,
                            d_cs=s.d_cs,
                            n_te=n_te,
                            seed=derive_seed(master_seed, index),
                            core_variance=float(core_variance),
                        )
                    )
                    index += 1
    if subsample is not None and subsample < len(specs):
        keep = np.sort(rng.choice(len(specs), size=subsample, replace=False))
        specs = [specs[i] for i in keep]
    return specs
