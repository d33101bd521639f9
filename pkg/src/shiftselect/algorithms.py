"""Candidate training algorithms for linear classifiers and their group-wise scoring."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._optim import Adam, DivergenceError, check_finite
from .shiftgen import TaskDataset, group_index

# Frozen ordering: defines one-hot codes and label-vector positions everywhere.
ALGORITHMS = ("ERM", "GroupDRO", "Oversample", "Undersample", "LogitAdjust")
N_ALGORITHMS = len(ALGORITHMS)

_EXP_CLAMP = 50.0


class DegenerateTaskError(ValueError):
    pass


class InvalidTestError(ValueError):
    pass


__all__ = [
    "ALGORITHMS",
    "DegenerateTaskError",
    "DivergenceError",
    "InvalidTestError",
    "LinearModel",
    "TrainConfig",
    "UniformEnsemble",
    "adjusted_logistic_loss",
    "algorithm_index",
    "average_group_error",
    "dro_weight_update",
    "group_errors",
    "logistic_loss_and_grad",
    "resample_groups",
    "run_all_algorithms",
    "train_model",
    "worst_group_error",
]


def algorithm_index(name: str) -> int:
    try:
        return ALGORITHMS.index(name)
    except ValueError:
        raise ValueError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}") from None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dro_eta: float = 0.01
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or self.dro_eta <= 0:
            raise ValueError("lr and dro_eta must be positive")
        if self.weight_decay < 0 or self.tau < 0:
            raise ValueError("weight_decay and tau must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    loss_history: np.ndarray | None = None

    def score(self, X: np.ndarray) -> np.ndarray:
        return X @ self.w + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        # sign(0) -> +1
        return np.where(self.score(X) >= 0, 1, -1)


class UniformEnsemble:
    """Averages the scores of its members."""

    def __init__(self, models):
        models = list(models)
        if len(models) < 2:
            raise ValueError("an ensemble needs at least two models")
        dims = {len(m.w) for m in models}
        if len(dims) != 1:
            raise ValueError(f"member dimension mismatch: {sorted(dims)}")
        self.models = models

    def score(self, X):
        return np.mean([m.score(X) for m in self.models], axis=0)

    def predict(self, X):
        return np.where(self.score(X) >= 0, 1, -1)


uniform_ensemble = UniformEnsemble


# ---------------------------------------------------------------------------
# building blocks


def resample_groups(X, y, a, mode, rng):
    """Balance group sizes by oversampling (with replacement) or undersampling.

    ``over`` keeps every sample and tops each non-empty group up to the largest
    group; ``under`` draws each group down to the smallest group.
    """
    groups = group_index(y, a)
    members = [np.flatnonzero(groups == g) for g in range(4)]
    sizes = np.array([len(m) for m in members])
    if mode == "over":
        target = sizes.max()
        picked = [
            np.concatenate([m, rng.choice(m, size=target - len(m), replace=True)])
            for m in members
            if len(m)
        ]
    elif mode == "under":
        if sizes.min() == 0:
            raise DegenerateTaskError(
                f"cannot undersample: group sizes {sizes.tolist()} include an empty group"
            )
        target = sizes.min()
        picked = [np.sort(rng.choice(m, size=target, replace=False)) for m in members]
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    idx = np.concatenate(picked)
    return X[idx], y[idx], a[idx]


def dro_weight_update(q, group_losses, eta):
    """Exponentiated-gradient step on the group simplex: q_g <- q_g exp(eta L_g) / Z."""
    q = np.asarray(q, dtype=float)
    exponent = eta * np.asarray(group_losses, dtype=float)
    exponent = np.clip(exponent - exponent.max(), -_EXP_CLAMP, 0.0)
    new = q * np.exp(exponent)
    total = new.sum()
    if total <= 0:
        return q.copy()
    return new / total


def group_priors(groups, n):
    """Training fraction of each group, floored at 1/(2n) so log stays finite."""
    counts = np.bincount(groups, minlength=4).astype(float)
    return np.maximum(counts / n, 1.0 / (2 * n))


def adjusted_logistic_loss(margin, group_prior, tau):
    """Per-sample loss log(1 + exp(-(y*s + tau*log(prior)))).

    A small prior shrinks the effective margin, so minority samples need a
    larger raw margin ``y*s`` to reach the same loss.
    """
    group_prior = np.asarray(group_prior, dtype=float)
    if np.any(group_prior <= 0):
        raise DegenerateTaskError("group prior must be positive")
    return np.logaddexp(0.0, -(np.asarray(margin, dtype=float) + tau * np.log(group_prior)))


adjusted_logit = adjusted_logistic_loss


def logistic_loss_and_grad(theta, Xa, y, offset, weights, weight_decay):
    """Weighted logistic loss and its gradient for augmented features ``Xa = [X, 1]``.

    ``theta[-1]`` is the bias and is not decayed. ``weights`` multiply each
    sample's loss; ``offset`` is added to the margin.
    """
    margin = y * (Xa @ theta) + offset
    losses = np.logaddexp(0.0, -margin)
    # d loss / d margin = -sigmoid(-margin)
    dmargin = -np.exp(-np.logaddexp(0.0, margin))
    grad = Xa.T @ (weights * dmargin * y)
    w = theta[:-1]
    grad[:-1] += weight_decay * w
    loss = float(weights @ losses) + 0.5 * weight_decay * float(w @ w)
    return loss, grad, losses


# ---------------------------------------------------------------------------
# training


def _prepare(X, y, a):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise DegenerateTaskError("empty training set")
    Xa = np.hstack([X, np.ones((len(y), 1))])
    return Xa, y, group_index(y, np.asarray(a))


def _fit(Xa, y, offset, weights, config, groups=None):
    theta = np.zeros(Xa.shape[1])
    opt = Adam([theta], lr=config.lr)
    history = np.empty(config.epochs)
    if groups is None:
        for epoch in range(config.epochs):
            loss, grad, _ = logistic_loss_and_grad(
                theta, Xa, y, offset, weights, config.weight_decay
            )
            check_finite(loss, "training loss", config.lr)
            history[epoch] = loss
            opt.step([grad])
        return theta, history

    # GroupDRO: reweight groups online, then step on sum_g q_g L_g
    counts = np.bincount(groups, minlength=4)
    present = counts > 0
    q = present / present.sum()
    inv_counts = np.where(present, 1.0 / np.maximum(counts, 1), 0.0)
    for epoch in range(config.epochs):
        margin = y * (Xa @ theta)
        losses = np.logaddexp(0.0, -margin)
        group_losses = np.bincount(groups, weights=losses, minlength=4) * inv_counts
        q = dro_weight_update(q, group_losses, config.dro_eta)
        sample_w = (q * inv_counts)[groups]
        loss, grad, _ = logistic_loss_and_grad(
            theta, Xa, y, offset, sample_w, config.weight_decay
        )
        check_finite(loss, "GroupDRO objective", config.lr)
        history[epoch] = loss
        opt.step([grad])
    return theta, history


def train_model(algorithm: str, task: TaskDataset, config: TrainConfig = TrainConfig()) -> LinearModel:
    """Train a linear classifier on the task's training split with one algorithm."""
    algorithm_index(algorithm)
    X, y, a = task.X_train, task.y_train, task.a_train
    rng = np.random.default_rng([int(config.seed), int(task.meta.get("seed", 0))])
    if algorithm in ("Oversample", "Undersample"):
        X, y, a = resample_groups(X, y, a, "over" if algorithm == "Oversample" else "under", rng)
    Xa, yf, groups = _prepare(X, y, a)
    n = len(yf)
    weights = np.full(n, 1.0 / n)
    offset = np.zeros(n)
    if algorithm == "LogitAdjust":
        offset = config.tau * np.log(group_priors(groups, n))[groups]
    theta, history = _fit(
        Xa, yf, offset, weights, config, groups if algorithm == "GroupDRO" else None
    )
    return LinearModel(theta[:-1].copy(), float(theta[-1]), history)


# ---------------------------------------------------------------------------
# scoring


def group_errors(model, X, y, a) -> np.ndarray:
    """0-1 error of ``model`` within each of the four groups."""
    groups = group_index(y, a)
    counts = np.bincount(groups, minlength=4)
    if np.any(counts == 0):
        raise InvalidTestError(f"test split is missing a group: counts {counts.tolist()}")
    wrong = (model.predict(X) != np.asarray(y)).astype(float)
    return np.bincount(groups, weights=wrong, minlength=4) / counts


def worst_group_error(model, X, y, a) -> float:
    return float(group_errors(model, X, y, a).max())


def average_group_error(model, X, y, a) -> float:
    return float(group_errors(model, X, y, a).mean())


def run_all_algorithms(task: TaskDataset, config: TrainConfig = TrainConfig()) -> dict:
    """Train every candidate algorithm (plus their uniform ensemble) and score on test."""
    models, runs = [], []
    for name in ALGORITHMS:
        model = train_model(name, task, config)
        per_group = group_errors(model, task.X_test, task.y_test, task.a_test)
        models.append(model)
        runs.append(
            {
                "task_id": task.meta.get("task_id"),
                "algorithm": name,
                "wg_error": float(per_group.max()),
                "avg_error": float(per_group.mean()),
                "per_group_errors": per_group.tolist(),
                "train_loss_final": float(model.loss_history[-1]),
                "seed": config.seed,
            }
        )
    ens = group_errors(UniformEnsemble(models), task.X_test, task.y_test, task.a_test)
    return {
        "runs": runs,
        "ensemble": {"wg_error": float(ens.max()), "avg_error": float(ens.mean())},
        "models": models,
    }
