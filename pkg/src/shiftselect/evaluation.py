"""Scoring of selectors and the analyses built on top of them."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tree as cart
from .metadataset import DESCRIPTOR_FIELDS, MetaDataset
from .selectors import (
    NAIVE_FIELDS,
    SHIFT_FIELDS,
    MlpSpec,
    OracleSelector,
    RandomSelector,
    Selector,
    TreeSelector,
    TreeSpec,
    train_global_best,
    train_knn_selector,
    train_linear_selector,
    train_mimic_tree,
    train_mlp_selector,
    train_regression_selector,
    train_tree_selector,
)

log = logging.getLogger(__name__)


class UnsupportedSelectorError(TypeError):
    pass


def _check_aligned(selections, meta):
    if len(selections) != len(meta):
        raise ValueError(f"{len(selections)} selections for {len(meta)} records")


def zero_one_accuracy(selections, meta: MetaDataset) -> float:
    """Fraction of tasks whose selected algorithm is labelled suitable."""
    selections = np.asarray(selections, dtype=int)
    _check_aligned(selections, meta)
    if len(meta) == 0:
        return float("nan")
    labels = meta.label_matrix()
    return float(labels[np.arange(len(meta)), selections].mean())


def realized_wg_error(selections, meta: MetaDataset) -> float:
    """Mean test error of the selected algorithms, read from the stored performance."""
    selections = np.asarray(selections, dtype=int)
    _check_aligned(selections, meta)
    if len(meta) == 0:
        return float("nan")
    perf = meta.perf_matrix()
    return float(perf[np.arange(len(meta)), selections].mean())


def selection_histogram(selections, n_algorithms) -> list[int]:
    return np.bincount(np.asarray(selections, dtype=int), minlength=n_algorithms).tolist()


def selections_for(selector: Selector, meta: MetaDataset, rule="top_logit", rng=None) -> np.ndarray:
    perf = meta.perf_matrix() if isinstance(selector, OracleSelector) else None
    return selector.select(meta.descriptors(), rule=rule, rng=rng, perf=perf)


def score_selector(selector: Selector, meta: MetaDataset, rule="top_logit", rng=None) -> dict:
    sel = selections_for(selector, meta, rule, rng)
    return {
        "zero_one_acc": zero_one_accuracy(sel, meta),
        "realized_wg": realized_wg_error(sel, meta),
        "histogram": selection_histogram(sel, len(meta.algorithms)),
        "selections": sel.tolist(),
    }


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())


# ---------------------------------------------------------------------------
# headline comparison


TABLE_ROWS = (
    "oracle",
    "random",
    "global_best",
    "naive",
    "regression",
    "mlp_multilabel",
)
EXTRA_ROWS = ("linear", "knn", "tree", "mimic_tree", "ensemble")


@dataclass
class EvalReport:
    """Per-method mean/std (population) over seeds plus per-task traces."""

    rows: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    task_ids: list = field(default_factory=list)
    algorithms: tuple = ()
    seeds: tuple = ()
    rule: str = "top_logit"

    def row(self, name) -> dict:
        return self.rows[name]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "traces": self.traces,
            "task_ids": list(self.task_ids),
            "algorithms": list(self.algorithms),
            "seeds": list(self.seeds),
            "rule": self.rule,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def summary(self) -> str:
        lines = [f"{'method':<16}{'0-1 acc (%)':>16}{'WG error (%)':>16}"]
        for name, row in self.rows.items():
            acc = row.get("zero_one_acc_mean")
            acc_s = "n/a" if acc is None else f"{100 * acc:.1f} +- {100 * row['zero_one_acc_std']:.1f}"
            wg_s = f"{100 * row['realized_wg_mean']:.1f} +- {100 * row['realized_wg_std']:.1f}"
            lines.append(f"{name:<16}{acc_s:>16}{wg_s:>16}")
        return "\n".join(lines)


def train_selector_kind(
    kind: str,
    meta_train: MetaDataset,
    seed: int,
    mlp_spec: MlpSpec = MlpSpec(),
    tree_spec: TreeSpec = TreeSpec(),
    knn_k: int = 5,
    mlp: Selector | None = None,
) -> Selector:
    spec = MlpSpec(mlp_spec.hidden_layers, mlp_spec.width, mlp_spec.epochs, mlp_spec.lr, seed)
    if kind == "mlp_multilabel":
        return train_mlp_selector(meta_train, spec)
    if kind == "naive":
        return train_mlp_selector(meta_train, spec, features=NAIVE_FIELDS)
    if kind == "regression":
        return train_regression_selector(meta_train, spec)
    if kind == "linear":
        return train_linear_selector(meta_train, spec)
    if kind == "knn":
        return train_knn_selector(meta_train, knn_k)
    if kind == "tree":
        return train_tree_selector(meta_train, tree_spec)
    if kind == "mimic_tree":
        if mlp is None:
            mlp = train_mlp_selector(meta_train, spec)
        return train_mimic_tree(meta_train, mlp, tree_spec)
    if kind == "global_best":
        return train_global_best(meta_train)
    if kind == "random":
        return RandomSelector(seed, meta_train.algorithms)
    if kind == "oracle":
        return OracleSelector(meta_train.algorithms)
    raise ValueError(f"unknown selector kind {kind!r}")


def evaluate_selectors(
    meta_train: MetaDataset,
    meta_eval: MetaDataset,
    seeds: Sequence[int] = (0, 1, 2),
    kinds: Sequence[str] = TABLE_ROWS,
    mlp_spec: MlpSpec = MlpSpec(),
    tree_spec: TreeSpec = TreeSpec(),
    knn_k: int = 5,
    rule: str = "top_logit",
    selectors: dict | None = None,
) -> EvalReport:
    """Train each selector kind once per seed and score it on held-out records.

    ``selectors`` may supply pre-trained selectors as ``{kind: [one per seed]}``.
    The ``ensemble`` row reads the stored uniform-ensemble errors and has no
    0-1 accuracy.
    """
    given = dict(selectors or {})
    selectors = dict(given)
    report = EvalReport(
        task_ids=meta_eval.task_ids, algorithms=meta_eval.algorithms, seeds=tuple(seeds), rule=rule
    )
    for kind in kinds:
        if kind == "ensemble":
            key = "ensemble_wg" if meta_eval.metric == "worst_group" else "ensemble_avg"
            values = [r.extras[key] for r in meta_eval.records]
            report.rows[kind] = {
                "zero_one_acc_mean": None,
                "zero_one_acc_std": None,
                "realized_wg_mean": float(np.mean(values)),
                "realized_wg_std": 0.0,
            }
            continue
        accs, wgs, hists, traces = [], [], [], []
        mlps = selectors.get("mlp_multilabel")
        for i, seed in enumerate(seeds):
            if kind in given:
                sel = given[kind][i]
            else:
                sel = train_selector_kind(
                    kind, meta_train, seed, mlp_spec, tree_spec, knn_k,
                    mlp=mlps[i] if (kind == "mimic_tree" and mlps) else None,
                )
                selectors.setdefault(kind, []).append(sel)
            res = score_selector(sel, meta_eval, rule, np.random.default_rng([seed, 7]))
            accs.append(res["zero_one_acc"])
            wgs.append(res["realized_wg"])
            hists.append(res["histogram"])
            traces.append(res["selections"])
        acc_m, acc_s = _mean_std(accs)
        wg_m, wg_s = _mean_std(wgs)
        report.rows[kind] = {
            "zero_one_acc_mean": acc_m,
            "zero_one_acc_std": acc_s,
            "realized_wg_mean": wg_m,
            "realized_wg_std": wg_s,
            "zero_one_acc_per_seed": accs,
            "realized_wg_per_seed": wgs,
            "histogram": np.sum(hists, axis=0).tolist(),
        }
        report.traces[kind] = traces
    report.selectors = selectors
    return report


# ---------------------------------------------------------------------------
# analyses


def perf_gap_distribution(meta: MetaDataset, a: str, b: str, mask=None) -> np.ndarray:
    """Per-task error of ``a`` minus error of ``b``."""
    perf = meta.perf_matrix()
    gaps = perf[:, meta.algorithms.index(a)] - perf[:, meta.algorithms.index(b)]
    if mask is not None:
        gaps = gaps[np.asarray(mask, dtype=bool)]
    return gaps


def strong_shift_mask(meta: MetaDataset, threshold: float = 0.3) -> np.ndarray:
    """Tasks where some shift degree is at least ``threshold`` away from 0.5."""
    X = meta.descriptors()[:, :3]
    return np.abs(X - 0.5).max(axis=1) >= threshold


def _accuracy(train_fn: Callable[[MetaDataset, int], Selector], meta_train, meta_eval, seeds):
    return [
        zero_one_accuracy(selections_for(train_fn(meta_train, s), meta_eval), meta_eval) for s in seeds
    ]


def scaling_curve(
    meta_train: MetaDataset,
    meta_eval: MetaDataset,
    sizes: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2),
    spec: MlpSpec = MlpSpec(),
) -> list[dict]:
    """Held-out accuracy of the MLP selector trained on random meta-train subsets."""
    rows = []
    for size in sizes:
        if size > len(meta_train):
            log.warning("size %d exceeds %d meta-train records; clamping", size, len(meta_train))
            size = len(meta_train)
        accs = []
        for seed in seeds:
            if size == len(meta_train):
                sub = meta_train
            else:
                idx = np.sort(np.random.default_rng([seed, size]).choice(len(meta_train), size, replace=False))
                sub = meta_train.subset(idx)
            sel = train_mlp_selector(sub, MlpSpec(spec.hidden_layers, spec.width, spec.epochs, spec.lr, seed))
            accs.append(zero_one_accuracy(selections_for(sel, meta_eval), meta_eval))
        mean, std = _mean_std(accs)
        rows.append({"size": size, "acc_mean": mean, "acc_std": std, "acc_per_seed": accs})
    return rows


def leave_one_descriptor_out(
    meta_train: MetaDataset,
    meta_eval: MetaDataset,
    seeds: Sequence[int] = (0, 1, 2),
    spec: MlpSpec = MlpSpec(),
    mode: str = "retrain",
    features: Sequence[str] = DESCRIPTOR_FIELDS,
    groups: dict[str, Sequence[str]] | None = None,
) -> list[dict]:
    """Accuracy drop when each descriptor feature is withheld from the selector.

    ``retrain`` trains on the remaining features; ``mask`` keeps the input
    width and pins the feature at its meta-train mean. ``groups`` adds rows
    that withhold several features at once.
    """
    if len(features) < 2:
        raise ValueError("need at least two descriptor features")
    if mode not in ("retrain", "mask"):
        raise ValueError(f"unknown mode {mode!r}")

    def trainer(drop):
        def fn(meta, seed):
            s = MlpSpec(spec.hidden_layers, spec.width, spec.epochs, spec.lr, seed)
            if mode == "retrain":
                return train_mlp_selector(meta, s, [f for f in features if f not in drop])
            return train_mlp_selector(meta, s, features, masked=tuple(drop))

        return fn

    full = _accuracy(trainer(()), meta_train, meta_eval, seeds)
    full_mean, full_std = _mean_std(full)
    rows = [{"feature": "full", "acc_mean": full_mean, "acc_std": full_std, "drop": 0.0, "drop_std": 0.0}]
    todo = [(f, (f,)) for f in features] + list((groups or {}).items())
    for name, drop in todo:
        accs = _accuracy(trainer(tuple(drop)), meta_train, meta_eval, seeds)
        mean, std = _mean_std(accs)
        drops = np.asarray(full) - np.asarray(accs)
        rows.append(
            {"feature": name, "acc_mean": mean, "acc_std": std, "drop": float(drops.mean()), "drop_std": float(drops.std())}
        )
    return rows


def pairwise_selector_analysis(
    meta_train: MetaDataset,
    meta_eval: MetaDataset,
    pair: Sequence[str],
    seeds: Sequence[int] = (0, 1, 2),
    spec: MlpSpec = MlpSpec(),
    mode: str = "retrain",
) -> list[dict]:
    """Leave-one-descriptor-out for a selector choosing between two algorithms only."""
    pair = tuple(pair)
    if len(pair) != 2 or pair[0] == pair[1]:
        raise ValueError(f"a pairwise analysis needs two distinct algorithms, got {pair}")
    return leave_one_descriptor_out(meta_train.restrict(pair), meta_eval.restrict(pair), seeds, spec, mode)


ALL_SHIFTS_GROUP = {"all_shifts": SHIFT_FIELDS + ("r",)}


# ---------------------------------------------------------------------------
# tree export


def export_tree(selector, feature_names=None, class_names=None) -> tuple[str, str]:
    """DOT digraph and nested if/else rules for a tree selector.

    Thresholds are written with ``repr`` so the rules reproduce the tree
    exactly; samples go left when ``feature <= threshold``.
    """
    if not isinstance(selector, TreeSelector):
        raise UnsupportedSelectorError(f"cannot export a {selector.kind!r} selector as a tree")
    names = list(feature_names or selector.feature_names)
    classes = list(class_names or selector.algorithms)
    root = selector.root

    ids = {}
    for node in cart.iter_nodes(root):
        ids[id(node)] = len(ids)

    def values(node):
        return "[" + ", ".join(repr(float(v)) for v in node.value) + "]"

    dot = ["digraph Tree {", 'node [shape=box, fontname="helvetica"];']
    for node in cart.iter_nodes(root):
        best = classes[int(np.argmax(node.value))]
        parts = []
        if not node.is_leaf:
            parts.append(f"{names[node.feature]} <= {node.threshold!r}")
        parts += [f"samples = {node.n_samples}", f"value = {values(node)}", f"choice = {best}"]
        label = "\\n".join(parts)
        dot.append(f'{ids[id(node)]} [label="{label}"];')
        if not node.is_leaf:
            dot.append(f'{ids[id(node)]} -> {ids[id(node.left)]} [label="True"];')
            dot.append(f'{ids[id(node)]} -> {ids[id(node.right)]} [label="False"];')
    dot.append("}")

    lines = []

    def emit(node, indent):
        pad = "    " * indent
        if node.is_leaf:
            best = classes[int(np.argmax(node.value))]
            lines.append(f"{pad}return {values(node)}  # {best}, samples={node.n_samples}")
            return
        lines.append(f"{pad}if {names[node.feature]} <= {node.threshold!r}:")
        emit(node.left, indent + 1)
        lines.append(f"{pad}else:  # {names[node.feature]} > {node.threshold!r}")
        emit(node.right, indent + 1)

    emit(root, 0)
    return "\n".join(dot) + "\n", "\n".join(lines) + "\n"


def write_csv(rows: list[dict], path: str | Path) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (json.dumps(v) if isinstance(v, (list, tuple)) else v) for k, v in row.items()})
