"""Small end-to-end run: meta-dataset, selector, held-out scores and a readable tree.

Takes a minute or two on one core. Run with ``python3 demos/selector_walkthrough.py``.
With only ~100 meta-train records the selector is noisy and may not beat the
single best algorithm; the desk-scale grid in the CLI defaults is where the
learned selector pulls ahead.
"""

import numpy as np

from shiftselect import DatasetDescriptor, TrainConfig, assemble_meta_dataset, build_task_grid
from shiftselect.evaluation import evaluate_selectors, export_tree
from shiftselect.selectors import MlpSpec, TreeSpec, predict_scores, select_algorithm, split_meta, train_mimic_tree

specs = build_task_grid(
    sizes=[200, 500],
    dims=[2, 10],
    availabilities=[1.0, 100.0],
    n_triples=8,
    master_seed=0,
    subsample=120,
    core_variance=10.0,
)
print(len(specs), "tasks")

meta, failures = assemble_meta_dataset(specs, TrainConfig(), epsilon=0.05)
print(len(meta), "meta-records,", len(failures), "failures")
print("mean labels per task:", meta.label_matrix().sum(axis=1).mean().round(2))

train, held = split_meta(meta, 0.8, seed=0)
spec = MlpSpec(hidden_layers=2, width=64, epochs=2000, lr=1e-3)
report = evaluate_selectors(train, held, seeds=(0, 1), kinds=("oracle", "random", "global_best", "mlp_multilabel"), mlp_spec=spec)
print()
print(report.summary())

# Query the trained selector for a new dataset profile
mlp = report.selectors["mlp_multilabel"][0]
query = DatasetDescriptor(d_sc=0.95, d_ls=0.5, d_cs=0.5, r=100.0, n=500, d=10)
scores = predict_scores(mlp, query)
print("\nscores:", {name: round(float(v), 2) for name, v in zip(meta.algorithms, scores)})
print("selected:", meta.algorithms[select_algorithm(scores)])

# A depth-3 tree that imitates the MLP's choices
tree = train_mimic_tree(train, mlp, TreeSpec(max_depth=3))
agree = (tree.select(train.descriptors()) == mlp.select(train.descriptors())).mean()
print(f"\nmimic tree agrees with the MLP on {100 * agree:.0f}% of meta-train tasks")
print(export_tree(tree)[1])
