"""Choosing a shift-robust training algorithm from a dataset's shift profile.

Submodules:

- ``shiftgen``: controlled group-shift task construction
- ``algorithms``: the candidate training algorithms and group-error metrics
- ``metadataset``: descriptors, suitability labels and meta-dataset assembly
- ``selectors``: algorithm selectors trained on the meta-dataset
- ``evaluation``: selector scoring and analyses
- ``cli``: config-driven command-line pipeline
"""

from .algorithms import ALGORITHMS, TrainConfig, run_all_algorithms, train_model
from .metadataset import (
    DatasetDescriptor,
    MetaDataset,
    MetaRecord,
    assemble_meta_dataset,
    compute_descriptor,
    load_meta,
    save_meta,
    suitability_labels,
)
from .selectors import predict_scores, select_algorithm, train_mlp_selector
from .shiftgen import (
    GroupCounts,
    ShiftDegrees,
    TaskSpec,
    build_task_grid,
    generate_synthetic_task,
    is_feasible,
    quantify_shifts,
    solve_group_counts,
)

__version__ = "0.1.0"
