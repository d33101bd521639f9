"""Command-line driver: config-file experiments from task grid to report.

Every command reads one JSON config. Outputs land in
``<output_dir>/<config hash>/`` so reruns of the same config overwrite the
same files and different configs never collide.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .algorithms import ALGORITHMS, TrainConfig
from .evaluation import (
    ALL_SHIFTS_GROUP,
    EXTRA_ROWS,
    TABLE_ROWS,
    UnsupportedSelectorError,
    evaluate_selectors,
    export_tree,
    leave_one_descriptor_out,
    pairwise_selector_analysis,
    perf_gap_distribution,
    scaling_curve,
    strong_shift_mask,
    train_selector_kind,
    write_csv,
)
from .metadataset import (
    DESCRIPTOR_FIELDS,
    DESCRIPTOR_MODES,
    EPSILON_GRID,
    METRICS,
    MetaDataset,
    SchemaError,
    assemble_meta_dataset,
    default_workers,
    load_meta,
    save_failures,
    save_meta,
)
from .selectors import (
    RULES,
    SELECTOR_KINDS,
    MlpSpec,
    TreeSpec,
    load_selector,
    meta_fingerprint,
    save_selector,
    split_meta,
)
from .shiftgen import (
    SINGLE_SHIFT_GRID,
    build_task_grid,
    is_feasible,
    load_task_specs,
    save_task_specs,
)

log = logging.getLogger("shiftselect")

# exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_UNSUPPORTED = 4
EXIT_DATA = 5


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class GridConfig:
    sizes: list = field(default_factory=lambda: [200, 500, 1000])
    dims: list = field(default_factory=lambda: [2, 10, 50])
    availabilities: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    n_triples: int = 20
    single_shift_grid: list | None = field(default_factory=lambda: list(SINGLE_SHIFT_GRID))
    subsample: int | None = 530
    core_variance: float = 10.0


@dataclass
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0
    meta_train_max_n: int | None = None
    eval_min_n: int | None = None


@dataclass
class SelectorConfig:
    kinds: list = field(default_factory=lambda: list(TABLE_ROWS + EXTRA_ROWS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    mlp: dict = field(default_factory=lambda: asdict(MlpSpec()))
    tree: dict = field(default_factory=lambda: asdict(TreeSpec()))
    knn_k: int = 5
    rule: str = "top_logit"


@dataclass
class AnalysisConfig:
    scaling_sizes: list = field(default_factory=lambda: [50, 100, 200, 400])
    leave_one_out: bool = True
    loo_mode: str = "retrain"
    pairs: list = field(default_factory=lambda: [["Oversample", "Undersample"]])
    gap_reference: str = "ERM"
    strong_shift_threshold: float = 0.3


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    epsilon: float = 0.05
    epsilon_grid: list = field(default_factory=lambda: list(EPSILON_GRID))
    descriptor_mode: str = "oracle"
    metric: str = "worst_group"
    split: SplitConfig = field(default_factory=SplitConfig)
    selectors: SelectorConfig = field(default_factory=SelectorConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "runs"

    _SECTIONS = {"grid": GridConfig, "split": SplitConfig, "selectors": SelectorConfig, "analysis": AnalysisConfig}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            section = cls._SECTIONS.get(key)
            if section is not None:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key!r} must be an object")
                sub_known = {f.name for f in fields(section)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                value = section(**value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        """Check everything that can be checked without running anything."""
        g = self.grid
        for name in ("sizes", "dims", "availabilities"):
            values = getattr(g, name)
            if not values or any(v <= 0 for v in values):
                raise ConfigError(f"grid.{name} must be a non-empty list of positive numbers")
        if any(int(n) < 4 for n in g.sizes):
            raise ConfigError("grid.sizes entries must be at least 4")
        if g.n_triples < 0:
            raise ConfigError("grid.n_triples must be non-negative")
        if g.n_triples == 0 and not g.single_shift_grid:
            raise ConfigError("grid has no degree configurations")
        if g.subsample is not None and g.subsample < 1:
            raise ConfigError("grid.subsample must be positive")
        if g.core_variance <= 0:
            raise ConfigError("grid.core_variance must be positive")
        try:
            self.train_config()
            self.mlp_spec()
            self.tree_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad training spec: {exc}") from exc
        if not 0 <= self.epsilon < 1:
            raise ConfigError("epsilon must lie in [0, 1)")
        if any(not 0 <= e < 1 for e in self.epsilon_grid) or list(self.epsilon_grid) != sorted(self.epsilon_grid):
            raise ConfigError("epsilon_grid must be sorted values in [0, 1)")
        if self.descriptor_mode not in DESCRIPTOR_MODES:
            raise ConfigError(f"descriptor_mode must be one of {DESCRIPTOR_MODES}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if not 0 < self.split.train_fraction < 1:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        s = self.selectors
        bad = set(s.kinds) - set(SELECTOR_KINDS) - {"naive", "ensemble"}
        if bad:
            raise ConfigError(f"unknown selector kinds {sorted(bad)}")
        if len(s.seeds) < 1 or len(set(s.seeds)) != len(s.seeds):
            raise ConfigError("selectors.seeds must be distinct and non-empty")
        if s.rule not in RULES:
            raise ConfigError(f"selectors.rule must be one of {RULES}")
        if s.knn_k < 1:
            raise ConfigError("selectors.knn_k must be positive")
        a = self.analysis
        if a.loo_mode not in ("retrain", "mask"):
            raise ConfigError("analysis.loo_mode must be 'retrain' or 'mask'")
        for pair in a.pairs:
            if len(pair) != 2 or pair[0] == pair[1] or set(pair) - set(ALGORITHMS):
                raise ConfigError(f"invalid algorithm pair {pair}")
        if a.gap_reference not in ALGORITHMS:
            raise ConfigError(f"unknown gap reference {a.gap_reference!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec(**self.selectors.mlp)

    def tree_spec(self) -> TreeSpec:
        return TreeSpec(**self.selectors.tree)

    def digest(self) -> str:
        """Hash of everything that affects results (not where they are written)."""
        payload = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.digest()


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingInputError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# paths


class Layout:
    def __init__(self, root: Path):
        self.root = root
        self.config = root / "config.json"
        self.specs = root / "specs.jsonl"
        self.meta = root / "meta.jsonl"
        self.partial = root / "meta.partial.jsonl"
        self.failures = root / "failures.jsonl"
        self.selectors = root / "selectors"
        self.report = root / "report.json"
        self.summary = root / "summary.txt"
        self.analysis = root / "analysis"
        self.trees = root / "trees"

    def selector(self, kind: str, seed: int) -> Path:
        return self.selectors / f"{kind}_seed{seed}.json"


def _prepare(cfg: ExperimentConfig, dry_run: bool) -> Layout:
    layout = Layout(cfg.run_dir())
    if not dry_run:
        layout.root.mkdir(parents=True, exist_ok=True)
        layout.config.write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
    return layout


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{path} not found; run `{hint}` first")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_tasks(cfg: ExperimentConfig, dry_run: bool = False, **_) -> Path:
    g = cfg.grid
    specs = build_task_grid(
        g.sizes,
        g.dims,
        g.availabilities,
        g.n_triples,
        g.single_shift_grid,
        master_seed=cfg.master_seed,
        subsample=g.subsample,
        core_variance=g.core_variance,
    )
    kept = []
    for spec in specs:
        if is_feasible(spec.degrees):
            kept.append(spec)
        else:
            log.warning("skipping infeasible grid entry %s %s", spec.task_id, spec.degrees)
    layout = _prepare(cfg, dry_run)
    if dry_run:
        print(f"would write {len(kept)} task specs to {layout.specs}")
        return layout.specs
    save_task_specs(kept, layout.specs)
    print(f"wrote {len(kept)} task specs to {layout.specs}")
    return layout.specs


def cmd_build_meta(cfg: ExperimentConfig, workers: int = 1, dry_run: bool = False, max_tasks=None, **_) -> Path:
    layout = Layout(cfg.run_dir())
    specs = load_task_specs(_require(layout.specs, "gen-tasks"))
    if dry_run:
        done = 0
        if layout.partial.exists():
            done = sum(1 for line in layout.partial.read_text().splitlines() if line.strip())
        print(
            f"would train {len(ALGORITHMS)} algorithms on {len(specs)} tasks "
            f"({done} already in {layout.partial.name}) with {workers} worker(s); "
            f"output {layout.meta}"
        )
        return layout.meta
    _prepare(cfg, dry_run)

    def progress(i, total):
        if i % 50 == 0 or i == total:
            log.info("build-meta: %d/%d tasks", i, total)

    meta, failures = assemble_meta_dataset(
        specs,
        cfg.train_config(),
        cfg.epsilon,
        cfg.descriptor_mode,
        workers=workers,
        partial_path=layout.partial,
        limit=max_tasks,
        progress=progress,
    )
    save_failures(failures, layout.failures)
    if len(meta) + len(failures) < len(specs):
        print(f"stopped early: {len(meta) + len(failures)}/{len(specs)} tasks done; rerun to resume")
        return layout.partial
    save_meta(meta, layout.meta)
    layout.partial.unlink(missing_ok=True)
    print(f"wrote {len(meta)} records to {layout.meta} ({len(failures)} failures)")
    return layout.meta


def _split(cfg: ExperimentConfig, layout: Layout) -> tuple[MetaDataset, MetaDataset]:
    meta = load_meta(_require(layout.meta, "build-meta"))
    meta = meta.with_metric(cfg.metric)
    if meta.epsilon != cfg.epsilon:
        meta = meta.relabel(cfg.epsilon)
    train, held = split_meta(meta, cfg.split.train_fraction, cfg.split.seed)
    n_col = DESCRIPTOR_FIELDS.index("n")
    if cfg.split.meta_train_max_n is not None:
        keep = np.flatnonzero(train.descriptors()[:, n_col] <= cfg.split.meta_train_max_n)
        train = train.subset(keep)
    if cfg.split.eval_min_n is not None:
        keep = np.flatnonzero(held.descriptors()[:, n_col] >= cfg.split.eval_min_n)
        held = held.subset(keep)
    if len(train) < 2 or len(held) < 1:
        raise ConfigError(f"split leaves {len(train)} train / {len(held)} eval records")
    return train, held


def cmd_train_selector(cfg: ExperimentConfig, dry_run: bool = False, **_) -> Path:
    layout = Layout(cfg.run_dir())
    train, _held = _split(cfg, layout)
    kinds = [k for k in cfg.selectors.kinds if k != "ensemble"]
    if dry_run:
        print(f"would train {kinds} x seeds {cfg.selectors.seeds} on {len(train)} records into {layout.selectors}")
        return layout.selectors
    _prepare(cfg, dry_run)
    layout.selectors.mkdir(exist_ok=True)
    fingerprint = meta_fingerprint(layout.meta)
    mlps = {}
    order = sorted(kinds, key=lambda k: k != "mlp_multilabel")
    for kind in order:
        for seed in cfg.selectors.seeds:
            sel = train_selector_kind(
                kind,
                train,
                seed,
                cfg.mlp_spec(),
                cfg.tree_spec(),
                cfg.selectors.knn_k,
                mlp=mlps.get(seed) if kind == "mimic_tree" else None,
            )
            if kind == "mlp_multilabel":
                mlps[seed] = sel
            sel.meta_fingerprint = fingerprint
            save_selector(sel, layout.selector(kind, seed))
            log.info("trained %s seed %d", kind, seed)
    print(f"wrote {len(kinds) * len(cfg.selectors.seeds)} selector artifacts to {layout.selectors}")
    return layout.selectors


def cmd_evaluate(cfg: ExperimentConfig, dry_run: bool = False, **_) -> Path:
    layout = Layout(cfg.run_dir())
    train, held = _split(cfg, layout)
    kinds = list(cfg.selectors.kinds)
    provided = {}
    for kind in kinds:
        if kind == "ensemble":
            continue
        provided[kind] = [
            load_selector(_require(layout.selector(kind, s), "train-selector")) for s in cfg.selectors.seeds
        ]
    if dry_run:
        print(f"would evaluate {kinds} on {len(held)} held-out records; output {layout.report}")
        return layout.report
    report = evaluate_selectors(
        train,
        held,
        cfg.selectors.seeds,
        kinds,
        cfg.mlp_spec(),
        cfg.tree_spec(),
        cfg.selectors.knn_k,
        cfg.selectors.rule,
        selectors=provided,
    )
    layout.report.write_text(report.to_json() + "\n")
    summary = report.summary()
    layout.summary.write_text(summary + "\n")
    print(summary)
    return layout.report


def cmd_analyze(cfg: ExperimentConfig, workers: int = 1, dry_run: bool = False, **_) -> Path:
    layout = Layout(cfg.run_dir())
    train, held = _split(cfg, layout)
    a = cfg.analysis
    seeds = cfg.selectors.seeds
    spec = cfg.mlp_spec()
    planned = ["epsilon_sweep.csv", "perf_gaps.csv", "scaling.csv"]
    if a.leave_one_out:
        planned.append("leave_one_out.csv")
    planned += [f"pairwise_{p[0]}_{p[1]}.csv" for p in a.pairs]
    if dry_run:
        print(f"would write {planned} to {layout.analysis}")
        return layout.analysis
    _prepare(cfg, dry_run)
    layout.analysis.mkdir(exist_ok=True)
    full = load_meta(layout.meta).with_metric(cfg.metric)

    rows = []
    for eps in cfg.epsilon_grid:
        labels = full.relabel(eps).label_matrix()
        row = {"epsilon": eps, "mean_suitable": float(labels.sum(axis=1).mean())}
        row.update({f"frac_{name}": float(v) for name, v in zip(full.algorithms, labels.mean(axis=0))})
        rows.append(row)
    write_csv(rows, layout.analysis / "epsilon_sweep.csv")

    rows = []
    strong = strong_shift_mask(full, a.strong_shift_threshold)
    for other in full.algorithms:
        if other == a.gap_reference:
            continue
        gaps = perf_gap_distribution(full, a.gap_reference, other)
        for subset, mask in (("all", np.ones(len(gaps), bool)), ("strong_shift", strong)):
            g = gaps[mask]
            rows.append(
                {
                    "reference": a.gap_reference,
                    "algorithm": other,
                    "subset": subset,
                    "count": int(len(g)),
                    "mean_gap": float(g.mean()) if len(g) else float("nan"),
                    "q10": float(np.quantile(g, 0.1)) if len(g) else float("nan"),
                    "median": float(np.median(g)) if len(g) else float("nan"),
                    "q90": float(np.quantile(g, 0.9)) if len(g) else float("nan"),
                    "frac_positive": float((g > 0).mean()) if len(g) else float("nan"),
                }
            )
    write_csv(rows, layout.analysis / "perf_gaps.csv")

    write_csv(scaling_curve(train, held, a.scaling_sizes, seeds, spec), layout.analysis / "scaling.csv")
    if a.leave_one_out:
        rows = leave_one_descriptor_out(train, held, seeds, spec, a.loo_mode, groups=ALL_SHIFTS_GROUP)
        write_csv(rows, layout.analysis / "leave_one_out.csv")
    for pair in a.pairs:
        rows = pairwise_selector_analysis(train, held, pair, seeds, spec, a.loo_mode)
        write_csv(rows, layout.analysis / f"pairwise_{pair[0]}_{pair[1]}.csv")
    print(f"wrote {len(planned)} analysis files to {layout.analysis}")
    return layout.analysis


def cmd_export_tree(cfg: ExperimentConfig, artifact: str | None = None, dry_run: bool = False, **_) -> Path:
    layout = Layout(cfg.run_dir())
    if artifact is not None:
        paths = [_require(Path(artifact), "train-selector")]
    else:
        paths = sorted(layout.selectors.glob("tree_seed*.json")) + sorted(layout.selectors.glob("mimic_tree_seed*.json"))
        if not paths:
            raise MissingInputError(f"no tree artifacts under {layout.selectors}; run `train-selector` first")
    selectors = [(p, load_selector(p)) for p in paths]
    for p, sel in selectors:
        if sel.kind not in ("tree", "mimic_tree"):
            raise UnsupportedSelectorError(f"{p}: {sel.kind!r} selectors cannot be exported as trees")
    if dry_run:
        print(f"would export {[p.name for p in paths]} to {layout.trees}")
        return layout.trees
    out = layout.trees
    out.mkdir(parents=True, exist_ok=True)
    for p, sel in selectors:
        dot, rules = export_tree(sel)
        (out / f"{p.stem}.dot").write_text(dot)
        (out / f"{p.stem}.txt").write_text(rules)
    print(f"exported {len(selectors)} tree(s) to {out}")
    return out


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "build-meta": cmd_build_meta,
    "train-selector": cmd_train_selector,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "export-tree": cmd_export_tree,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftselect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults to the desk-scale setup)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, help="worker processes (env SHIFTSELECT_WORKERS)")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--dry-run", action="store_true", help="print planned work and write nothing")
        if name == "build-meta":
            p.add_argument("--max-tasks", type=int, help="stop after this many new tasks")
        if name == "export-tree":
            p.add_argument("artifact", nargs="?", help="selector artifact (default: all tree artifacts)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, master_seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, output_dir=args.out)
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise ConfigError("--workers must be positive")
        extra = {}
        if args.command == "build-meta":
            extra["max_tasks"] = args.max_tasks
        if args.command == "export-tree":
            extra["artifact"] = args.artifact
        COMMANDS[args.command](cfg, workers=workers, dry_run=args.dry_run, **extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except UnsupportedSelectorError as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except SchemaError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
