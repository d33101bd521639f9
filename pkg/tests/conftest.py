"""Shared fixtures.

The desk-scale meta-dataset takes a few minutes to build, so it is cached on
disk under a key made from the package sources and the experiment config.
Set ``SHIFTSELECT_TEST_CACHE`` to move the cache, or delete it to rebuild.
"""

import hashlib
import json
import os
from pathlib import Path

import pytest

import shiftselect
from shiftselect.cli import ExperimentConfig
from shiftselect.metadataset import assemble_meta_dataset, default_workers, load_meta, save_meta
from shiftselect.selectors import split_meta
from shiftselect.shiftgen import build_task_grid

CACHE_DIR = Path(os.environ.get("SHIFTSELECT_TEST_CACHE", Path(__file__).parent / ".cache"))
PKG_DIR = Path(shiftselect.__file__).parent

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def _source_hash(names) -> str:
    h = hashlib.sha256()
    for name in names:
        h.update((PKG_DIR / name).read_bytes())
    return h.hexdigest()


def desk_config() -> ExperimentConfig:
    return ExperimentConfig()


def desk_specs(cfg=None):
    cfg = cfg or desk_config()
    g = cfg.grid
    return build_task_grid(
        g.sizes,
        g.dims,
        g.availabilities,
        g.n_triples,
        g.single_shift_grid,
        master_seed=cfg.master_seed,
        subsample=g.subsample,
        core_variance=g.core_variance,
    )


@pytest.fixture(scope="session")
def desk_meta():
    cfg = desk_config()
    key = hashlib.sha256(
        (
            _source_hash(["shiftgen.py", "algorithms.py", "metadataset.py", "_optim.py"])
            + json.dumps(cfg.to_dict(), sort_keys=True)
        ).encode()
    ).hexdigest()[:16]
    path = CACHE_DIR / f"desk_meta_{key}.jsonl"
    if path.exists():
        return load_meta(path)
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    partial = CACHE_DIR / f"desk_meta_{key}.partial.jsonl"
    meta, failures = assemble_meta_dataset(
        desk_specs(cfg),
        cfg.train_config(),
        cfg.epsilon,
        cfg.descriptor_mode,
        workers=default_workers(),
        partial_path=partial,
    )
    assert not failures, failures
    save_meta(meta, path)
    partial.unlink()
    return meta


@pytest.fixture(scope="session")
def desk_split(desk_meta):
    cfg = desk_config()
    return split_meta(desk_meta, cfg.split.train_fraction, cfg.split.seed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
