import json
import re

import numpy as np
import pytest

from shiftselect.evaluation import (
    ALL_SHIFTS_GROUP,
    EXTRA_ROWS,
    TABLE_ROWS,
    UnsupportedSelectorError,
    evaluate_selectors,
    export_tree,
    leave_one_descriptor_out,
    pairwise_selector_analysis,
    perf_gap_distribution,
    realized_wg_error,
    scaling_curve,
    selection_histogram,
    selections_for,
    strong_shift_mask,
    write_csv,
    zero_one_accuracy,
)
from shiftselect.metadataset import DESCRIPTOR_FIELDS, DatasetDescriptor, MetaDataset, MetaRecord, suitability_labels
from shiftselect.selectors import (
    MlpSpec,
    OracleSelector,
    TreeSpec,
    shift_magnitude_view,
    train_global_best,
    train_mimic_tree,
    train_mlp_selector,
    train_tree_selector,
)

SMALL = MlpSpec(hidden_layers=2, width=16, epochs=300, lr=1e-2, seed=0)


def _meta(n=80, seed=0):
    """Records where GroupDRO wins under strong spurious correlation and ERM otherwise."""
    rng = np.random.default_rng(seed)
    records = []
    for j in range(n):
        d_sc = float(rng.uniform(0.02, 0.98))
        desc = DatasetDescriptor(
            d_sc, float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)),
            float(rng.choice([1, 10, 100])), int(rng.choice([200, 1000])), int(rng.choice([2, 50])),
        )
        strong = abs(d_sc - 0.5) > 0.25
        perf = np.array([0.35 if strong else 0.1, 0.12 if strong else 0.3, 0.3, 0.3, 0.3])
        perf = perf + rng.uniform(0, 0.01, size=5)
        records.append(
            MetaRecord(f"t{j:03d}", desc, perf, suitability_labels(perf, 0.05),
                       {"avg_perf": list(perf / 2), "ensemble_wg": 0.25, "ensemble_avg": 0.2})
        )
    return MetaDataset(records)


# ---------------------------------------------------------------------------
# scoring


def test_accuracy_and_wg_hand_example():
    meta = _meta(n=4)
    labels = meta.label_matrix()
    sel = np.array([0, 1, 2, 3])
    expected = labels[np.arange(4), sel].mean()
    assert zero_one_accuracy(sel, meta) == pytest.approx(expected)
    assert realized_wg_error(sel, meta) == pytest.approx(meta.perf_matrix()[np.arange(4), sel].mean())


def test_oracle_accuracy_is_one():
    meta = _meta()
    sel = selections_for(OracleSelector(meta.algorithms), meta)
    assert zero_one_accuracy(sel, meta) == 1.0
    assert realized_wg_error(sel, meta) == pytest.approx(meta.perf_matrix().min(axis=1).mean())


def test_misaligned_selections_rejected():
    with pytest.raises(ValueError):
        zero_one_accuracy([0, 1], _meta(n=3))


def test_empty_meta_gives_nan():
    empty = MetaDataset([])
    assert np.isnan(zero_one_accuracy([], empty))
    assert np.isnan(realized_wg_error([], empty))


def test_histogram_counts():
    assert selection_histogram([0, 0, 4, 2], 5) == [2, 0, 1, 0, 1]


def test_evaluate_selectors_rows_and_ordering():
    meta = _meta(n=120)
    train, held = meta.subset(range(90)), meta.subset(range(90, 120))
    report = evaluate_selectors(train, held, seeds=(0, 1), kinds=TABLE_ROWS + EXTRA_ROWS, mlp_spec=SMALL)
    assert list(report.rows) == list(TABLE_ROWS + EXTRA_ROWS)
    assert report.row("oracle")["zero_one_acc_mean"] == 1.0
    assert report.row("ensemble")["zero_one_acc_mean"] is None
    assert report.row("ensemble")["realized_wg_mean"] == pytest.approx(0.25)
    for kind in report.traces:
        assert len(report.traces[kind]) == 2 and len(report.traces[kind][0]) == len(held)
    assert sum(report.row("mlp_multilabel")["histogram"]) == 2 * len(held)
    assert report.row("mlp_multilabel")["zero_one_acc_mean"] > report.row("global_best")["zero_one_acc_mean"]
    json.loads(report.to_json())
    assert "mlp_multilabel" in report.summary()


def test_evaluate_selectors_uses_given_selectors():
    meta = _meta()
    gb = train_global_best(meta)
    report = evaluate_selectors(meta, meta, seeds=(0, 1), kinds=("tree",), selectors={"tree": [gb, gb]})
    assert report.selectors["tree"] == [gb, gb]
    assert report.row("tree")["zero_one_acc_std"] == 0.0


def test_evaluate_selectors_deterministic():
    meta = _meta()
    a = evaluate_selectors(meta, meta, seeds=(0,), kinds=("mlp_multilabel", "random"), mlp_spec=SMALL)
    b = evaluate_selectors(meta, meta, seeds=(0,), kinds=("mlp_multilabel", "random"), mlp_spec=SMALL)
    assert a.to_json() == b.to_json()


# ---------------------------------------------------------------------------
# analyses


def test_gap_antisymmetry():
    meta = _meta()
    ab = perf_gap_distribution(meta, "ERM", "GroupDRO")
    ba = perf_gap_distribution(meta, "GroupDRO", "ERM")
    assert np.array_equal(ab, -ba)
    assert np.all(perf_gap_distribution(meta, "ERM", "ERM") == 0)


def test_strong_shift_mask():
    meta = _meta()
    mask = strong_shift_mask(meta, 0.3)
    X = meta.descriptors()
    assert np.array_equal(mask, np.abs(X[:, :3] - 0.5).max(axis=1) >= 0.3)
    gaps = perf_gap_distribution(meta, "ERM", "GroupDRO", mask)
    assert len(gaps) == mask.sum()


def test_scaling_clamps_oversized_request(caplog):
    meta = _meta(n=40)
    rows = scaling_curve(meta, meta, [10, 500], seeds=(0,), spec=SMALL)
    assert [r["size"] for r in rows] == [10, 40]
    assert "clamping" in caplog.text


def test_pairwise_rejects_identical_pair():
    meta = _meta()
    with pytest.raises(ValueError):
        pairwise_selector_analysis(meta, meta, ("ERM", "ERM"))
    with pytest.raises(ValueError):
        pairwise_selector_analysis(meta, meta, ("ERM",))


def test_pairwise_rows_cover_features():
    meta = _meta(n=60)
    rows = pairwise_selector_analysis(meta, meta, ("ERM", "GroupDRO"), seeds=(0,), spec=SMALL)
    assert [r["feature"] for r in rows] == ["full", *DESCRIPTOR_FIELDS]


def test_leave_one_out_rejects_single_feature():
    meta = _meta()
    with pytest.raises(ValueError):
        leave_one_descriptor_out(meta, meta, features=("d_sc",))
    with pytest.raises(ValueError):
        leave_one_descriptor_out(meta, meta, mode="drop")


def test_leave_one_out_finds_relevant_feature():
    meta = _meta(n=120)
    train, held = meta.subset(range(90)), meta.subset(range(90, 120))
    spec = MlpSpec(hidden_layers=2, width=32, epochs=600, lr=1e-2)
    rows = {r["feature"]: r for r in leave_one_descriptor_out(train, held, (0, 1), spec)}
    assert rows["d_sc"]["drop"] == max(r["drop"] for r in rows.values())
    assert rows["d_sc"]["drop"] > 0.2


def test_masking_all_shifts_matches_naive():
    meta = _meta(n=120)
    train, held = meta.subset(range(90)), meta.subset(range(90, 120))
    spec = MlpSpec(hidden_layers=2, width=32, epochs=600, lr=1e-2)
    rows = {r["feature"]: r for r in leave_one_descriptor_out(train, held, (0, 1), spec, "mask", groups=ALL_SHIFTS_GROUP)}
    naive = np.mean(
        [
            zero_one_accuracy(selections_for(train_mlp_selector(train, MlpSpec(2, 32, 600, 1e-2, s), ("n", "d")), held), held)
            for s in (0, 1)
        ]
    )
    assert rows["all_shifts"]["acc_mean"] == pytest.approx(naive, abs=0.1)


# ---------------------------------------------------------------------------
# tree export


def _run_rules(text, inputs):
    """Interpret the exported if/else rules on a dict of feature values."""
    lines = [ln for ln in text.splitlines() if ln.strip()]

    def block(i, indent):
        line = lines[i]
        body = line.strip()
        if body.startswith("return"):
            values = body[len("return"):].split("#")[0]
            return json.loads(values), i + 1
        m = re.fullmatch(r"if (\S+) <= (\S+):", body)
        assert m, body
        name, thr = m.group(1), float(m.group(2))
        left, j = block(i + 1, indent + 1)
        assert lines[j].strip().startswith("else:")
        right, k = block(j + 1, indent + 1)
        return (name, thr, left, right), k

    tree, _ = block(0, 0)

    def walk(node):
        while isinstance(node, tuple):
            name, thr, left, right = node
            node = left if inputs[name] <= thr else right
        return node

    return np.array(walk(tree))


@pytest.mark.parametrize("mimic", [False, True])
def test_exported_rules_reproduce_scores(mimic):
    meta = _meta()
    if mimic:
        sel = train_mimic_tree(meta, train_mlp_selector(meta, SMALL), TreeSpec(max_depth=3))
    else:
        sel = train_tree_selector(meta, TreeSpec(max_depth=3))
    dot, rules = export_tree(sel)
    assert dot.startswith("digraph Tree {") and dot.rstrip().endswith("}")
    rng = np.random.default_rng(1)
    X = np.column_stack(
        [rng.uniform(0, 1, (100, 3)), rng.choice([1, 10, 100], 100), rng.choice([200, 1000], 100), rng.choice([2, 50], 100)]
    )
    view = shift_magnitude_view(X) if mimic else X
    names = sel.feature_names
    scores = sel.scores(X)
    for row, vrow, s in zip(X, view, scores):
        out = _run_rules(rules, dict(zip(names, vrow)))
        assert np.array_equal(out, s)


def test_dot_edges_match_internal_nodes():
    sel = train_tree_selector(_meta(), TreeSpec(max_depth=2))
    dot, rules = export_tree(sel)
    n_edges = dot.count("->")
    n_ifs = rules.count("if ")
    assert n_edges == 2 * n_ifs


def test_export_rejects_non_tree():
    with pytest.raises(UnsupportedSelectorError):
        export_tree(train_global_best(_meta()))


def test_write_csv(tmp_path):
    path = tmp_path / "x.csv"
    write_csv([{"a": 1, "b": [1, 2]}], path)
    assert path.read_text().splitlines() == ["a,b", '1,"[1, 2]"']
    write_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ""
