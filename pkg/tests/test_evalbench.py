__author__ = "Vanessa Sochat"
__copyright__ = "Copyright 2020-2021, Vanessa Sochat"
__license__ = "MPL 2.0"

from dataclasses import replace

from hypothesis import given, strategies as st
import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import roc_auc_score

from cofars import evalbench, matcher, retrieval


def test_auc_examples():
    assert evalbench.auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert evalbench.auc([0.9, 0.8, 0.3], [1, 0, 1]) == 0.5
    assert evalbench.auc([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        evalbench.auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        evalbench.auc([0.1, 0.2], [1])


@given(
    st.lists(
        st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.booleans()),
        min_size=2,
        max_size=40,
    ).filter(lambda pairs: len({label for _, label in pairs}) == 2)
)
def test_auc_agrees_with_sklearn(pairs):
    scores, labels = zip(*pairs)
    assert evalbench.auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores))


def _rows(values):
    rows = []
    for (model, variant), aucs in values.items():
        for seed, value in enumerate(aucs):
            rows.append(
                {
                    "model": model,
                    "variant": variant,
                    "seed": seed,
                    "auc": value,
                    "log_loss": 0.5,
                    "samples": 100,
                    "fingerprint": "f",
                    "runtime": 1.5 + seed,
                }
            )
    return evalbench.EvalReport(rows)


def test_report_summary_and_file(tmp_path):
    report = _rows({("cofars", "full"): [0.70, 0.72, 0.71], ("avg-pooling", "full"): [0.6, 0.65, 0.62]})
    summary = report.summary()
    row = summary[summary.model == "cofars"].iloc[0]
    assert (row["median"], row["min"], row["max"], row["seeds"]) == (0.71, 0.70, 0.72, 3)
    path = str(tmp_path / "report.csv")
    report.write(path)
    written = pd.read_csv(path)
    assert "runtime" not in written.columns
    assert len(written) == 6
    assert "runtime" in report.to_frame(runtime=True).columns
    with pytest.raises(KeyError):
        report.median("recent-k")


def test_baseline_check():
    report = _rows(
        {
            ("cofars", "full"): [0.70, 0.72, 0.71],
            ("hard-context", "full"): [0.69, 0.70, 0.695],
            ("avg-pooling", "full"): [0.6, 0.65, 0.62],
        }
    )
    results = {r.name: r.passed for r in evalbench.check_baselines(report)}
    assert results == {"cofars beats hard-context": True, "cofars beats avg-pooling": True}
    report = _rows(
        {
            ("cofars", "full"): [0.70, 0.72, 0.71],
            ("hard-context", "full"): [0.705, 0.70, 0.705],
            ("avg-pooling", "full"): [0.6, 0.65, 0.62],
        }
    )
    assert not evalbench.check_baselines(report)[0].passed


def test_ablation_check():
    report = _rows(
        {
            ("cofars", "full"): [0.71],
            ("cofars", "ip"): [0.713],
            ("cofars", "no-mse"): [0.70],
            ("cofars", "no-ind"): [0.72],
        }
    )
    results = {r.name: r.passed for r in evalbench.check_ablation(report)}
    assert results == {"full vs ip": True, "full vs no-mse": True, "full vs no-ind": False}
    report = _rows({("cofars", "full"): [0.71], ("cofars", "no-mse"): [0.71]})
    assert not evalbench.check_ablation(report)[0].passed


def test_sweep_check():
    values = (1, 10, 40, 80)
    aucs = {1: 0.6, 10: 0.68, 40: 0.71, 80: 0.705}
    report = _rows({("cofars", evalbench.sweep_label("prototypes", v)): [a] for v, a in aucs.items()})
    assert all(r.passed for r in evalbench.check_sweep(report, values))
    aucs[80] = 0.69
    report = _rows({("cofars", evalbench.sweep_label("prototypes", v)): [a] for v, a in aucs.items()})
    assert [r.passed for r in evalbench.check_sweep(report, values)] == [True, False]


def test_heatmap(model, dataset):
    log = max(dataset.logs.values(), key=lambda log: len(log.contexts))
    frame = evalbench.heatmap(model, log)
    values = frame.values
    assert values.shape == (len(log.contexts), len(log.contexts))
    assert np.all(np.diag(values) == 1.0)
    assert np.array_equal(values, values.T)
    assert values.min() == 0.0 and values.max() == 1.0
    assert list(frame.index) == list(frame.columns)
    within, across = evalbench.group_contrast(frame, log.contexts, dataset.truth)
    for value in (within, across):
        assert np.isnan(value) or 0 <= value <= 1


def test_bench_counts(model, caches):
    grid = ((300, 1), (300, 2), (300, 8), (600, 1), (600, 4))
    report = evalbench.bench(model, caches, grid=grid, repeats=5)
    frame = report.to_frame()
    assert (frame.scan_ops == frame.n * frame.B).all()
    for _, group in frame.groupby("n"):
        assert group.cofars_ops.nunique() == 1
    config = model.config
    assert (frame.cofars_ops <= config.window + config.prototypes + config.cap).all()
    assert all(r.passed for r in evalbench.check_bench(report))
    assert "cofars_seconds" not in frame.columns
    with pytest.raises(ValueError):
        evalbench.bench(model, caches, grid=grid, repeats=2)


def test_pad_history(dataset):
    log = dataset.logs[sorted(dataset.logs)[0]]
    padded = evalbench.pad_history(log.clicks, 2 * len(log.clicks) + 1)
    assert [r.timestamp for r in padded] == list(range(len(padded)))
    assert padded[len(log.clicks)].poi_id == log.clicks[0].poi_id


def test_first_stage_checks(model, dataset, caches):
    alignment = evalbench.check_alignment(model, dataset.logs)
    assert alignment.name == "alignment"
    assert "spearman" in alignment.detail
    score = evalbench.cluster_recovery(caches, dataset.truth)
    assert -1 <= score <= 1
    purity = evalbench.subsequence_purity(model, caches, dataset.truth)
    assert 0 <= purity <= 1


def test_divergence_and_gate_suites():
    results = evalbench.divergence_suite(pairs=500) + evalbench.gumbel_suite()
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_summary_rendering():
    checks = [evalbench.CheckResult("alpha", True, "ok"), evalbench.CheckResult("beta", False, "bad")]
    text = evalbench.render_summary("title", pd.DataFrame({"a": [1]}), checks, "abc")
    assert "fingerprint: abc" in text
    assert "[PASS] alpha: ok" in text
    assert "[FAIL] beta: bad" in text


def test_run_cell(dataset, tiny_train):
    config = replace(tiny_train, epochs=1)
    rows = evalbench.run_cell(dataset, config, 0, ("cofars", "avg-pooling"))
    assert [row["model"] for row in rows] == ["cofars", "avg-pooling"]
    assert all(0 <= row["auc"] <= 1 for row in rows)
    assert rows[0]["fingerprint"] == rows[1]["fingerprint"]
    again = evalbench.run_cell(dataset, config, 0, ("cofars",))
    assert again[0]["auc"] == rows[0]["auc"]


@pytest.mark.slow
def test_selftest_gradients():
    results = evalbench.gradient_suite()
    assert all(r.passed for r in results), [r for r in results if not r.passed]


@pytest.mark.slow
def test_comparison_runs(dataset, tiny_train):
    config = replace(tiny_train, epochs=1)
    report = evalbench.baselines(dataset, config, seeds=(0, 1), workers=2)
    assert len(report) == 2 * len(evalbench.BASELINES)
    sweep = evalbench.sweep(dataset, config, "tau", (1e-3, 1.0), seeds=(0,))
    assert set(sweep.to_frame().variant) == {"tau=0.001", "tau=1.0"}


@pytest.mark.slow
def test_planted_groups_are_recovered(planted, planted_train):
    config = replace(planted_train, gamma=1.0)
    model, _ = matcher.train(planted.logs, planted.schema, planted.vocabulary, config, seed=0)
    alignment = evalbench.check_alignment(model, planted.logs, threshold=0.9)
    assert alignment.passed, alignment.detail
    caches = retrieval.build_cache(model, planted.logs)
    recovery = evalbench.check_cluster_recovery(caches, planted.truth, threshold=0.8)
    assert recovery.passed, recovery.detail


@pytest.mark.slow
def test_cofars_beats_the_baselines(planted, planted_train):
    report = evalbench.baselines(planted, planted_train, seeds=(0, 1, 2), workers=0)
    results = evalbench.check_baselines(report, margin=0.01)
    assert all(r.passed for r in results), [r.detail for r in results]


@pytest.mark.slow
def test_ablations_do_not_beat_the_full_model(planted, planted_train):
    report = evalbench.ablate(planted, planted_train, seeds=(0, 1, 2), workers=0)
    results = evalbench.check_ablation(report, slack=0.005)
    assert len(results) == 4
    assert all(r.passed for r in results), [r.detail for r in results]


@pytest.mark.slow
def test_prototype_sweep_shape(planted, planted_train):
    values = (1, 10, 40, 80)
    report = evalbench.sweep(planted, planted_train, "prototypes", values, seeds=(0, 1, 2), workers=0)
    results = evalbench.check_sweep(report, values, plateau=0.01)
    assert all(r.passed for r in results), [r.detail for r in results]
