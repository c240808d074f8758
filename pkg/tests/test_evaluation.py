import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metalora import oracles
from metalora.config import AdapterConfig, OptimConfig, PretrainConfig, RunConfig
from metalora.data import TaskSetSpec
from metalora.evaluation import (
    BudgetMismatchWarning,
    check_budget,
    knn_evaluate,
    knn_predict,
    run_comparison,
    table1_lineup,
)


def test_exact_match_with_k1():
    train = np.array([[0.0, 0.0], [5.0, 5.0]])
    assert knn_predict(train, [3, 7], [[5.0, 5.0]], 1).tolist() == [7]


def test_two_clusters_k3():
    train = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
    labels = [0, 0, 1, 1]
    test = np.array([[0.05, 0.0], [10.05, 10.0]])
    # k=3 includes one far point; the majority still wins
    assert knn_evaluate(train, labels, test, [0, 1], 3) == 1.0
    assert oracles.knn_exhaustive(train, labels, test, 3) == [0, 1]


def test_single_train_label():
    rng = np.random.default_rng(0)
    train, test = rng.standard_normal((6, 3)), rng.standard_normal((5, 3))
    test_labels = [1, 0, 1, 1, 2]
    for k in (1, 3, 6):
        assert knn_evaluate(train, [1] * 6, test, test_labels, k) == 0.6


def test_tie_breaks():
    # k=2, one vote each: the closer class wins
    assert knn_predict([[1.0], [3.0]], [5, 2], [[1.5]], 2).tolist() == [5]
    # equal summed distance: smaller class index wins
    assert knn_predict([[1.0], [3.0]], [5, 2], [[2.0]], 2).tolist() == [2]


def test_knn_errors():
    with pytest.raises(ValueError):
        knn_predict(np.zeros((0, 2)), [], [[0.0, 0.0]], 1)
    with pytest.raises(ValueError):
        knn_predict([[0.0]], [0], [[0.0]], 2)


@given(st.integers(1, 12), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_knn_matches_exhaustive_oracle(n, m, k, seed):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    train = rng.integers(-2, 3, (n, 2)).astype(float)  # integer grid forces ties
    labels = rng.integers(0, 3, n)
    test = rng.integers(-2, 3, (m, 2)).astype(float)
    assert knn_predict(train, labels, test, k).tolist() == oracles.knn_exhaustive(train, labels, test, k)


@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_accuracy_invariant_to_order_preserving_relabel(n, k, seed):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    train, test = rng.standard_normal((n, 3)), rng.standard_normal((4, 3))
    labels, test_labels = rng.integers(0, 3, n), rng.integers(0, 3, 4)
    perm = np.array([4, 7, 9])  # keeps the class order, so the last tie-break is unaffected
    a = knn_evaluate(train, labels, test, test_labels, k)
    assert knn_evaluate(train, perm[labels], test, perm[test_labels], k) == a


def test_budget_check():
    assert check_budget({"Original": 0, "a": 100, "b": 95}, 0.1)["ok"]
    res = check_budget({"a": 100, "b": 80}, 0.1)
    assert not res["ok"] and res["mismatched"] == ["b"]


def test_table1_lineup_is_budget_matched():
    from metalora.model import init_base
    from metalora.training import build_model

    cfg = RunConfig()
    base = init_base(3, 3, 8, 2, np.random.default_rng(0))
    counts = {a.label: build_model(a, base, cfg, 0).adapter_param_count() for a in table1_lineup()}
    assert counts["Original"] == 0
    assert check_budget(counts, 0.1)["ok"]


def _tiny_cfg(**kw):
    base = dict(
        tasks=TaskSetSpec(num_tasks=2, train_per_class=6, test_per_class=6, pretrain_per_class=10),
        optim=OptimConfig(lr=0.05, batch_size=8, epochs=2),
        pretrain=PretrainConfig(epochs=3),
        seeds=[0, 1],
    )
    return RunConfig(**{**base, **kw})


def test_original_only_table():
    table = run_comparison(_tiny_cfg(), [AdapterConfig("original")])
    assert len(table.arms) == 1
    assert table.to_csv().count("\n") == 1 + 2 * 2  # header + K x seeds
    assert table.welch(5) == {}


def test_zero_initialized_meta_equals_original():
    cfg = _tiny_cfg(optim=OptimConfig(lr=0.0, batch_size=8, epochs=1))
    cfg.mapping.output_bias = "zeros"
    cfg.mapping.output_gain = 0.0
    table = run_comparison(cfg, [AdapterConfig("original"), AdapterConfig("conv_meta_cp", 2, "conv")])
    o, m = table.arms
    assert o.accuracy == m.accuracy


def test_budget_mismatch_warns_and_is_reported():
    arms = [AdapterConfig("conv_lora", 1, "conv"), AdapterConfig("conv_lora", 4, "conv", name="big")]
    with pytest.warns(BudgetMismatchWarning):
        table = run_comparison(_tiny_cfg(seeds=[0]), arms)
    assert table.warnings and not table.budget["ok"]


def test_comparison_is_deterministic_and_worker_independent(monkeypatch):
    arms = [AdapterConfig("original"), AdapterConfig("conv_meta_tr", 1, "conv")]
    monkeypatch.setenv("METALORA_THREADS", "1")
    serial = run_comparison(_tiny_cfg(), arms).to_json()
    monkeypatch.setenv("METALORA_THREADS", "2")
    parallel = run_comparison(_tiny_cfg(), arms).to_json()
    assert serial == parallel
    assert '"welch"' in serial and "NaN" not in serial
