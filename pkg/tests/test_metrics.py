import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t3po.metrics import (
    AggregateResult,
    RunResult,
    accuracy,
    aggregate,
    auroc,
    auroc_bruteforce,
    bold_rule,
    ci95_halfwidth,
)

scores = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=30)


def test_accuracy_basic():
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75


def test_accuracy_on_names():
    assert accuracy(["a", "b"], ["a", "a"]) == 0.5


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])


def test_auroc_analytic_cases():
    assert auroc([3.0] * 5, [3.0] * 7) == 0.5
    assert auroc([2, 3, 4], [0, 1]) == 1.0
    assert auroc([0, 1], [2, 3, 4]) == 0.0


def test_auroc_hand_example():
    # pairs: (0.9>0.1) (0.9>0.5) (0.4>0.1) (0.4<0.5) -> 3/4
    assert auroc([0.9, 0.4], [0.1, 0.5]) == 0.75


def test_auroc_tie_counts_half():
    # (1 vs 1) tie -> 1/2, (2 vs 1) win -> 1; total 1.5 / 2
    assert auroc([1, 2], [1]) == 0.75


def test_auroc_empty_raises():
    with pytest.raises(ValueError):
        auroc([], [1.0])
    with pytest.raises(ValueError):
        auroc_bruteforce([1.0], [])


def test_auroc_matches_bruteforce_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n1, n2 = rng.integers(1, 51, 2)
        # coarse integer scores force plenty of ties
        c = rng.integers(0, 6, n1).astype(float)
        o = rng.integers(0, 6, n2).astype(float)
        assert auroc(c, o) == pytest.approx(auroc_bruteforce(c, o), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_auroc_complement(c, o):
    assert auroc(c, o) + auroc(o, c) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_auroc_invariant_under_monotone_maps(c, o):
    f = lambda v: np.exp(np.asarray(v) / 3.0) * 7 - 2
    assert auroc(c, o) == pytest.approx(auroc(f(c), f(o)), abs=1e-12)
    assert 0.0 <= auroc(c, o) <= 1.0


def test_ci_two_values():
    # t_{0.975,1} = 12.706..., s = 0.0707..., n = 2
    assert ci95_halfwidth([0.8, 0.9]) == pytest.approx(12.7062047 * 0.0707106781 / np.sqrt(2), rel=1e-6)
    assert ci95_halfwidth([0.8, 0.9]) == pytest.approx(0.6353, abs=1e-4)


def test_ci_degenerate():
    assert ci95_halfwidth([0.7]) == 0.0
    assert ci95_halfwidth([0.5, 0.5, 0.5]) == 0.0


def run(scorer, seed, acc, auc, split="S1"):
    return RunResult(split, scorer, seed, acc, auc, 10, 5)


def test_runresult_validation():
    with pytest.raises(ValueError):
        run("t3po", 0, 1.2, 0.5)
    with pytest.raises(ValueError):
        RunResult("S1", "t3po", 0, 0.5, 0.5, 0, 5)


def test_aggregate_mean_and_ci():
    a = aggregate([run("msp", 1, 0.8, 0.6), run("msp", 0, 0.9, 0.7)])
    assert a.n_runs == 2 and a.seeds == (0, 1)
    assert a.mean_acc == pytest.approx(0.85)
    assert a.mean_auc == pytest.approx(0.65)
    assert a.ci95_acc == pytest.approx(ci95_halfwidth([0.8, 0.9]))
    assert a.to_dict()["seeds"] == "0 1"


def test_aggregate_rejects_mixed_groups():
    with pytest.raises(ValueError):
        aggregate([run("msp", 0, 0.8, 0.6), run("t3po", 0, 0.8, 0.6)])
    with pytest.raises(ValueError):
        aggregate([])


def agg(scorer, auc, ci):
    return AggregateResult("S1", scorer, 3, 0.9, auc, 0.0, ci)


def test_bold_rule():
    best, bold = bold_rule([agg("t3po", 0.90, 0.03), agg("msp", 0.88, 0.01), agg("maxlogit", 0.86, 0.05)])
    assert best == "t3po"
    assert bold == {"t3po", "msp"}


def test_bold_rule_zero_width_marks_only_ties():
    best, bold = bold_rule([agg("a", 0.8, 0.0), agg("b", 0.8, 0.0), agg("c", 0.79, 0.0)])
    assert best == "a" and bold == {"a", "b"}
