import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rkto.evalstats import (JudgmentTable, agreement_report, bootstrap_ci, category_counts, cohen_kappa,
                            fleiss_kappa, majority_vote, read_judgments, stratified_sample, write_judgments)
from rkto.exceptions import CapacityError, DimensionError, InvalidInputError, ParseError

FLEISS_GOLDEN = 22 / 70  # hand evaluation: P_bar = 2/3, P_e = 74/144


def _pool():
    return [(i, f"s{i % 5}") for i in range(50)]


# -- stratified sampling ------------------------------------------------------------

def test_exhaustive_counts_return_whole_pool():
    pool = _pool()
    out = stratified_sample(pool, {f"s{k}": 10 for k in range(5)}, seed=0)
    assert sorted(out) == sorted(pool)


def test_stratified_counts_and_determinism():
    counts = {"s0": 3, "s1": 1, "s2": 7, "s3": 0, "s4": 10}
    a = stratified_sample(_pool(), counts, seed=4)
    assert a == stratified_sample(_pool(), counts, seed=4)
    for s, k in counts.items():
        assert sum(1 for _, t in a if t == s) == k
    assert len(set(a)) == len(a)


def test_stratum_too_small():
    with pytest.raises(CapacityError):
        stratified_sample(_pool(), {"s0": 11}, seed=0)


def test_custom_key():
    out = stratified_sample(range(20), {0: 2, 1: 2}, seed=1, key=lambda v: v % 2)
    assert sorted(v % 2 for v in out) == [0, 0, 1, 1]


# -- bootstrap ----------------------------------------------------------------------

def test_bootstrap_zero_variance():
    assert bootstrap_ci(np.ones(50)) == (1.0, 1.0, 1.0)
    assert bootstrap_ci(np.zeros(50)) == (0.0, 0.0, 0.0)


def test_bootstrap_half_width_at_3000():
    x = np.zeros(3000)
    x[:2850] = 1
    mean, lo, hi = bootstrap_ci(x, seed=0)
    assert mean == pytest.approx(0.95)
    assert 0.005 <= (hi - lo) / 2 <= 0.012


def test_bootstrap_is_seeded():
    x = np.random.default_rng(0).integers(0, 2, 200)
    assert bootstrap_ci(x, 500, seed=3) == bootstrap_ci(x, 500, seed=3)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=80), st.integers(0, 1000))
def test_bootstrap_bounds_bracket_mean(x, seed):
    mean, lo, hi = bootstrap_ci(x, 200, seed=seed)
    assert lo <= mean <= hi


def test_bootstrap_width_shrinks_with_n():
    rng = np.random.default_rng(1)
    small = rng.random(250) < 0.7
    big = np.tile(small, 4)
    _, lo1, hi1 = bootstrap_ci(small, 2000, seed=0)
    _, lo4, hi4 = bootstrap_ci(big, 2000, seed=0)
    assert hi4 - lo4 < hi1 - lo1


@pytest.mark.parametrize("kw", [dict(resamples=0), dict(level=1.0), dict(level=0.0)])
def test_bootstrap_argument_checks(kw):
    with pytest.raises(InvalidInputError):
        bootstrap_ci([1, 0], **kw)
    with pytest.raises(InvalidInputError):
        bootstrap_ci([])


# -- kappas --------------------------------------------------------------------------

def test_cohen_examples():
    assert cohen_kappa([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
    assert cohen_kappa([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.0, abs=1e-12)
    assert cohen_kappa([1, 1, 0, 0], [0, 0, 1, 1]) == pytest.approx(-1.0, abs=1e-12)


def test_cohen_hand_example():
    # p_o = 5/6, p_e = (4/6)(3/6) + (2/6)(3/6) = 1/2
    assert cohen_kappa([1, 1, 1, 1, 0, 0], [1, 1, 1, 0, 0, 0]) == pytest.approx(2 / 3, abs=1e-12)


def test_cohen_degenerate_and_errors():
    assert cohen_kappa([1, 1, 1], [1, 1, 1]) == 1.0
    with pytest.raises(DimensionError):
        cohen_kappa([1, 0], [1])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_cohen_symmetric_and_bounded(pairs):
    a, b = zip(*pairs)
    k = cohen_kappa(a, b)
    assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12
    assert k == pytest.approx(cohen_kappa(b, a), abs=1e-12)


def test_fleiss_golden():
    assert fleiss_kappa([[3, 0], [2, 1], [2, 1], [0, 3]], 3) == pytest.approx(FLEISS_GOLDEN, abs=1e-9)


def test_fleiss_unanimous_and_degenerate():
    assert fleiss_kappa([[3, 0], [0, 3], [3, 0]], 3) == 1.0
    assert fleiss_kappa([[4, 0], [4, 0]], 4) == 1.0


def test_fleiss_row_sum_checked():
    with pytest.raises(InvalidInputError):
        fleiss_kappa([[3, 0], [1, 1]], 3)


def test_fleiss_two_raters_relates_to_cohen_scale():
    # with two raters Fleiss uses pooled marginals (Scott's pi); equal marginals make it match Cohen
    a = np.array([1, 1, 0, 0, 1, 0])
    b = np.array([1, 0, 1, 0, 1, 0])
    t = JudgmentTable(list("abcdef"), ["a", "b"], np.stack([a, b], 1))
    assert fleiss_kappa(category_counts(t), 2) == pytest.approx(cohen_kappa(a, b), abs=1e-12)


# -- tables and reports --------------------------------------------------------------------

def test_table_validation():
    with pytest.raises(InvalidInputError):
        JudgmentTable(["a"], ["r"], [[2]])
    with pytest.raises(DimensionError):
        JudgmentTable(["a", "b"], ["r"], [[1]])


def test_report_when_raters_agree_with_reference():
    v = np.array([[1, 1, 1], [0, 0, 0], [1, 1, 1], [0, 0, 0]])
    rep = agreement_report(JudgmentTable(list("abcd"), ["h1", "h2", "llm"], v), "llm", resamples=100)
    for r in ("h1", "h2"):
        assert rep["per_rater"][r]["accuracy"] == 1.0
        assert rep["per_rater"][r]["kappa_vs_reference"] == 1.0
    assert rep["fleiss_kappa"] == 1.0


def test_majority_follows_two_of_three():
    v = np.array([[1, 1, 0], [0, 1, 0], [1, 0, 1], [0, 0, 1]])
    assert majority_vote(v).tolist() == [1, 0, 1, 0]
    rep = agreement_report(JudgmentTable(list("abcd"), ["x", "y", "z"], v), resamples=50)
    assert rep["majority"] == [1, 0, 1, 0]
    assert rep["reference"] == "majority"


def test_report_deterministic():
    v = np.random.default_rng(5).integers(0, 2, (60, 4))
    t = JudgmentTable([str(i) for i in range(60)], list("abcd"), v)
    assert agreement_report(t, resamples=300, seed=2) == agreement_report(t, resamples=300, seed=2)


def test_report_needs_two_raters():
    with pytest.raises(InvalidInputError):
        agreement_report(JudgmentTable(["a"], ["r"], [[1]]))


def test_judgment_file_round_trip(tmp_path):
    t = JudgmentTable(["a", "b"], ["r1", "r2"], [[1, 0], [0, 0]], strata=["x", "y"])
    path = tmp_path / "j.jsonl"
    write_judgments(t, path)
    back = read_judgments(path)
    assert back.ids == t.ids and back.raters == t.raters and back.strata == t.strata
    assert np.array_equal(back.values, t.values)


@pytest.mark.parametrize("lines", [[], ["{bad"], ['{"id": 1}'], ['{"id": 1, "judgments": {"a": 2}}'],
                                   ['{"id": 1, "judgments": {"a": 1}}', '{"id": 2, "judgments": {"b": 1}}']])
def test_judgment_file_errors(tmp_path, lines):
    path = tmp_path / "j.jsonl"
    path.write_text("".join(l + "\n" for l in lines))
    with pytest.raises(ParseError):
        read_judgments(path)
