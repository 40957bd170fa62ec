import random

import pytest
from hypothesis import given, strategies as st

from cellsearch.grading import (
    DEFAULT_TOLERANCE,
    NoCandidates,
    Tolerance,
    canonical_label_key,
    coerce_value,
    compare_lists_unordered,
    compare_values,
    grade_answer,
    majority_vote,
    select_by_value,
)
from cellsearch.protocol import AnswerLabels, parse_answer_labels

APPENDIX_LABEL = "@correlation coefficient[0.48] @p value[0.0213] @relationship type[nonlinear]"


class TestCoerceValue:
    def test_number(self):
        assert coerce_value("0.0213") == pytest.approx(0.0213)

    def test_scientific(self):
        assert coerce_value("1.5e-3") == pytest.approx(0.0015)

    def test_list_of_texts(self):
        assert coerce_value('["C102", "C305", "C210"]') == ["C102", "C305", "C210"]

    def test_text(self):
        assert coerce_value("nonlinear") == "nonlinear"

    def test_single_quoted_dict(self):
        assert coerce_value("{'A': 0.82, 'B': 0.85}") == {"A": 0.82, "B": 0.85}

    def test_trims(self):
        assert coerce_value("  12.5  ") == 12.5

    def test_nan_and_inf_words_stay_text(self):
        assert coerce_value("nan") == "nan"
        assert coerce_value("inf") == "inf"


class TestCompareValues:
    def test_string_equality(self):
        assert compare_values("nonlinear", "nonlinear")

    def test_numeric_tolerance_paper_example(self):
        assert compare_values("0.86", "0.8562", Tolerance(abs_tol=0.0, rel_tol=0.01))

    def test_dict_key_mismatch(self):
        assert not compare_values('{"A":0.82,"B":0.85}', '{"A":0.82}')

    def test_list_elementwise(self):
        assert compare_values("[1.0, 2.0]", "[1.000000001, 2.0]")
        assert not compare_values("[1.0, 2.0]", "[1.0]")

    def test_nested_structures(self):
        expected = '{"scores": [0.5, 0.25], "winner": "A"}'
        got = "{'scores': [0.50000001, 0.25], 'winner': 'A'}"
        assert compare_values(expected, got)

    def test_numeric_vs_text_falls_through(self):
        assert not compare_values("0.5", "fast")

    @given(
        st.recursive(
            st.one_of(
                st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
                st.text(alphabet="abcxyz", max_size=8),
            ),
            lambda inner: st.one_of(
                st.lists(inner, max_size=4),
                st.dictionaries(st.text(alphabet="km", min_size=1, max_size=3), inner, max_size=4),
            ),
            max_leaves=12,
        )
    )
    def test_reflexive(self, value):
        assert compare_values(value, value)

    def test_tolerance_monotonicity(self):
        rng = random.Random(0)
        for _ in range(100):
            e = rng.uniform(-100, 100)
            g = e + rng.uniform(-5, 5)
            small = Tolerance(abs_tol=rng.uniform(0, 2), rel_tol=rng.uniform(0, 0.05))
            big = Tolerance(abs_tol=small.abs_tol * 2 + 0.1, rel_tol=small.rel_tol * 2 + 0.01)
            if compare_values(e, g, small):
                assert compare_values(e, g, big)

    def test_unordered_option(self):
        assert compare_lists_unordered([1.0, 2.0], [2.0, 1.0], DEFAULT_TOLERANCE)
        assert not compare_values("[1, 2]", "[2, 1]")


class TestGradeAnswer:
    def test_appendix_example_against_itself(self):
        labels = parse_answer_labels(APPENDIX_LABEL)
        assert grade_answer(labels, labels)

    def test_missing_expected_name(self):
        expected = parse_answer_labels("@a[1] @b[2]")
        got = parse_answer_labels("@a[1]")
        assert not grade_answer(expected, got)

    def test_permuted_values_fail(self):
        expected = parse_answer_labels("@a[1] @b[2]")
        got = parse_answer_labels("@a[2] @b[1]")
        assert not grade_answer(expected, got)

    def test_extra_labels_ignored(self):
        expected = parse_answer_labels("@a[1]")
        got = parse_answer_labels("@a[1] @bonus[9]")
        assert grade_answer(expected, got)

    def test_name_matching_case_and_whitespace_insensitive(self):
        expected = parse_answer_labels("@Mean  Value[3.5]")
        got = parse_answer_labels("@mean value[3.5]")
        assert grade_answer(expected, got)

    def test_self_grade_property(self):
        rng = random.Random(1)
        for _ in range(50):
            n = rng.randrange(1, 4)
            text = " ".join(f"@name {i}[{rng.uniform(-5, 5):.4f}]" for i in range(n))
            labels = parse_answer_labels(text)
            assert grade_answer(labels, labels, Tolerance(abs_tol=10 ** rng.uniform(-9, 0)))

    def test_empty_expected_rejected(self):
        with pytest.raises(ValueError):
            grade_answer(AnswerLabels(), parse_answer_labels("@a[1]"))


def _node(text, value, discovery):
    return (parse_answer_labels(text), value, discovery)


class TestMajorityVote:
    def test_mode_wins(self):
        winner = majority_vote([_node("@a[1]", 0.1, 0), _node("@a[1]", 0.1, 1), _node("@b[2]", 0.9, 2)])
        assert dict(winner.entries) == {"a": "1"}

    def test_tie_breaks_by_summed_value(self):
        winner = majority_vote([_node("@a[1]", 0.1, 0), _node("@b[2]", 0.9, 1)])
        assert dict(winner.entries) == {"b": "2"}

    def test_tie_equal_value_earlier_discovery_wins(self):
        winner = majority_vote([_node("@a[1]", 0.5, 0), _node("@b[2]", 0.5, 1)])
        assert dict(winner.entries) == {"a": "1"}

    def test_equivalent_values_group_together(self):
        winner = majority_vote(
            [_node("@a[0.50]", 0.0, 0), _node("@a[0.5]", 0.0, 1), _node("@b[2]", 1.0, 2)]
        )
        assert dict(winner.entries) == {"a": "0.50"}

    def test_output_is_one_of_inputs(self):
        rng = random.Random(2)
        for _ in range(50):
            nodes = [
                _node(f"@a[{rng.randrange(3)}]", rng.uniform(-1, 1), i)
                for i in range(rng.randrange(1, 6))
            ]
            winner = majority_vote(nodes)
            assert any(winner is labels for labels, _v, _d in nodes)

    def test_empty_rejected(self):
        with pytest.raises(NoCandidates):
            majority_vote([])


class TestSelectByValue:
    def test_single(self):
        node = _node("@a[1]", 0.3, 0)
        assert select_by_value([node]) is node[0]

    def test_max_value_wins(self):
        assert dict(select_by_value([_node("@a[1]", 0.2, 0), _node("@b[2]", 0.7, 1)]).entries) == {"b": "2"}

    def test_tie_earlier_discovery(self):
        assert dict(select_by_value([_node("@a[1]", 0.7, 0), _node("@b[2]", 0.7, 1)]).entries) == {"a": "1"}

    def test_empty_rejected(self):
        with pytest.raises(NoCandidates):
            select_by_value([])


def oracle_compare(expected, got, tol):
    """Independent recursive comparator used to cross-check the cascade."""
    if isinstance(expected, str) and isinstance(got, str) and expected.strip() == got.strip():
        return True
    e = coerce_value(expected) if isinstance(expected, str) else expected
    g = coerce_value(got) if isinstance(got, str) else got
    e_num = isinstance(e, float) and not isinstance(e, bool)
    g_num = isinstance(g, float) and not isinstance(g, bool)
    if isinstance(e, int):
        e, e_num = float(e), True
    if isinstance(g, int):
        g, g_num = float(g), True
    if e_num and g_num:
        return abs(e - g) <= max(tol.abs_tol, tol.rel_tol * abs(e))
    if isinstance(e, list) and isinstance(g, list):
        return len(e) == len(g) and all(oracle_compare(a, b, tol) for a, b in zip(e, g))
    if isinstance(e, dict) and isinstance(g, dict):
        return set(e) == set(g) and all(oracle_compare(v, g[k], tol) for k, v in e.items())
    return e == g


def random_value(rng, depth=0):
    kind = rng.random()
    if depth >= 2 or kind < 0.4:
        return round(rng.uniform(-50, 50), rng.randrange(0, 5))
    if kind < 0.6:
        return rng.choice(["alpha", "beta", "gamma", "0.5x"])
    if kind < 0.85:
        return [random_value(rng, depth + 1) for _ in range(rng.randrange(0, 4))]
    return {f"k{i}": random_value(rng, depth + 1) for i in range(rng.randrange(0, 4))}


def perturb(rng, value):
    if isinstance(value, float):
        return value + rng.choice([0.0, 1e-9, 0.01, 5.0])
    if isinstance(value, list) and value and rng.random() < 0.3:
        clone = list(value)
        clone[rng.randrange(len(clone))] = perturb(rng, clone[rng.randrange(len(clone))])
        return clone
    if isinstance(value, dict) and value and rng.random() < 0.3:
        clone = dict(value)
        key = rng.choice(list(clone))
        clone[key] = perturb(rng, clone[key])
        return clone
    return value


class TestCascadeAgainstOracle:
    def test_randomized_agreement(self):
        rng = random.Random(11)
        tol = Tolerance(abs_tol=1e-6, rel_tol=1e-2)
        for _ in range(300):
            expected = random_value(rng)
            got = perturb(rng, expected) if rng.random() < 0.7 else random_value(rng)
            assert compare_values(expected, got, tol) == oracle_compare(expected, got, tol)


class TestCanonicalLabelKey:
    def test_numeric_forms_collapse(self):
        a = parse_answer_labels("@Mean[0.50]")
        b = parse_answer_labels("@mean[0.5]")
        assert canonical_label_key(a) == canonical_label_key(b)

    def test_different_values_distinct(self):
        a = parse_answer_labels("@mean[0.5]")
        b = parse_answer_labels("@mean[0.6]")
        assert canonical_label_key(a) != canonical_label_key(b)
