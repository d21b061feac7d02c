import itertools
from math import comb

import pytest
from hypothesis import given, strategies as st

from somnus import combinatorics as cb
from somnus.combinatorics import Mode

# Listing of the two-dataset single-model space, in table order.
TWO_DATASET_SINGLE = [
    (("A",), ()), (("A",), ("A",)), (("A",), ("B",)), (("A",), ("A", "B")),
    (("B",), ()), (("B",), ("A",)), (("B",), ("B",)), (("B",), ("A", "B")),
    (("A", "B"), ()), (("A", "B"), ("A",)), (("A", "B"), ("B",)), (("A", "B"), ("A", "B")),
]


def brute_force(n, mode):
    """Independent oracle: filter the full product of subsets by the mode's rule."""
    ids = [chr(ord("A") + i) for i in range(n)]
    subsets = [frozenset(c) for r in range(n + 1) for c in itertools.combinations(ids, r)]
    return {(tr, val) for tr in subsets for val in subsets
            if tr and (mode is Mode.SINGLE_MODEL or val <= tr)}


@pytest.mark.parametrize("n,expected", [(1, 2), (2, 12), (3, 56)])
def test_single_counts(n, expected):
    assert cb.single_comb_count(n) == expected


@pytest.mark.parametrize("n,expected", [(1, 2), (2, 8), (3, 26)])
def test_ensemble_counts(n, expected):
    assert cb.ensemble_comb_count(n) == expected


@pytest.mark.parametrize("n,expected", [(1, 2), (3, 6), (10, 20)])
def test_training_counts(n, expected):
    assert cb.ensemble_training_count(n) == expected


@pytest.mark.parametrize("n", range(1, 9))
@pytest.mark.parametrize("mode", list(Mode))
def test_enumeration_matches_closed_form_and_brute_force(n, mode):
    space = cb.enumerate_space(n, mode)
    rows = [(frozenset(tr), frozenset(val)) for tr, val in space.combinations]
    assert len(rows) == len(set(rows)) == cb.closed_form(n, mode)
    assert set(rows) == brute_force(n, mode)


def test_two_dataset_listing_in_table_order():
    assert list(cb.enumerate_space(2, "single").combinations) == TWO_DATASET_SINGLE


def test_three_dataset_single_listing_landmarks():
    rows = cb.enumerate_space(3, Mode.SINGLE_MODEL).combinations
    assert rows[0] == (("A",), ())
    assert rows[16] == (("C",), ())
    assert rows[32] == (("A", "C"), ())
    assert rows[47] == (("B", "C"), ("A", "B", "C"))
    assert rows[55] == (("A", "B", "C"), ("A", "B", "C"))


def test_three_dataset_ensemble_rules():
    rows = cb.enumerate_space(3, Mode.ENSEMBLE).combinations
    assert len(rows) == 26
    assert (("A", "B"), ("A", "B")) in rows
    assert (("A",), ("B",)) not in rows
    assert all(set(val) <= set(tr) and tr for tr, val in rows)


def test_single_dataset_listing():
    for mode in Mode:
        assert list(cb.enumerate_space(1, mode).combinations) == [(("A",), ()), (("A",), ("A",))]


def test_ensemble_closed_form_is_three_to_the_n_minus_one():
    for n in range(1, 30):
        assert cb.ensemble_comb_count(n) == 3 ** n - 1


def test_ensemble_space_smaller_for_two_or_more():
    for n in range(2, 30):
        assert cb.ensemble_comb_count(n) < cb.single_comb_count(n)


def test_binomial_row_sums():
    for n in range(21):
        assert sum(comb(n, j) for j in range(n + 1)) == 2 ** n


@given(st.integers(1, 200))
def test_counts_are_exact_integers(n):
    assert isinstance(cb.single_comb_count(n), int)
    assert cb.single_comb_count(n) == (2 ** n - 1) * 2 ** n
    assert cb.ensemble_training_count(n) == 2 * n


def test_guards():
    with pytest.raises(cb.TooLarge):
        cb.enumerate_space(13, Mode.SINGLE_MODEL)
    for bad in (0, -1):
        with pytest.raises(ValueError):
            cb.single_comb_count(bad)


def test_format_space():
    text = cb.format_space(cb.enumerate_space(2, Mode.SINGLE_MODEL))
    lines = text.splitlines()
    assert lines[0] == "n\tTR\tVAL"
    assert lines[1] == "1\tA_TR\t-"
    assert lines[12] == "12\tA_TR, B_TR\tA_VAL, B_VAL"
