import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captsim.dataspace import (
    EmptyClientError,
    InvalidSpecError,
    LongTailSpec,
    Partition,
    dirichlet_partition,
    head_mid_tail,
    longtail_counts,
    priors,
)
from captsim.diagnostics import delta_pi_sq

# mpmath at 40 digits: round(5000 * 100 ** (-c / 9)) for c = 0..9
ORACLE_COUNTS_10_100_5000 = [5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]


def test_longtail_endpoints_and_second_class():
    counts = longtail_counts(LongTailSpec(10, 5000, 100.0))
    assert counts[0] == 5000
    assert counts[9] == 50
    assert abs(counts[1] - 2997) <= 1
    assert counts.tolist() == ORACLE_COUNTS_10_100_5000


def test_longtail_is_non_increasing():
    counts = longtail_counts(LongTailSpec(20, 500, 100.0))
    assert np.all(np.diff(counts) <= 0)


@pytest.mark.parametrize("bad", [LongTailSpec(10, 5000, 0.5), LongTailSpec(0, 10, 1.0), LongTailSpec(1, 10, 2.0)])
def test_longtail_rejects_invalid(bad):
    with pytest.raises(InvalidSpecError):
        longtail_counts(bad)


@settings(max_examples=60, deadline=None)
@given(
    c=st.integers(2, 40),
    rho=st.floats(1.0, 200.0),
    extra=st.integers(0, 5000),
)
def test_longtail_endpoint_slack(c, rho, extra):
    n_max = math.ceil(rho) + extra
    counts = longtail_counts(LongTailSpec(c, n_max, rho))
    assert counts[0] == n_max
    assert abs(counts[-1] * rho - n_max) <= rho / 2 + 1e-9
    assert np.all(np.diff(counts) <= 0)


def test_partition_single_client_holds_everything():
    counts = longtail_counts(LongTailSpec(10, 500, 10.0))
    part = dirichlet_partition(counts, 1, 0.5, seed=3)
    np.testing.assert_array_equal(part.matrix[0], counts)


@settings(max_examples=40, deadline=None)
@given(
    k=st.integers(1, 25),
    alpha=st.floats(0.01, 10.0),
    seed=st.integers(0, 2**31),
)
def test_partition_conservation_and_determinism(k, alpha, seed):
    counts = longtail_counts(LongTailSpec(8, 300, 30.0))
    a = dirichlet_partition(counts, k, alpha, seed)
    b = dirichlet_partition(counts, k, alpha, seed)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    np.testing.assert_array_equal(a.matrix.sum(axis=0), counts)
    np.testing.assert_array_equal(a.client_sizes, a.matrix.sum(axis=1))
    assert a.matrix.dtype.kind == "i" and np.all(a.matrix >= 0)


def test_partition_min_client_size():
    counts = longtail_counts(LongTailSpec(20, 500, 100.0))
    part = dirichlet_partition(counts, 20, 0.05, seed=0, min_client_size=1)
    assert part.client_sizes.min() >= 1


@pytest.mark.parametrize("alpha", [float("nan"), float("inf"), 0.0, -1.0])
def test_partition_rejects_bad_alpha(alpha):
    with pytest.raises(InvalidSpecError):
        dirichlet_partition([10, 5], 3, alpha, seed=0)


def test_lower_concentration_means_more_skew():
    counts = longtail_counts(LongTailSpec(20, 500, 100.0))
    skewed = [delta_pi_sq(dirichlet_partition(counts, 20, 0.05, s, min_client_size=1)) for s in range(50)]
    mild = [delta_pi_sq(dirichlet_partition(counts, 20, 0.5, s, min_client_size=1)) for s in range(50)]
    assert np.mean(skewed) > np.mean(mild)


def test_priors_examples():
    pr = priors(Partition(np.array([[2, 1, 1], [48, 49, 49]])))
    np.testing.assert_allclose(pr.per_client[0], [0.5, 0.25, 0.25])
    np.testing.assert_allclose(pr.global_, [50 / 150, 50 / 150, 50 / 150])
    assert priors(Partition(np.array([[50, 50]]))).global_.tolist() == [0.5, 0.5]


def test_prior_of_head_class_matches_rational_oracle():
    counts = longtail_counts(LongTailSpec(10, 5000, 100.0))
    pr = priors(Partition(counts[None, :]))
    expected = Fraction(5000, sum(ORACLE_COUNTS_10_100_5000))
    assert pr.global_[0] == pytest.approx(float(expected), abs=1e-15)
    assert pr.global_[0] == pytest.approx(0.402966, abs=1e-6)


def test_priors_normalized():
    counts = longtail_counts(LongTailSpec(20, 500, 100.0))
    pr = priors(dirichlet_partition(counts, 10, 0.1, 4, min_client_size=1))
    assert abs(pr.global_.sum() - 1) <= 1e-12
    assert np.all(np.abs(pr.per_client.sum(axis=1) - 1) <= 1e-12)


def test_priors_empty_client():
    with pytest.raises(EmptyClientError):
        priors(Partition(np.array([[1, 2], [0, 0]])))


def test_head_mid_tail_worked_example():
    # cumulative masses 0.5, 0.8, 0.95, 1.0
    split = head_mid_tail([50, 30, 15, 5])
    assert split.head == {0, 1}
    assert split.mid == {2}
    assert split.tail == {3}


def test_head_mid_tail_single_class():
    split = head_mid_tail([100])
    assert split.head == {0} and not split.mid and not split.tail


def test_head_mid_tail_unsorted_input_and_ties():
    split = head_mid_tail([5, 15, 30, 50])
    assert split.head == {3, 2} and split.mid == {1} and split.tail == {0}
    # equal counts: lower id enters the head first
    split = head_mid_tail([1, 1, 1, 1])
    assert split.head == {0, 1, 2}


def test_head_mid_tail_uniform_can_have_empty_tail():
    split = head_mid_tail([10] * 10)
    assert len(split.tail) == 0 or max(split.tail) == 9


def test_head_mid_tail_deterministic_and_total():
    counts = longtail_counts(LongTailSpec(10, 5000, 100.0))
    a, b = head_mid_tail(counts), head_mid_tail(counts)
    assert a == b
    assert a.head | a.mid | a.tail == set(range(10))
    assert not (a.head & a.mid or a.head & a.tail or a.mid & a.tail)


def test_head_mid_tail_all_zero():
    with pytest.raises(InvalidSpecError):
        head_mid_tail([0, 0, 0])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=30).filter(lambda xs: sum(xs) > 0))
def test_head_mid_tail_prefix_rule(counts):
    split = head_mid_tail(counts)
    arr = np.asarray(counts)
    total = arr.sum()
    assert split.head | split.mid | split.tail == set(range(len(counts)))
    head_mass = arr[sorted(split.head)].sum()
    assert head_mass >= 0.75 * total - 1e-9
    # minimal: dropping the smallest head class falls below 75%
    smallest = min(split.head, key=lambda c: (arr[c], -c))
    assert head_mass - arr[smallest] < 0.75 * total or len(split.head) == 1 or arr[smallest] == 0
    if split.tail:
        assert arr[sorted(split.tail)].max() <= arr[sorted(split.head | split.mid)].min()
