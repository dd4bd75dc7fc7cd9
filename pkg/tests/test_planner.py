import pytest
from hypothesis import given
from hypothesis import strategies as st

from acelt.errors import ConfigurationError, ContractError
from acelt.planner import (
    ClassProfile,
    assign,
    expert_set_for_class,
    membership_matrix,
    sub_batch,
    sub_batch_rows,
)


def test_six_categories_three_experts():
    a = assign(6, 3)
    assert [x.target for x in a] == [(1, 2, 3, 4, 5, 6), (3, 4, 5, 6), (5, 6)]
    assert [x.interfering for x in a] == [(), (1, 2), (1, 2, 3, 4)]


def test_single_expert_is_plain_classifier():
    (a,) = assign(4, 1)
    assert a.target == (1, 2, 3, 4) and a.interfering == ()


def test_non_divisible_uses_floor_starts():
    a = assign(7, 3)
    assert [x.start for x in a] == [1, 3, 5]
    assert a[1].target == (3, 4, 5, 6, 7)
    assert a[2].target == (5, 6, 7)


@pytest.mark.parametrize("c,k", [(3, 4), (5, 0)])
def test_bad_expert_count(c, k):
    with pytest.raises(ConfigurationError):
        assign(c, k)


def test_sub_batch_filters_in_order():
    a = assign(6, 3)
    batch = [("a", 1), ("b", 5), ("c", 6), ("d", 2)]
    assert sub_batch(batch, a[2]) == [("b", 5), ("c", 6)]
    assert sub_batch(batch, a[0]) == batch
    assert sub_batch([], a[1]) == []
    with pytest.raises(ContractError):
        sub_batch([("x", 7)], a[0])


def test_sub_batch_rows_with_mixed_labels():
    a = assign(6, 3)[1]
    assert sub_batch_rows([1, 5, 6, 3], a).tolist() == [1, 2, 3]
    assert sub_batch_rows([1, 5, 6, 3], a, labels_b=[4, 1, 6, 3]).tolist() == [2, 3]
    with pytest.raises(ContractError):
        sub_batch_rows([0, 2], a)


def test_expert_sets():
    a = assign(6, 3)
    assert expert_set_for_class(1, a) == (1,)
    assert expert_set_for_class(6, a) == (1, 2, 3)
    assert expert_set_for_class(4, a) == (1, 2)
    with pytest.raises(ContractError):
        expert_set_for_class(7, a)


def test_class_profile_validation():
    assert ClassProfile((5, 5, 1)).total == 11
    with pytest.raises(ConfigurationError):
        ClassProfile((1, 2))
    with pytest.raises(ConfigurationError):
        ClassProfile((3, 0))
    with pytest.raises(ConfigurationError):
        ClassProfile(())


@given(st.integers(1, 64).flatmap(lambda c: st.tuples(st.just(c), st.integers(1, c))))
def test_assignment_properties(ck):
    c, k = ck
    a = assign(c, k)
    everything = set(range(1, c + 1))
    assert len(a) == k
    assert a[0].target == tuple(range(1, c + 1)) and a[0].interfering == ()
    assert set().union(*(set(x.target) for x in a)) == everything
    for x in a:
        assert set(x.target) | set(x.interfering) == everything
        assert not set(x.target) & set(x.interfering)
        assert x.interfering == tuple(range(1, x.start))
    for prev, nxt in zip(a, a[1:]):
        assert set(prev.target) >= set(nxt.target)
    sizes = [len(expert_set_for_class(cat, a)) for cat in range(1, c + 1)]
    assert all(s >= 1 for s in sizes)
    assert sizes == sorted(sizes)
    assert assign(c, k) == a
    assert membership_matrix(a).sum() == sum(len(x.target) for x in a)
