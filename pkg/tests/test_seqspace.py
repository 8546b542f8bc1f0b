import pytest
from hypothesis import given, strategies as st

from powerflow.seqspace import (
    InvalidTrajectory, SequenceSpace, Termination, UniverseTooLarge, Vocab, enumerate_trajectories,
    make_trajectory, trajectory_count,
)


def tokens(trajs):
    return [y.tokens for y in trajs]


def test_ab_universe():
    ys = enumerate_trajectories(Vocab(2), 2)
    assert sorted(tokens(ys)) == sorted([(1,), (0, 1), (0, 0)])
    by_tokens = {y.tokens: y for y in ys}
    assert by_tokens[(0, 0)].terminated_by is Termination.MAX_LEN
    assert by_tokens[(0, 1)].terminated_by is Termination.EOS


def test_eos_only_vocab():
    assert tokens(enumerate_trajectories(Vocab(1), 3)) == [(0,)]
    assert trajectory_count(Vocab(1), 7) == 1


def test_two_tokens_length_two():
    assert len(enumerate_trajectories(Vocab(3), 2)) == 7


@pytest.mark.parametrize("k,L,count", [(1, 2, 3), (0, 5, 1), (2, 3, 15)])
def test_count_examples(k, L, count):
    assert trajectory_count(Vocab(k + 1), L) == count


def test_lengths_include_eos():
    space = SequenceSpace(Vocab(2), 2)
    assert space.trajectory((1,)).length == 1
    assert space.trajectory((0, 1)).length == 2
    assert space.trajectory((0, 0)).length == 2


def test_cap():
    with pytest.raises(UniverseTooLarge):
        enumerate_trajectories(Vocab(3), 20)
    with pytest.raises(UniverseTooLarge):
        enumerate_trajectories(Vocab(3), 4, cap=10)


def test_max_len_must_be_positive():
    with pytest.raises(ValueError):
        trajectory_count(Vocab(2), 0)


@pytest.mark.parametrize("toks", [(0,), (1, 0), (0, 0, 0), (), (0, 5)])
def test_invalid_trajectories(toks):
    with pytest.raises(InvalidTrajectory):
        make_trajectory(toks, Vocab(2), 2)


def test_states_are_nonterminal_prefixes():
    space = SequenceSpace(Vocab(3), 2)
    assert space.states == [(), (0,), (1,)]


@given(st.integers(0, 3), st.integers(1, 6))
def test_count_matches_enumeration(k, L):
    ys = enumerate_trajectories(Vocab(k + 1), L)
    assert len(ys) == trajectory_count(Vocab(k + 1), L)
    assert len(set(tokens(ys))) == len(ys)


@given(st.integers(0, 3), st.integers(1, 5))
def test_prefix_free(k, L):
    seqs = set(tokens(enumerate_trajectories(Vocab(k + 1), L)))
    for s in seqs:
        for cut in range(1, len(s)):
            assert s[:cut] not in seqs


@given(st.integers(0, 3), st.integers(1, 5))
def test_deterministic_lexicographic_order(k, L):
    a = tokens(enumerate_trajectories(Vocab(k + 1), L))
    assert a == tokens(enumerate_trajectories(Vocab(k + 1), L))
    assert a == sorted(a)
