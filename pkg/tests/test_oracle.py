import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from conftest import random_setup
from powerflow import oracle
from powerflow.bases import constant_rate_base
from powerflow.oracle import (
    BracketError, FiniteDist, dist_stats, exact_la_target, exact_partition, exact_target_dist,
    expected_tb_gradient, finite_diff, tb_gradient, kl, la_log_partition, policy_dist, relative_error, tv,
)
from powerflow.policy import TabularPolicy, tabular_from_dist
from powerflow.seqspace import SequenceSpace, Vocab
from powerflow.target import TargetSpec, log_density_all

EOS_ONLY, A_EOS, A_A = (1,), (0, 1), (0, 0)


def probs(dist, order):
    return [dist.prob_of(t) for t in order]


def test_partition_examples(uniform_ab):
    assert exact_partition(uniform_ab, 0, TargetSpec(1.0)) == pytest.approx(1.0, abs=1e-14)
    assert exact_partition(uniform_ab, 0, TargetSpec(2.0)) == pytest.approx(0.375, abs=1e-14)


def test_partition_two_tokens():
    space = SequenceSpace(Vocab(3), 2)
    base = TabularPolicy.uniform(space)
    # [EOS]: 1/3; [x, EOS]: 1/9 twice; [x, x']: 1/9 four times
    expected = (1 / 3) ** 2 + 6 * (1 / 9) ** 2
    assert exact_partition(base, 0, TargetSpec(2.0)) == pytest.approx(expected, abs=1e-14)


def test_target_examples(uniform_ab):
    d = exact_target_dist(uniform_ab, 0, TargetSpec(2.0))
    np.testing.assert_allclose(probs(d, [EOS_ONLY, A_EOS, A_A]), [2 / 3, 1 / 6, 1 / 6], atol=1e-14)
    same = exact_target_dist(uniform_ab, 0, TargetSpec(1.0))
    np.testing.assert_allclose(same.probs, policy_dist(uniform_ab, 0).probs, atol=1e-14)


def test_la_target_example(uniform_ab):
    d, zp = exact_la_target(uniform_ab, 0, TargetSpec(2.0))
    assert zp == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(probs(d, [EOS_ONLY, A_EOS, A_A]), [0.5, 0.25, 0.25], atol=1e-12)
    d1, z1 = exact_la_target(uniform_ab, 0, TargetSpec(1.0))
    assert z1 == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(d1.probs, policy_dist(uniform_ab, 0).probs, atol=1e-12)


def test_la_residual():
    _, space, base = random_setup(11, k=2, L=4)
    spec = TargetSpec(3.0)
    lp = log_density_all(base, 0, spec)
    s = la_log_partition(lp, space.lengths)
    assert abs(math.exp(logsumexp(lp - space.lengths * s)) - 1) < 1e-12


def test_la_bracket_widening():
    # many trajectories share the top rate, so the initial upper end sits left of the root
    lp = np.full(50, -1.0)
    s = la_log_partition(lp, np.ones(50))
    assert s == pytest.approx(-1.0 + math.log(50), abs=1e-12)


def test_la_bracket_failure():
    with pytest.raises(BracketError):
        la_log_partition(np.array([np.nan, 0.0]), np.array([1.0, 2.0]))


@pytest.mark.parametrize("m", [2, 3])
@pytest.mark.parametrize("alpha", [0.5, 2.0, 4.0])
def test_constant_rate_fixed_point(m, alpha):
    space = SequenceSpace(Vocab(3), 4)
    c = -math.log(m)
    base = constant_rate_base(space, c)
    d, zp = exact_la_target(base, 0, TargetSpec(alpha))
    assert tv(d, policy_dist(base, 0)) < 1e-10
    assert math.log(zp) == pytest.approx((alpha - 1) * c, abs=1e-10)


def test_policy_dist_examples(uniform_ab, ab_space):
    np.testing.assert_allclose(probs(policy_dist(uniform_ab, 0), [EOS_ONLY, A_EOS, A_A]), [0.5, 0.25, 0.25])
    det = TabularPolicy.from_function(ab_space, 1, lambda q, s: np.array([-1e4, 0.0]))
    assert policy_dist(det, 0).prob_of(EOS_ONLY) == 1.0


def test_finite_dist_validation(ab_space):
    with pytest.raises(ValueError):
        FiniteDist(ab_space.trajectories, [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        FiniteDist(ab_space.trajectories, [1.5, -0.5, 0.0])
    d = FiniteDist(ab_space.trajectories, [0.25, 0.25, 0.5])
    lines = d.to_csv().splitlines()
    assert lines[0] == "tokens,length,probability"
    assert lines[1] == "0 0,2,0.25"


def test_divergence_examples():
    p = np.array([0.5, 0.5])
    assert kl(p, p) == 0 and tv(p, p) == 0
    assert tv([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert kl(p, [0.75, 0.25]) == pytest.approx(0.5 * math.log(2 / 3) + 0.5 * math.log(2), abs=1e-15)
    assert kl(p, [0.75, 0.25]) == pytest.approx(0.143841, abs=1e-6)
    with pytest.raises(ValueError):
        kl([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(ValueError):
        tv([0.5, 0.5], [0.2, 0.3, 0.5])


def test_support_mismatch():
    a = policy_dist(TabularPolicy.uniform(SequenceSpace(Vocab(2), 2)), 0)
    b = policy_dist(TabularPolicy.uniform(SequenceSpace(Vocab(2), 3)), 0)
    with pytest.raises(ValueError):
        tv(a, b)


def test_dist_stats_examples(uniform_ab, ab_space):
    det = TabularPolicy.from_function(ab_space, 1, lambda q, s: np.array([-1e4, 0.0]))
    assert dist_stats(policy_dist(det, 0)) == (1.0, 0.0)
    assert dist_stats(policy_dist(uniform_ab, 0))[0] == pytest.approx(1.5)
    sharp = exact_target_dist(uniform_ab, 0, TargetSpec(2.0))
    assert dist_stats(sharp)[0] == pytest.approx(4 / 3)
    la, _ = exact_la_target(uniform_ab, 0, TargetSpec(2.0))
    assert dist_stats(la)[0] == pytest.approx(1.5)


def two_grad_kl(policy, base, spec, q=0):
    """``2 sum_y pi(y) log(pi / p_alpha)(y) grad log pi(y)``, computed by loops."""
    target = exact_target_dist(base, q, spec)
    out = np.zeros_like(policy.logits)
    for y, t in zip(policy.space.trajectories, target.probs):
        lp = policy.log_prob(q, y)
        out += 2 * math.exp(lp) * (lp - math.log(t)) * policy.grad_log_prob(q, y)
    return out


def test_tb_gradient_zero_at_target():
    _, space, base = random_setup(2, k=2, L=3)
    spec = TargetSpec(2.0)
    target = exact_target_dist(base, 0, spec)
    pi = tabular_from_dist(space, [target.probs])
    assert np.abs(expected_tb_gradient(pi, base, 0, spec)).max() < 1e-10


def test_tb_gradient_example():
    rng, space, pi = random_setup(5, k=1, L=3)
    base = TabularPolicy.random(space, 1, rng)
    spec = TargetSpec(2.0)
    assert np.abs(expected_tb_gradient(pi, base, 0, spec) - two_grad_kl(pi, base, spec)).max() < 1e-8


def test_tb_gradient_shift_invariance():
    rng, space, pi = random_setup(7, k=2, L=3)
    base = TabularPolicy.random(space, 1, rng)
    spec = TargetSpec(2.0)
    lp = log_density_all(base, 0, spec)
    g = expected_tb_gradient(pi, base, 0, spec)
    assert np.abs(g - tb_gradient(pi, 0, lp)).max() == 0
    assert np.abs(g - tb_gradient(pi, 0, lp + 17.5)).max() < 1e-12


def test_finite_diff_examples(uniform_ab, ab_space):
    y = ab_space.trajectory((0, 1))
    assert relative_error(uniform_ab.grad_log_prob(0, y), finite_diff(lambda p: p.log_prob(0, y), uniform_ab)) < 1e-6
    assert np.abs(finite_diff(lambda p: 3.0, uniform_ab)).max() < 1e-9
    with pytest.raises(ValueError):
        finite_diff(lambda p: 0.0, uniform_ab, h=0)


rand_pair = st.integers(2, 10).flatmap(
    lambda n: st.tuples(*(st.lists(st.floats(0.001, 1.0), min_size=n, max_size=n) for _ in range(2))))


@settings(max_examples=200)
@given(rand_pair)
def test_gibbs_and_pinsker(pair):
    p, r = (np.array(v) / sum(v) for v in pair)
    k = kl(p, r)
    assert k >= -1e-12
    assert abs(kl(p, p)) < 1e-12
    assert tv(p, r) ** 2 <= k / 2 + 1e-12


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, 4.0]))
def test_la_fixed_point(seed, alpha):
    rng = np.random.default_rng(seed)
    _, space, base = random_setup(seed, k=int(rng.integers(1, 3)), L=int(rng.integers(1, 6)))
    spec = TargetSpec(alpha)
    d, zp = exact_la_target(base, 0, spec)
    lp = log_density_all(base, 0, spec)
    resid = np.log(d.probs) - lp + space.lengths * math.log(zp)
    assert np.abs(resid).max() < 1e-9


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0, 4.0]))
def test_tb_gradient_is_twice_kl_gradient(seed, alpha):
    rng, space, pi = random_setup(seed, k=int(np.random.default_rng(seed).integers(1, 3)), L=3)
    base = TabularPolicy.random(space, 1, rng)
    spec = TargetSpec(alpha)
    assert np.abs(expected_tb_gradient(pi, base, 0, spec) - two_grad_kl(pi, base, spec)).max() < 1e-8


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_policy_dist_normalized(seed):
    _, _, p = random_setup(seed, scale=3.0)
    assert abs(policy_dist(p, 0).probs.sum() - 1) < 1e-10
