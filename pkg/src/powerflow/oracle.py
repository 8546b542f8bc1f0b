"""Brute-force ground truth over an enumerated universe.

Everything here sums over ``space.trajectories`` in log space.  These
routines are the reference the stochastic trainer is measured against, so
they never sample.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .objectives import ClipSpec, LossKind, clip_ratio, grad_loss, loss_terms, make_sample
from .policy import AutoregressivePolicy, ParamGradient, TabularPolicy
from .seqspace import SequenceSpace, Trajectory, Vocab
from .target import TargetSpec, log_density_all

NORMALIZATION_TOL = 1e-10


class BracketError(RuntimeError):
    pass


@dataclass
class FiniteDist:
    support: list[Trajectory]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.support) != len(self.probs):
            raise ValueError("support and probs differ in length")
        if np.any(self.probs < 0):
            raise ValueError("negative probability")
        total = self.probs.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"probabilities sum to {total!r}, not 1")

    @property
    def lengths(self) -> np.ndarray:
        return np.array([y.length for y in self.support], dtype=float)

    def prob_of(self, tokens) -> float:
        tokens = tuple(tokens)
        for y, p in zip(self.support, self.probs):
            if y.tokens == tokens:
                return float(p)
        raise KeyError(tokens)

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tokens", "length", "probability"])
        for y, p in zip(self.support, self.probs):
            w.writerow([" ".join(map(str, y.tokens)), y.length, format(p, ".17g")])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _dist(space, logw: np.ndarray) -> FiniteDist:
    return FiniteDist(space.trajectories, np.exp(logw - logsumexp(logw)))


def log_partition(base: AutoregressivePolicy, q: int, spec: TargetSpec) -> float:
    return float(logsumexp(log_density_all(base, q, spec)))


def exact_partition(base: AutoregressivePolicy, q: int, spec: TargetSpec) -> float:
    return math.exp(log_partition(base, q, spec))


def exact_target_dist(base: AutoregressivePolicy, q: int, spec: TargetSpec) -> FiniteDist:
    return _dist(base.space, log_density_all(base, q, spec))


def la_log_partition(log_ptilde: np.ndarray, lengths: np.ndarray, tol: float = 1e-13) -> float:
    """Solve ``sum_y exp(log_ptilde[y] - lengths[y] * s) = 1`` for ``s = log Z'``.

    The left side is strictly decreasing in ``s``, so bisection on a sign
    bracket converges to the unique root.
    """
    log_ptilde = np.asarray(log_ptilde, dtype=float)
    lengths = np.asarray(lengths, dtype=float)

    def f(s):
        return logsumexp(log_ptilde - lengths * s)

    rate = log_ptilde / lengths
    lo, hi = rate.min() - math.log(2), rate.max() + math.log(2)
    # the initial upper end can still sit left of the root when many
    # trajectories share the top rate; widen until the sign flips
    for _ in range(200):
        if f(hi) <= 0:
            break
        hi += hi - lo
    for _ in range(200):
        if f(lo) >= 0:
            break
        lo -= hi - lo
    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo >= 0 >= f_hi) or not (np.isfinite(f_lo) and np.isfinite(f_hi)):
        raise BracketError(f"no sign change on [{lo}, {hi}]: f(lo)={f_lo}, f(hi)={f_hi}")
    for _ in range(400):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def exact_la_target(base: AutoregressivePolicy, q: int, spec: TargetSpec) -> tuple[FiniteDist, float]:
    """Length-normalized fixed point ``pi* ∝ p~ / Z'^|y|`` and its ``Z'``."""
    lp = log_density_all(base, q, spec)
    lengths = base.space.lengths
    s = la_log_partition(lp, lengths)
    return _dist(base.space, lp - lengths * s), math.exp(s)


def oracle_target(base: AutoregressivePolicy, q: int, spec: TargetSpec) -> FiniteDist:
    """The target selected by ``spec.length_aware``."""
    if spec.length_aware:
        return exact_la_target(base, q, spec)[0]
    return exact_target_dist(base, q, spec)


def policy_dist(policy: AutoregressivePolicy, q: int) -> FiniteDist:
    return FiniteDist(policy.space.trajectories, np.exp(policy.log_probs(q)))


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, FiniteDist) else np.asarray(p, dtype=float)


def _check_support(p, r):
    if isinstance(p, FiniteDist) and isinstance(r, FiniteDist):
        if len(p.support) != len(r.support) or any(a.tokens != b.tokens for a, b in zip(p.support, r.support)):
            raise ValueError("distributions have different supports")
    if len(_probs(p)) != len(_probs(r)):
        raise ValueError("distributions have different supports")


def kl(p, r) -> float:
    """``KL(p || r)`` with ``0 log 0 = 0``."""
    _check_support(p, r)
    pp, rr = _probs(p), _probs(r)
    mask = pp > 0
    if np.any(rr[mask] <= 0):
        raise ValueError("r has zero mass where p is positive")
    return float(np.sum(pp[mask] * (np.log(pp[mask]) - np.log(rr[mask]))))


def tv(p, r) -> float:
    _check_support(p, r)
    return float(0.5 * np.abs(_probs(p) - _probs(r)).sum())


def dist_stats(p: FiniteDist) -> tuple[float, float]:
    """``(mean length, Shannon entropy in nats)``."""
    probs = p.probs
    mask = probs > 0
    entropy = -float(np.sum(probs[mask] * np.log(probs[mask])))
    return float(probs @ p.lengths), entropy


def expected_tb_gradient(policy: AutoregressivePolicy, base: AutoregressivePolicy, q: int, spec: TargetSpec) -> ParamGradient:
    """Exact on-policy expectation of the trajectory-balance gradient.

    ``log Z`` is held at its equilibrium ``E_pi[log p~ - log pi]``, the
    minimizer of the expected squared residual.
    """
    return tb_gradient(policy, q, log_density_all(base, q, spec))


def tb_gradient(policy: AutoregressivePolicy, q: int, log_ptilde) -> ParamGradient:
    """:func:`expected_tb_gradient` for an explicit ``log p~`` over the universe."""
    log_pi = policy.log_probs(q)
    pi = np.exp(log_pi)
    log_z = float(pi @ (log_ptilde - log_pi))
    coef = pi * 2.0 * (log_z + log_pi - log_ptilde)
    grad = np.zeros_like(policy.logits)
    grad[q] = policy.weighted_score(q, coef)
    return grad


def finite_diff(fn, policy: AutoregressivePolicy, h: float = 1e-5, queries=None) -> ParamGradient:
    """Central differences of ``fn(policy)`` in every logit coordinate.

    ``queries`` restricts the sweep to a subset of query blocks; the other
    blocks are returned as zeros.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = policy.copy()
    grad = np.zeros_like(work.logits)
    qs = range(work.n_queries) if queries is None else queries
    for q in qs:
        for idx in np.ndindex(work.logits.shape[1:]):
            full = (q, *idx)
            x0 = work.logits[full]
            work.logits[full] = x0 + h
            f_plus = fn(work)
            work.logits[full] = x0 - h
            f_minus = fn(work)
            work.logits[full] = x0
            grad[full] = (f_plus - f_minus) / (2 * h)
    return grad



def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _random_instance(rng: np.random.Generator):
    space = SequenceSpace(Vocab(int(rng.integers(2, 4)), marker_id=0), int(rng.integers(1, 4)))
    policy = TabularPolicy.random(space, 2, rng, scale=1.5)
    base = TabularPolicy.random(space, 2, rng, scale=1.5)
    old = TabularPolicy(space, policy.logits + rng.normal(scale=0.2, size=policy.logits.shape))
    spec = TargetSpec(
        alpha=float(rng.choice([0.5, 2.0, 4.0])),
        psi_value=float(-rng.uniform(0, 1)),
        marker_required=bool(rng.integers(2)),
    )
    q = int(rng.integers(2))
    y = space.trajectories[int(rng.integers(len(space)))]
    return policy, base, old, spec, q, y


def check_loss_gradient(kind, n_instances: int = 50, seed: int = 0, h: float = 1e-5) -> list[float]:
    """Relative error between analytic and central-difference gradients.

    Each instance draws a random tabular policy, behaviour snapshot, base,
    target, query, trajectory and log Z; the error covers the logits and
    log Z together.  PowerFlow holds the clipped weight fixed and RL kinds
    hold the advantage fixed, which is what the analytic gradient assumes.
    """
    kind = LossKind(kind)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(list(LossKind).index(kind),)))
    clip = ClipSpec()
    errors = []
    for _ in range(n_instances):
        policy, base, old, spec, q, y = _random_instance(rng)
        log_z = float(rng.normal())
        beta = float(rng.uniform(0.2, 3.0))
        baseline = float(rng.normal())
        s = make_sample(policy, base, q, y, spec, old)
        analytic, dz = grad_loss(kind, s, policy, log_z, spec.alpha, clip, beta, baseline)
        _, coef, _ = loss_terms(kind, s, log_z, spec.alpha, clip, beta, baseline)
        w = clip_ratio(s.log_pi, s.log_pi_old, clip)

        def value(p, z=log_z):
            t = make_sample(p, base, q, y, spec, old)
            if kind.is_rl:
                return coef * t.log_pi
            if kind == LossKind.POWERFLOW:
                return w * loss_terms(kind, replace(t, log_pi_old=t.log_pi), z, spec.alpha, clip)[0]
            return loss_terms(kind, t, z, spec.alpha)[0]

        numeric = finite_diff(value, policy, h, queries=[q])
        num_dz = (value(policy, log_z + h) - value(policy, log_z - h)) / (2 * h)
        errors.append(relative_error(np.append(analytic.ravel(), dz), np.append(numeric.ravel(), num_dz)))
    return errors
