"""Training losses and their analytic gradients.

Every loss here depends on the policy only through ``log pi(y)``, so each
per-sample gradient is ``coef * grad log pi(y)`` for a scalar ``coef``.
:func:`loss_terms` returns that coefficient; the trainer aggregates many
samples with one sparse product instead of materializing every gradient.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .policy import AutoregressivePolicy, ParamGradient
from .seqspace import Trajectory
from .target import TargetSpec, format_penalty, log_density_all, log_density_unnorm


class LossKind(str, enum.Enum):
    TB_TRAJ = "tb_traj"
    TB_TOKEN = "tb_token"
    LATB = "la_tb"
    POWERFLOW = "powerflow"
    RL_TRAJ = "rl_traj"
    RL_TOKEN = "rl_token"

    @property
    def is_rl(self) -> bool:
        return self in (LossKind.RL_TRAJ, LossKind.RL_TOKEN)

    @property
    def length_aware(self) -> bool:
        return self in (LossKind.LATB, LossKind.POWERFLOW)


@dataclass(frozen=True)
class ClipSpec:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self):
        if not 0 < self.eps_low < 1:
            raise ValueError(f"eps_low must lie in (0, 1), got {self.eps_low}")
        if self.eps_high <= 0:
            raise ValueError(f"eps_high must be positive, got {self.eps_high}")


class LogZScalar:
    """Learned log-partition values, one per query.

    With ``per_length=True`` (only meaningful for TB-token) there is one value
    per (query, trajectory length) instead.
    """

    def __init__(self, n_queries: int, max_len: int | None = None, per_length: bool = False):
        if per_length and max_len is None:
            raise ValueError("per-length tables need max_len")
        self.per_length = per_length
        shape = (n_queries, max_len + 1) if per_length else (n_queries,)
        self.values = np.zeros(shape)

    def index(self, q: int, length: int):
        return (q, length) if self.per_length else (q,)

    def get(self, q: int, length: int) -> float:
        return float(self.values[self.index(q, length)])

    def set_query(self, q: int, value: float):
        self.values[q] = value

    def copy(self) -> "LogZScalar":
        out = LogZScalar.__new__(LogZScalar)
        out.per_length = self.per_length
        out.values = self.values.copy()
        return out

    def __repr__(self):
        return f"LogZScalar({self.values.tolist()})"


# -- scalar losses -------------------------------------------------------

def loss_tb_traj(log_z: float, log_pi: float, log_ptilde: float) -> float:
    return (log_z + log_pi - log_ptilde) ** 2


def loss_tb_token(log_z: float, log_pi: float, log_pbase: float, length: int, alpha: float) -> float:
    if length < 1:
        raise ValueError("length must be >= 1")
    return (log_z + log_pi - alpha * log_pbase / length) ** 2


def loss_la_tb(log_zp: float, log_pi: float, log_ptilde: float, length: int) -> float:
    if length < 1:
        raise ValueError("length must be >= 1")
    return (log_zp + (log_pi - log_ptilde) / length) ** 2


def clip_ratio(log_pi_new: float, log_pi_old: float, clip: ClipSpec) -> float:
    """Clipped importance weight; a plain number, never differentiated."""
    ratio = math.exp(min(log_pi_new - log_pi_old, 700.0))
    return min(max(ratio, 1.0 - clip.eps_low), 1.0 + clip.eps_high)


def loss_powerflow(log_zp, log_pi_new, log_pi_old, log_pbase, psi, length, alpha, clip: ClipSpec) -> float:
    if length < 1:
        raise ValueError("length must be >= 1")
    w = clip_ratio(log_pi_new, log_pi_old, clip)
    return w * (log_zp + log_pi_new / length - alpha * (log_pbase / length + psi)) ** 2


def loss_rl_kl(kind: LossKind, log_pi: float, log_pbase: float, length: int, beta: float,
               baseline: float = 0.0) -> tuple[float, float]:
    """Per-sample KL-regularized return and its score-function coefficient.

    Returns ``(loss, advantage)``.  ``loss`` is the negated regularized return
    of this sample; the ascent direction is ``advantage * grad log pi``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if kind == LossKind.RL_TRAJ:
        reward = log_pbase
    elif kind == LossKind.RL_TOKEN:
        reward = log_pbase / length
    else:
        raise ValueError(f"{kind} is not an RL loss")
    ret = reward - beta * (log_pi - log_pbase)
    return -ret, ret - baseline


def init_logz(mean_ref_token_logprob: float, alpha: float, noise: float = 0.0) -> float:
    """Start ``log Z'`` at ``mean token log-prob * (alpha - 1) + noise``."""
    return mean_ref_token_logprob * (alpha - 1.0) + noise


# -- per-sample terms ----------------------------------------------------

@dataclass
class Sample:
    """Everything a loss needs about one sampled trajectory.

    ``psi`` is the per-token penalty inside the PowerFlow bracket, so that
    ``alpha * (log_pbase + length * psi) == log_ptilde``.
    """

    q: int
    length: int
    log_pi: float
    log_pbase: float
    log_ptilde: float
    psi: float = 0.0
    log_pi_old: float | None = None
    y: Trajectory | None = None


def make_sample(policy: AutoregressivePolicy, base: AutoregressivePolicy, q: int, y: Trajectory,
                spec: TargetSpec, old: AutoregressivePolicy | None = None) -> Sample:
    psi = format_penalty(y, base.vocab, spec)
    if spec.psi_mode == "flat":
        psi /= y.length
    return Sample(
        q=q,
        length=y.length,
        log_pi=policy.log_prob(q, y),
        log_pbase=base.log_prob(q, y),
        log_ptilde=log_density_unnorm(base, q, y, spec),
        psi=psi,
        log_pi_old=None if old is None else old.log_prob(q, y),
        y=y,
    )


def loss_terms(kind: LossKind, s: Sample, log_z: float, alpha: float, clip: ClipSpec | None = None,
               beta: float | None = None, baseline: float = 0.0) -> tuple[float, float, float]:
    """``(loss, score coefficient, d loss / d log Z)`` for one sample.

    The gradient of the loss with respect to the logits is
    ``coef * grad log pi(y)``.
    """
    kind = LossKind(kind)
    n = s.length
    if kind == LossKind.TB_TRAJ:
        res = log_z + s.log_pi - s.log_ptilde
        return res * res, 2 * res, 2 * res
    if kind == LossKind.TB_TOKEN:
        res = log_z + s.log_pi - alpha * s.log_pbase / n
        return res * res, 2 * res, 2 * res
    if kind == LossKind.LATB:
        res = log_z + (s.log_pi - s.log_ptilde) / n
        return res * res, 2 * res / n, 2 * res
    if kind == LossKind.POWERFLOW:
        old = s.log_pi if s.log_pi_old is None else s.log_pi_old
        w = clip_ratio(s.log_pi, old, clip or ClipSpec())
        res = log_z + s.log_pi / n - alpha * (s.log_pbase / n + s.psi)
        return w * res * res, w * 2 * res / n, w * 2 * res
    if kind.is_rl:
        if beta is None:
            raise ValueError("RL losses need beta")
        loss, adv = loss_rl_kl(kind, s.log_pi, s.log_pbase, n, beta, baseline)
        return loss, -adv, 0.0
    raise ValueError(f"unknown loss kind {kind}")


def grad_loss(kind: LossKind, s: Sample, policy: AutoregressivePolicy, log_z: float, alpha: float,
              clip: ClipSpec | None = None, beta: float | None = None,
              baseline: float = 0.0) -> tuple[ParamGradient, float]:
    """Analytic ``(d loss / d logits, d loss / d log Z)`` for one sample.

    For RL kinds the logit gradient is that of the surrogate
    ``-advantage * log pi(y)`` with the advantage held fixed.
    """
    if s.y is None:
        raise ValueError("sample has no trajectory attached")
    _, coef, dz = loss_terms(kind, s, log_z, alpha, clip, beta, baseline)
    return coef * policy.grad_log_prob(s.q, s.y), dz


# -- exact expectations over the universe --------------------------------

def _universe_terms(kind, policy, base, q, spec):
    kind = LossKind(kind)
    log_pi = policy.log_probs(q)
    log_pb = base.log_probs(q)
    lp = log_density_all(base, q, spec)
    lengths = policy.space.lengths
    return kind, log_pi, log_pb, lp, lengths


def optimal_logz(policy: AutoregressivePolicy, base: AutoregressivePolicy, q: int, spec: TargetSpec,
                 kind: LossKind = LossKind.TB_TRAJ) -> float:
    """Minimizer over ``log Z`` of the exact expected squared loss at fixed pi."""
    kind, log_pi, log_pb, lp, lengths = _universe_terms(kind, policy, base, q, spec)
    pi = np.exp(log_pi)
    if kind == LossKind.TB_TRAJ:
        return float(pi @ (lp - log_pi))
    if kind == LossKind.LATB:
        return float(pi @ ((lp - log_pi) / lengths))
    if kind == LossKind.TB_TOKEN:
        return float(pi @ (spec.alpha * log_pb / lengths - log_pi))
    raise ValueError(f"optimal_logz is defined for TB_TRAJ, TB_TOKEN and LATB, not {kind}")


def _residual_all(kind, log_z, log_pi, log_pb, lp, lengths, alpha):
    if kind == LossKind.TB_TRAJ:
        return log_z + log_pi - lp, 1.0
    if kind == LossKind.TB_TOKEN:
        return log_z + log_pi - alpha * log_pb / lengths, 1.0
    if kind in (LossKind.LATB, LossKind.POWERFLOW):
        return log_z + (log_pi - lp) / lengths, 1.0 / lengths
    raise ValueError(kind)


def expected_loss(kind: LossKind, policy, base, q: int, spec: TargetSpec, log_z: float = 0.0,
                  beta: float | None = None) -> float:
    """Exact on-policy expected loss (``w = 1``)."""
    kind, log_pi, log_pb, lp, lengths = _universe_terms(kind, policy, base, q, spec)
    pi = np.exp(log_pi)
    if kind.is_rl:
        reward = log_pb if kind == LossKind.RL_TRAJ else log_pb / lengths
        return float(-(pi @ (reward - beta * (log_pi - log_pb))))
    res, _ = _residual_all(kind, log_z, log_pi, log_pb, lp, lengths, spec.alpha)
    return float(pi @ res**2)


def expected_update(kind: LossKind, policy, base, q: int, spec: TargetSpec, log_z: float = 0.0,
                    beta: float | None = None) -> tuple[ParamGradient, float]:
    """Exact on-policy expectation of the per-sample gradient estimator.

    For squared losses only the direct ``d loss / d theta`` term is averaged
    (as the stochastic trainer does), not the derivative of the sampling
    distribution.  For RL kinds this is the negated expected ascent direction
    ``-E[A grad log pi]`` with zero baseline.
    """
    kind, log_pi, log_pb, lp, lengths = _universe_terms(kind, policy, base, q, spec)
    pi = np.exp(log_pi)
    if kind.is_rl:
        reward = log_pb if kind == LossKind.RL_TRAJ else log_pb / lengths
        coef = -pi * (reward - beta * (log_pi - log_pb))
        dz = 0.0
    else:
        res, scale = _residual_all(kind, log_z, log_pi, log_pb, lp, lengths, spec.alpha)
        coef = pi * 2 * res * scale
        dz = float(pi @ (2 * res))
    grad = np.zeros_like(policy.logits)
    grad[q] = policy.weighted_score(q, coef)
    return grad, dz
