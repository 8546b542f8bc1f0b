"""Target densities: alpha-power targets with a format penalty, escort
transforms of finite distributions, and the per-step temperature baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .policy import AutoregressivePolicy
from .seqspace import Trajectory, Vocab

PSI_MODES = ("per_token", "flat")


@dataclass(frozen=True)
class TargetSpec:
    """Parameters of the unnormalized target ``p_base^alpha * exp(penalty)``.

    ``psi_mode="per_token"`` places the penalty inside the per-token bracket
    (energy ``alpha * |y| * psi``); ``"flat"`` adds ``alpha * psi`` once per
    trajectory.
    """

    alpha: float
    psi_value: float = -0.5
    marker_required: bool = False
    length_aware: bool = False
    psi_mode: str = "per_token"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.psi_value > 0:
            raise ValueError(f"psi_value must be non-positive, got {self.psi_value}")
        if self.psi_mode not in PSI_MODES:
            raise ValueError(f"psi_mode must be one of {PSI_MODES}")


def format_penalty(y: Trajectory, vocab: Vocab, spec: TargetSpec) -> float:
    """``psi(y)``: zero when the final non-EOS token is the marker."""
    if not spec.marker_required:
        return 0.0
    if vocab.marker_id is None:
        raise ValueError("marker_required is set but the vocabulary has no marker token")
    body = [t for t in y.tokens if t != vocab.eos_id]
    if body and body[-1] == vocab.marker_id:
        return 0.0
    return spec.psi_value


def penalty_energy(y: Trajectory, vocab: Vocab, spec: TargetSpec) -> float:
    """Trajectory-level energy contributed by the format penalty."""
    psi = format_penalty(y, vocab, spec)
    if spec.psi_mode == "per_token":
        return spec.alpha * y.length * psi
    return spec.alpha * psi


def log_density_unnorm(base: AutoregressivePolicy, q: int, y: Trajectory, spec: TargetSpec) -> float:
    return spec.alpha * base.log_prob(q, y) + penalty_energy(y, base.vocab, spec)


def log_density_all(base: AutoregressivePolicy, q: int, spec: TargetSpec) -> np.ndarray:
    """``log p~(y)`` over the whole universe (vectorized)."""
    energy = spec.alpha * base.log_probs(q)
    if spec.marker_required:
        vocab = base.vocab
        energy = energy + np.array([penalty_energy(y, vocab, spec) for y in base.space.trajectories])
    return energy


def alpha_power(p, alpha: float) -> np.ndarray:
    """Escort transform ``p**alpha / sum(p**alpha)``."""
    p = np.asarray(p, dtype=float)
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if alpha < 1 and np.any(p == 0):
        raise ValueError("zero entries are not allowed with alpha < 1")
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
    z = alpha * logp
    return np.exp(z - logsumexp(z))


def temperature_scaled_policy(base: AutoregressivePolicy, alpha: float) -> AutoregressivePolicy:
    """Low-temperature baseline: every logit vector scaled by ``alpha``."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return type(base)(base.space, base.logits * alpha, frozen=True)
