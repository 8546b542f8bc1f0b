"""Distribution matching of autoregressive policies against power targets,
checked exactly on small enumerable sequence universes."""

from .bases import parse_base, two_mode_base
from .mvsim import VoteConfig, expected_majority_reward, mv_update, run_dynamics
from .objectives import ClipSpec, LogZScalar, LossKind, grad_loss, loss_terms
from .oracle import FiniteDist, exact_la_target, exact_target_dist, kl, policy_dist, tv
from .policy import BigramPolicy, TabularPolicy
from .seqspace import SequenceSpace, Trajectory, Vocab
from .target import TargetSpec, alpha_power
from .trainer import TrainConfig, compare_dynamics, train

__all__ = [
    "BigramPolicy", "ClipSpec", "FiniteDist", "LogZScalar", "LossKind", "SequenceSpace", "TabularPolicy",
    "TargetSpec", "TrainConfig", "Trajectory", "Vocab", "VoteConfig", "alpha_power", "compare_dynamics",
    "exact_la_target", "exact_target_dist", "expected_majority_reward", "grad_loss", "kl", "loss_terms",
    "mv_update", "parse_base", "policy_dist", "run_dynamics", "train", "tv", "two_mode_base",
]
