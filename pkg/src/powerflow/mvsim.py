"""Exact majority-voting self-reward dynamics on a finite answer set.

A population ``pi`` over answers draws ``N`` votes; the batch winner is the
most frequent answer with ties broken uniformly at random.  The expected
reward ``rbar(y)`` is the probability that ``y`` wins, and the population is
updated by ``pi <- pi * exp(rbar / beta) / Z``.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp

COMPOSITION_CAP = 10**6
CONVERGED = 1 - 1e-9
SIMPLEX_TOL = 1e-12
MODES = ("exact", "montecarlo")
TIE_MODES = ("selected", "membership")


class CompositionCapExceeded(ValueError):
    pass


class NonUniqueMode(ValueError):
    pass


@dataclass(frozen=True)
class VoteConfig:
    """``tie_mode="selected"`` credits ``1/|tie set|`` to each tied answer;
    ``"membership"`` credits every tied answer in full (so rewards need not
    sum to one)."""

    n_votes: int
    beta: float = 1.0
    iterations: int = 10_000
    mode: str = "exact"
    samples: int = 100_000
    seed: int = 0
    tie_mode: str = "selected"

    def __post_init__(self):
        if self.n_votes < 2:
            raise ValueError(f"n_votes must be >= 2, got {self.n_votes}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.tie_mode not in TIE_MODES:
            raise ValueError(f"tie_mode must be one of {TIE_MODES}")
        if self.mode == "montecarlo" and self.samples < 1:
            raise ValueError("samples must be positive")


def composition_count(n: int, m: int) -> int:
    return math.comb(n + m - 1, m - 1)


@lru_cache(maxsize=64)
def compositions(n: int, m: int) -> np.ndarray:
    """All vectors of ``m`` nonnegative ints summing to ``n``, lexicographically ascending.

    Stars and bars: each choice of ``m - 1`` bar positions among
    ``n + m - 1`` slots is one composition.
    """
    count = composition_count(n, m)
    if count > COMPOSITION_CAP:
        raise CompositionCapExceeded(f"{count} compositions of {n} into {m} parts exceeds {COMPOSITION_CAP}")
    bars = np.array(list(itertools.combinations(range(n + m - 1), m - 1)), dtype=int).reshape(count, m - 1)
    edges = np.hstack([np.full((count, 1), -1), bars, np.full((count, 1), n + m - 1)])
    out = np.diff(edges, axis=1) - 1
    out.flags.writeable = False
    return out


def check_population(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1 or len(pi) < 2:
        raise ValueError("population needs at least two answers")
    if np.any(pi < 0) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"population is not on the simplex (sum {pi.sum()!r})")
    return pi


def mode_of(pi) -> int:
    pi = np.asarray(pi, dtype=float)
    top = np.flatnonzero(pi == pi.max())
    if len(top) != 1:
        raise NonUniqueMode(f"population has {len(top)} tied modes")
    return int(top[0])


def _credit(counts: np.ndarray, tie_mode: str) -> np.ndarray:
    winners = counts == counts.max(axis=1, keepdims=True)
    if tie_mode == "membership":
        return winners.astype(float)
    return winners / winners.sum(axis=1, keepdims=True)


def _exact_reward(pi, n, tie_mode):
    ks = compositions(n, len(pi))
    with np.errstate(divide="ignore", invalid="ignore"):
        logpi = np.log(pi)
        prod = ks * logpi
    # 0 * log 0 counts as 0; a positive count on a zero-mass answer is impossible
    terms = np.where(ks > 0, prod, 0.0)
    logw = gammaln(n + 1) - gammaln(ks + 1).sum(axis=1) + terms.sum(axis=1)
    w = np.exp(logw)
    return w @ _credit(ks, tie_mode)


def _mc_reward(pi, n, tie_mode, samples, seed):
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, pi, size=samples)
    return _credit(counts, tie_mode).mean(axis=0)


def expected_majority_reward(pi, config: VoteConfig) -> np.ndarray:
    pi = check_population(pi)
    if config.mode == "exact":
        return _exact_reward(pi, config.n_votes, config.tie_mode)
    return _mc_reward(pi, config.n_votes, config.tie_mode, config.samples, config.seed)


def _log_update(logpi, rbar, beta):
    z = logpi + np.asarray(rbar, dtype=float) / beta
    return z - logsumexp(z)


def mv_update(pi, rbar, beta: float) -> np.ndarray:
    """Exponentiated-gradient step ``pi * exp(rbar / beta)``, renormalized."""
    pi = check_population(pi)
    rbar = np.asarray(rbar, dtype=float)
    if rbar.shape != pi.shape:
        raise ValueError("pi and rbar differ in shape")
    if not beta > 0:
        raise ValueError("beta must be positive")
    with np.errstate(divide="ignore"):
        out = np.exp(_log_update(np.log(pi), rbar, beta))
    return out / out.sum()


@dataclass
class VoteStep:
    k: int
    pi: np.ndarray
    rbar: np.ndarray
    lam: np.ndarray  # log pi(y*) - log pi(y') for every y' != y*


@dataclass
class VoteRun:
    mode: int
    steps: list

    @property
    def converged(self) -> bool:
        return bool(self.steps[-1].pi[self.mode] > CONVERGED)

    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.steps])

    def mode_probs(self) -> np.ndarray:
        return np.array([s.pi[self.mode] for s in self.steps])

    def to_csv(self, fh=None) -> str:
        m = len(self.steps[0].pi)
        others = [j for j in range(m) if j != self.mode]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration"] + [f"pi_{j}" for j in range(m)] + [f"rbar_{j}" for j in range(m)]
                   + [f"lambda_{j}" for j in others])
        for s in self.steps:
            w.writerow([s.k] + [format(v, ".17g") for v in (*s.pi, *s.rbar, *s.lam)])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def run_dynamics(pi0, config: VoteConfig) -> VoteRun:
    """Iterate reward and update from ``pi0`` until the mode passes ``1 - 1e-9``.

    Step ``k`` records ``pi_k``, the reward computed at ``pi_k`` and
    ``Lambda_k``.  At most ``config.iterations`` updates are applied.  The
    population is carried in log space so that ``Lambda`` stays accurate
    once the non-modal mass underflows relative to the mode.
    """
    pi = check_population(pi0)
    star = mode_of(pi)
    with np.errstate(divide="ignore"):
        logpi = np.log(pi)
    others = np.arange(len(pi)) != star
    steps = []
    for k in range(config.iterations + 1):
        pi = np.exp(logpi)
        pi /= pi.sum()
        rbar = expected_majority_reward(pi, config)
        steps.append(VoteStep(k, pi, rbar, logpi[star] - logpi[others]))
        if pi[star] > CONVERGED or k == config.iterations:
            break
        logpi = _log_update(logpi, rbar, config.beta)
    return VoteRun(star, steps)


def drift_positive(pi, rbar) -> bool:
    """Whether the mode out-earns every strictly less likely answer."""
    pi = np.asarray(pi, dtype=float)
    rbar = np.asarray(rbar, dtype=float)
    star = mode_of(pi)
    below = pi < pi[star]
    return bool(np.all(rbar[star] > rbar[below]))
