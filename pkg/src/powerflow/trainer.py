"""Stochastic on-policy training against the exact oracle.

Each step samples ``samples_per_query`` trajectories for each of
``batch_queries`` queries, averages the per-sample loss gradients, and takes
one optimizer step on the policy logits and the log-partition values.
After every step the full policy distribution is compared with the loss
kind's exact target.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from . import oracle
from .objectives import ClipSpec, LogZScalar, LossKind, clip_ratio, init_logz
from .policy import AutoregressivePolicy
from .target import TargetSpec, log_density_all

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    losskind: LossKind = LossKind.LATB
    target: TargetSpec = field(default_factory=lambda: TargetSpec(alpha=4.0))
    steps: int = 2000
    batch_queries: int = 4
    samples_per_query: int = 16
    lr: float = 0.05
    logz_lr: float | None = None  # default 10 * lr
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    temperature: float | None = None  # default 1.0 for alpha > 1, 0.7 otherwise
    clip: ClipSpec = field(default_factory=ClipSpec)
    refresh_every: int = 8
    seed: int = 0
    beta: float | None = None  # RL kinds; default 1 / (alpha - 1)
    init_noise: float = 0.01
    tb_token_per_length: bool = False
    metrics_every: int = 1

    def __post_init__(self):
        self.losskind = LossKind(self.losskind)
        for name in ("steps", "batch_queries", "samples_per_query", "refresh_every", "metrics_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or (self.logz_lr is not None and self.logz_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def effective_logz_lr(self) -> float:
        return 10 * self.lr if self.logz_lr is None else self.logz_lr

    @property
    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return 1.0 if self.target.alpha >= 1 else 0.7

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return self.beta
        if self.target.alpha <= 1:
            raise ValueError("RL kinds need beta when alpha <= 1 (alpha = 1 + 1/beta)")
        return 1.0 / (self.target.alpha - 1.0)


@dataclass
class StepMetrics:
    step: int
    mean_loss: float
    mean_sampled_length: float
    tv_to_target: float
    kl_to_target: float
    logz_values: list
    mean_token_logprob_base: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class TrainResult(NamedTuple):
    policy: AutoregressivePolicy
    logz: LogZScalar
    metrics: list


# -- optimizers ----------------------------------------------------------

class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


class AdaptiveMoment:
    """Adam with bias correction."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig, lr: float):
    if config.optimizer == "sgd":
        return Sgd(lr)
    return AdaptiveMoment(lr, config.adam_betas, config.adam_eps)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state, config: TrainConfig, lr: float | None = None):
    """Functional wrapper: returns ``(new_params, state)``.

    ``state`` is the optimizer object (``None`` on the first call).
    """
    grads = np.asarray(grads, dtype=float)
    if not np.all(np.isfinite(grads)):
        raise TrainingDiverged("non-finite gradient entries")
    if state is None:
        state = make_optimizer(config, config.lr if lr is None else lr)
    return state.step(np.asarray(params, dtype=float), grads), state


# -- training ------------------------------------------------------------

def _oracle_reference(kind: LossKind, base, q, spec: TargetSpec) -> oracle.FiniteDist:
    if kind in (LossKind.TB_TRAJ, LossKind.RL_TRAJ):
        return oracle.exact_target_dist(base, q, spec)
    # TB-token and RL-token have no proper alpha-power target; report
    # divergences against the length-normalized target for reference
    return oracle.exact_la_target(base, q, spec)[0]


def _sample_streams(seed: int, queries) -> dict[int, np.random.Generator]:
    return {q: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, q))) for q in queries}


def train(config: TrainConfig, base: AutoregressivePolicy, queries=None,
          callback: Callable | None = None) -> TrainResult:
    """Run ``config.steps`` optimizer steps starting from a copy of ``base``.

    ``callback(step, policy, logz)`` is invoked after every update.
    """
    queries = list(range(base.n_queries)) if queries is None else list(queries)
    if not queries:
        raise ValueError("need at least one query")
    kind = config.losskind
    spec = config.target
    alpha = spec.alpha
    beta = config.effective_beta if kind.is_rl else None
    temperature = config.effective_temperature
    n_samples = config.samples_per_query
    space = base.space
    lengths = space.lengths

    base = base.clone_frozen()
    policy = base.copy()
    logz = LogZScalar(base.n_queries, space.max_len, per_length=kind == LossKind.TB_TOKEN and config.tb_token_per_length)

    streams = _sample_streams(config.seed, queries)
    control = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))

    log_pb = {q: base.log_probs(q) for q in queries}
    log_pt = {q: log_density_all(base, q, spec) for q in queries}
    if kind.length_aware:
        psi_tok = {q: (log_pt[q] / alpha - log_pb[q]) / lengths for q in queries}
    references = {q: _oracle_reference(kind, base, q, spec) for q in queries}

    opt_theta = make_optimizer(config, config.lr)
    opt_z = make_optimizer(config, config.effective_logz_lr)
    old = policy.clone_frozen()
    history: list[StepMetrics] = []
    total = len(queries) if len(queries) <= config.batch_queries else config.batch_queries

    for step in range(config.steps):
        if step % config.refresh_every == 0:
            old = policy.clone_frozen()
        if len(queries) <= config.batch_queries:
            batch = queries
        else:
            batch = sorted(control.choice(queries, size=config.batch_queries, replace=False).tolist())
        behaviour = old if kind == LossKind.POWERFLOW else policy

        draws = {q: behaviour.sample_indices(q, n_samples, streams[q], temperature) for q in batch}

        if step == 0 and not kind.is_rl:
            _init_logz(logz, kind, queries, draws, log_pb, log_pt, lengths, alpha, config.init_noise, control)

        grad = np.zeros_like(policy.logits)
        grad_z = np.zeros_like(logz.values)
        losses, sampled_len, token_lp = [], [], []
        denom = total * n_samples
        for q in batch:
            idx = draws[q]
            lp_pi = policy.log_probs(q)[idx]
            n = lengths[idx]
            lpb = log_pb[q][idx]
            lpt = log_pt[q][idx]
            sampled_len.append(n)
            token_lp.append(lpb / n)
            if kind.is_rl:
                reward = lpb if kind == LossKind.RL_TRAJ else lpb / n
                ret = reward - beta * (lp_pi - lpb)
                loss = -ret
                coef = -(ret - ret.mean())
                dz = np.zeros_like(ret)
            else:
                z = logz.values[q, n.astype(int)] if logz.per_length else np.full(len(idx), logz.values[q])
                w, scale = 1.0, 1.0
                if kind == LossKind.TB_TRAJ:
                    res = z + lp_pi - lpt
                elif kind == LossKind.TB_TOKEN:
                    res = z + lp_pi - alpha * lpb / n
                elif kind == LossKind.LATB:
                    res = z + (lp_pi - lpt) / n
                    scale = 1 / n
                else:
                    lp_old = old.log_probs(q)[idx]
                    w = np.array([clip_ratio(a, b, config.clip) for a, b in zip(lp_pi, lp_old)])
                    res = z + lp_pi / n - alpha * (lpb / n + psi_tok[q][idx])
                    scale = 1 / n
                loss = w * res * res
                coef = w * 2 * res * scale
                dz = w * 2 * res
                if logz.per_length:
                    np.add.at(grad_z[q], n.astype(int), dz / denom)
                else:
                    grad_z[q] += dz.sum() / denom
            losses.append(loss)
            per_traj = np.bincount(idx, weights=coef, minlength=len(space)) / denom
            grad[q] += policy.weighted_score(q, per_traj)

        mean_loss = float(np.mean(np.concatenate(losses)))
        if not math.isfinite(mean_loss) or mean_loss > DIVERGENCE_LOSS:
            raise TrainingDiverged(f"step {step}: mean loss {mean_loss!r} exceeds {DIVERGENCE_LOSS:g}")
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(grad_z))):
            raise TrainingDiverged(f"step {step}: non-finite gradient")

        policy.logits[...] = opt_theta.step(policy.logits, grad)
        if not kind.is_rl:
            logz.values[...] = opt_z.step(logz.values, grad_z)
        if not (np.all(np.isfinite(policy.logits)) and np.all(np.isfinite(logz.values))):
            raise TrainingDiverged(f"step {step}: non-finite parameters")

        if callback is not None:
            callback(step, policy, logz)

        if step % config.metrics_every == 0 or step == config.steps - 1:
            tvs, kls = [], []
            for q in queries:
                pd = oracle.policy_dist(policy, q)
                tvs.append(oracle.tv(pd, references[q]))
                kls.append(oracle.kl(pd, references[q]))
            history.append(StepMetrics(
                step=step,
                mean_loss=mean_loss,
                mean_sampled_length=float(np.mean(np.concatenate(sampled_len))),
                tv_to_target=float(np.mean(tvs)),
                kl_to_target=float(np.mean(kls)),
                logz_values=logz.values.ravel().tolist(),
                mean_token_logprob_base=float(np.mean(np.concatenate(token_lp))),
            ))
    return TrainResult(policy, logz, history)


def _init_logz(logz, kind, queries, draws, log_pb, log_pt, lengths, alpha, noise_scale, rng):
    """Initialize from the first batch, which is drawn from the base model."""
    idx = {q: draws[q] for q in draws}
    if kind.length_aware:
        tok = np.concatenate([log_pb[q][i] for q, i in idx.items()]).sum()
        count = np.concatenate([lengths[i] for i in idx.values()]).sum()
        start = np.full(len(queries), init_logz(tok / count, alpha))
    elif kind == LossKind.TB_TRAJ:
        mean_seq = np.mean(np.concatenate([log_pb[q][i] for q, i in idx.items()]))
        start = np.full(len(queries), init_logz(mean_seq, alpha))
    else:  # TB-token: batch mean of the target term at pi = base
        gap = np.concatenate([alpha * log_pb[q][i] / lengths[i] - log_pb[q][i] for q, i in idx.items()])
        start = np.full(len(queries), float(np.mean(gap)))
    noise = rng.uniform(-noise_scale, noise_scale, size=len(queries)) if noise_scale > 0 else np.zeros(len(queries))
    for q, value, eps in zip(queries, start, noise):
        logz.set_query(q, value + eps)


def compare_dynamics(configs, base: AutoregressivePolicy, queries=None, labels=None) -> dict[str, TrainResult]:
    """Train once per config on a shared base; results keyed by label."""
    configs = list(configs)
    if labels is None:
        labels = [c.losskind.value for c in configs]
    if len(set(labels)) != len(labels):
        raise ValueError("labels must be unique")
    return {label: train(cfg, base, queries) for label, cfg in zip(labels, configs)}


def metric_table(results: dict[str, TrainResult], name: str) -> dict[str, np.ndarray]:
    """One aligned series per run for a StepMetrics field."""
    return {label: np.array([getattr(m, name) for m in r.metrics]) for label, r in results.items()}


def metrics_jsonl(metrics) -> str:
    return "".join(m.to_json() + "\n" for m in metrics)


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


STEP_FIELDS = tuple(f.name for f in fields(StepMetrics))
