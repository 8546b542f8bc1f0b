"""Autoregressive softmax policies over a :class:`SequenceSpace`.

Parameters are raw logits stored in one array of shape
``(n_queries, n_rows, vocab.size)``.  A policy family only decides which row
a prefix reads from: :class:`TabularPolicy` has one row per non-terminal
prefix, :class:`BigramPolicy` one row per last token (plus a start row).

Gradients (``ParamGradient``) are dense arrays with the same shape as the
logits; rows a trajectory never visits are zero.
"""
from __future__ import annotations

import math
import re

import numpy as np
from scipy.special import log_softmax, softmax

from .seqspace import SequenceSpace, Trajectory, Vocab

ParamGradient = np.ndarray

EMPTY_PREFIX = "·"


class FrozenPolicyError(RuntimeError):
    pass


class AutoregressivePolicy:
    family = "base"

    def __init__(self, space: SequenceSpace, logits, frozen: bool = False):
        logits = np.array(logits, dtype=float)
        expected = (self.n_rows_for(space), space.vocab.size)
        if logits.ndim != 3 or logits.shape[1:] != expected:
            raise ValueError(f"logits shape {logits.shape} incompatible with (Q, {expected[0]}, {expected[1]})")
        self.space = space
        self._logits = logits
        if frozen:
            self._logits.flags.writeable = False

    # -- layout ---------------------------------------------------------
    @staticmethod
    def n_rows_for(space: SequenceSpace) -> int:
        raise NotImplementedError

    def row(self, prefix) -> int:
        raise NotImplementedError

    def row_key(self, row: int):
        """Human-readable key of a parameter row (used in serialization)."""
        raise NotImplementedError

    def row_from_key(self, key: tuple[int, ...]) -> int:
        raise NotImplementedError

    # -- basic properties ------------------------------------------------
    @property
    def vocab(self) -> Vocab:
        return self.space.vocab

    @property
    def max_len(self) -> int:
        return self.space.max_len

    @property
    def n_queries(self) -> int:
        return self._logits.shape[0]

    @property
    def logits(self) -> np.ndarray:
        return self._logits

    @property
    def frozen(self) -> bool:
        return not self._logits.flags.writeable

    @classmethod
    def uniform(cls, space: SequenceSpace, n_queries: int = 1):
        return cls(space, np.zeros((n_queries, cls.n_rows_for(space), space.vocab.size)))

    @classmethod
    def random(cls, space: SequenceSpace, n_queries: int, rng: np.random.Generator, scale: float = 1.0):
        shape = (n_queries, cls.n_rows_for(space), space.vocab.size)
        return cls(space, scale * rng.standard_normal(shape))

    def _check_query(self, q: int):
        if not 0 <= q < self.n_queries:
            raise KeyError(f"unknown query id {q} (policy has {self.n_queries})")

    def set_logits(self, q: int, prefix, values):
        if self.frozen:
            raise FrozenPolicyError("cannot modify a frozen policy")
        self._logits[q, self.row(tuple(prefix))] = values

    def update(self, delta: np.ndarray):
        """In-place ``logits += delta``."""
        if self.frozen:
            raise FrozenPolicyError("cannot modify a frozen policy")
        self._logits += delta

    def copy(self, frozen: bool = False):
        return type(self)(self.space, self._logits.copy(), frozen=frozen)

    def clone_frozen(self):
        return self.copy(frozen=True)

    # -- probabilities ---------------------------------------------------
    def next_token_dist(self, q: int, prefix, temperature: float = 1.0) -> np.ndarray:
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self._check_query(q)
        prefix = tuple(prefix)
        if not self.space.is_state(prefix):
            raise ValueError(f"{prefix} is not a non-terminal prefix")
        return softmax(self._logits[q, self.row(prefix)] / temperature)

    def log_prob(self, q: int, y: Trajectory) -> float:
        self._check_query(q)
        y = self.space.validate(y)
        total = 0.0
        for prefix, tok in y.prefixes():
            total += log_softmax(self._logits[q, self.row(prefix)])[tok]
        return float(total)

    def grad_log_prob(self, q: int, y: Trajectory) -> ParamGradient:
        self._check_query(q)
        y = self.space.validate(y)
        grad = np.zeros_like(self._logits)
        for prefix, tok in y.prefixes():
            r = self.row(prefix)
            grad[q, r] -= softmax(self._logits[q, r])
            grad[q, r, tok] += 1.0
        return grad

    def _usage(self):
        return self.space.usage(self.family, self.row, self.n_rows_for(self.space))

    def log_probs(self, q: int) -> np.ndarray:
        """``log pi(y)`` for every trajectory of the universe, in canonical order."""
        self._check_query(q)
        c, _ = self._usage()
        return c @ log_softmax(self._logits[q], axis=-1).ravel()

    def weighted_score(self, q: int, coef: np.ndarray) -> np.ndarray:
        """``sum_y coef[y] * grad log pi(y)`` restricted to query ``q``'s block.

        ``coef`` is indexed by universe position; the result has shape
        ``(n_rows, vocab.size)``.
        """
        c, v = self._usage()
        coef = np.asarray(coef, dtype=float)
        chosen = (c.T @ coef).reshape(self._logits.shape[1:])
        visits = v.T @ coef
        return chosen - visits[:, None] * softmax(self._logits[q], axis=-1)

    # -- sampling --------------------------------------------------------
    def sample(self, q: int, rng: np.random.Generator, temperature: float = 1.0) -> Trajectory:
        prefix: tuple[int, ...] = ()
        eos = self.vocab.eos_id
        while True:
            p = self.next_token_dist(q, prefix, temperature)
            tok = int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))
            prefix = prefix + (tok,)
            if tok == eos or len(prefix) == self.max_len:
                return self.space.trajectory(prefix)

    def sample_indices(self, q: int, n: int, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
        """Draw ``n`` trajectories ancestrally, vectorized across samples.

        Returns universe indices into ``space.trajectories``.
        """
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self._check_query(q)
        size, eos, L = self.vocab.size, self.vocab.eos_id, self.max_len
        tokens = np.full((n, L), -1, dtype=np.int64)
        rows = np.full(n, self.row(()), dtype=np.int64)
        active = np.ones(n, dtype=bool)
        for t in range(L):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            p = softmax(self._logits[q, rows[idx]] / temperature, axis=-1)
            u = rng.random(idx.size)
            tok = np.minimum((u[:, None] >= np.cumsum(p, axis=-1)).sum(axis=-1), size - 1)
            tokens[idx, t] = tok
            done = (tok == eos) | (t + 1 == L)
            active[idx[done]] = False
            keep = idx[~done]
            rows[keep] = [self.row(tuple(tokens[i, : t + 1])) for i in keep]
        index = self.space.index
        return np.array([index[tuple(row[row >= 0])] for row in tokens], dtype=np.int64)

    # -- serialization ---------------------------------------------------
    def to_text(self) -> str:
        v = self.vocab
        marker = "none" if v.marker_id is None else str(v.marker_id)
        lines = [
            f"# family={self.family} size={v.size} eos={v.eos_id} marker={marker} "
            f"max_len={self.max_len} queries={self.n_queries}"
        ]
        for q in range(self.n_queries):
            for r in range(self._logits.shape[1]):
                key = self.row_key(r)
                if key is None:
                    continue
                ptxt = " ".join(map(str, key)) if key else EMPTY_PREFIX
                vals = " ".join(format(x, ".17g") for x in self._logits[q, r])
                lines.append(f"{q} / {ptxt} -> {vals}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "AutoregressivePolicy":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing policy header line")
        header = dict(re.findall(r"(\w+)=(\S+)", lines[0]))
        try:
            cls = FAMILIES[header["family"]]
            vocab = Vocab(
                int(header["size"]),
                int(header["eos"]),
                None if header["marker"] == "none" else int(header["marker"]),
            )
            space = SequenceSpace(vocab, int(header["max_len"]))
            nq = int(header["queries"])
        except KeyError as e:
            raise ValueError(f"policy header lacks {e}") from None
        policy = cls.uniform(space, nq)
        for ln in lines[1:]:
            m = re.fullmatch(r"(\d+)\s*/\s*(.*?)\s*->\s*(.*)", ln)
            if not m:
                raise ValueError(f"malformed policy line: {ln!r}")
            q = int(m.group(1))
            key = () if m.group(2) == EMPTY_PREFIX else tuple(int(t) for t in m.group(2).split())
            vals = [float(x) for x in m.group(3).split()]
            policy._logits[q, policy.row_from_key(key)] = vals
        return policy

    def __repr__(self):
        return f"{type(self).__name__}(vocab={self.vocab.size}, max_len={self.max_len}, queries={self.n_queries})"


class TabularPolicy(AutoregressivePolicy):
    """One logit vector per (query, non-terminal prefix)."""

    family = "tabular"

    @staticmethod
    def n_rows_for(space):
        return len(space.states)

    def row(self, prefix):
        return self.space.state_index[tuple(prefix)]

    def row_key(self, row):
        return self.space.states[row]

    def row_from_key(self, key):
        return self.row(key)

    @classmethod
    def from_function(cls, space: SequenceSpace, n_queries: int, fn):
        """Build from ``fn(q, prefix) -> logit vector``."""
        logits = np.array([[fn(q, s) for s in space.states] for q in range(n_queries)], dtype=float)
        return cls(space, logits)


class BigramPolicy(AutoregressivePolicy):
    """Logits shared across prefixes with the same last token.

    Row 0 is the start symbol; row ``t + 1`` follows token ``t``.  The row
    after EOS exists for layout simplicity and is never visited.
    """

    family = "bigram"

    @staticmethod
    def n_rows_for(space):
        return space.vocab.size + 1

    def row(self, prefix):
        return 0 if not prefix else prefix[-1] + 1

    def row_key(self, row):
        if row == 0:
            return ()
        tok = row - 1
        return None if tok == self.vocab.eos_id else (tok,)

    def row_from_key(self, key):
        if len(key) > 1:
            raise ValueError(f"bigram key must be empty or a single token, got {key}")
        return self.row(key)


FAMILIES = {cls.family: cls for cls in (TabularPolicy, BigramPolicy)}


def tabular_from_dist(space: SequenceSpace, probs_per_query, floor: float = -1e4) -> TabularPolicy:
    """The tabular policy whose trajectory distribution equals ``probs``.

    Each next-token logit is the log of the mass of the subtree below the
    child prefix (for EOS, the mass of the terminated trajectory).  Zero-mass
    children get the finite ``floor`` logit, which underflows to probability
    zero after normalization.
    """
    probs_per_query = np.atleast_2d(np.asarray(probs_per_query, dtype=float))
    size = space.vocab.size
    out = np.zeros((probs_per_query.shape[0], len(space.states), size))
    for q, probs in enumerate(probs_per_query):
        mass: dict[tuple[int, ...], float] = {}
        for y, p in zip(space.trajectories, probs):
            for t in range(1, y.length + 1):
                key = y.tokens[:t]
                mass[key] = mass.get(key, 0.0) + p
        for r, s in enumerate(space.states):
            for tok in range(size):
                m = mass.get(s + (tok,), 0.0)
                out[q, r, tok] = math.log(m) if m > 0 else floor
    return TabularPolicy(space, out)
