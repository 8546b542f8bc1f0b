"""Finite autoregressive sequence universes.

A universe is fixed by a vocabulary (with one end-of-sequence token) and a
maximum length.  A trajectory ends when EOS is emitted, or is force-stopped
at ``max_len`` without an EOS factor, so the set of trajectories is
prefix-free and any autoregressive policy over it sums to exactly one.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

DEFAULT_CAP = 10**6


class UniverseTooLarge(ValueError):
    """Raised when an enumeration would exceed the configured cap."""


class InvalidTrajectory(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    size: int
    eos_id: int | None = None
    marker_id: int | None = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"vocab size must be positive, got {self.size}")
        if self.eos_id is None:
            object.__setattr__(self, "eos_id", self.size - 1)
        if not 0 <= self.eos_id < self.size:
            raise ValueError(f"eos_id {self.eos_id} out of range for size {self.size}")
        if self.marker_id is not None:
            if not 0 <= self.marker_id < self.size or self.marker_id == self.eos_id:
                raise ValueError(f"invalid marker_id {self.marker_id}")

    @property
    def non_eos(self) -> list[int]:
        return [t for t in range(self.size) if t != self.eos_id]


class Termination(enum.Enum):
    EOS = "eos"
    MAX_LEN = "max_len"


@dataclass(frozen=True)
class Trajectory:
    tokens: tuple[int, ...]
    terminated_by: Termination

    @property
    def length(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def prefixes(self):
        """Yield ``(prefix, next_token)`` for every scored step.

        A force-stopped trajectory contributes no factor for the stop itself,
        so every token in ``tokens`` is one scored step either way.
        """
        for t, tok in enumerate(self.tokens):
            yield self.tokens[:t], tok

    def __str__(self):
        return "[" + ",".join(map(str, self.tokens)) + "]"


def make_trajectory(tokens, vocab: Vocab, max_len: int) -> Trajectory:
    """Build and validate a trajectory from a token list."""
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise InvalidTrajectory("empty trajectory")
    if any(not 0 <= t < vocab.size for t in tokens):
        raise InvalidTrajectory(f"token out of range in {tokens}")
    eos = vocab.eos_id
    if eos in tokens[:-1]:
        raise InvalidTrajectory(f"EOS before the final position in {tokens}")
    if len(tokens) > max_len:
        raise InvalidTrajectory(f"{tokens} longer than max_len={max_len}")
    if tokens[-1] == eos:
        return Trajectory(tokens, Termination.EOS)
    if len(tokens) != max_len:
        raise InvalidTrajectory(f"{tokens} neither ends in EOS nor reaches max_len={max_len}")
    return Trajectory(tokens, Termination.MAX_LEN)


def trajectory_count(vocab: Vocab, max_len: int) -> int:
    """Number of trajectories, ``sum_{t<L} k^t + k^L`` with k non-EOS tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    k = vocab.size - 1
    if k == 0:
        return 1
    # python ints do not overflow; the cap check lives in enumerate_trajectories
    return sum(k**t for t in range(max_len)) + k**max_len


def enumerate_trajectories(vocab: Vocab, max_len: int, cap: int = DEFAULT_CAP) -> list[Trajectory]:
    """All trajectories in lexicographic token order."""
    n = trajectory_count(vocab, max_len)
    if n > cap:
        raise UniverseTooLarge(f"{n} trajectories exceeds cap {cap} (vocab={vocab.size}, max_len={max_len})")
    eos = vocab.eos_id
    out: list[Trajectory] = []

    def walk(prefix: tuple[int, ...]):
        for tok in range(vocab.size):
            seq = prefix + (tok,)
            if tok == eos:
                out.append(Trajectory(seq, Termination.EOS))
            elif len(seq) == max_len:
                out.append(Trajectory(seq, Termination.MAX_LEN))
            else:
                walk(seq)

    walk(())
    return out


@dataclass(frozen=True)
class SequenceSpace:
    """A vocabulary/max-length pair plus cached enumeration structures.

    ``states`` are the non-terminal prefixes (the GFlowNet tree nodes); each
    has exactly one parent, so the backward policy is identically one.
    """

    vocab: Vocab
    max_len: int
    cap: int = DEFAULT_CAP
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    @cached_property
    def trajectories(self) -> list[Trajectory]:
        return enumerate_trajectories(self.vocab, self.max_len, self.cap)

    @cached_property
    def index(self) -> dict[tuple[int, ...], int]:
        return {y.tokens: i for i, y in enumerate(self.trajectories)}

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([y.length for y in self.trajectories], dtype=float)

    @cached_property
    def states(self) -> list[tuple[int, ...]]:
        non_eos = self.vocab.non_eos
        return [s for n in range(self.max_len) for s in itertools.product(non_eos, repeat=n)]

    @cached_property
    def state_index(self) -> dict[tuple[int, ...], int]:
        return {s: i for i, s in enumerate(self.states)}

    def __len__(self):
        return len(self.trajectories)

    def trajectory(self, tokens) -> Trajectory:
        return make_trajectory(tokens, self.vocab, self.max_len)

    def validate(self, y: Trajectory) -> Trajectory:
        return make_trajectory(y.tokens, self.vocab, self.max_len)

    def is_state(self, prefix) -> bool:
        return tuple(prefix) in self.state_index

    def usage(self, key: str, row_of, n_rows: int) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
        """Sparse step-usage matrices for one parameter layout.

        ``row_of`` maps a prefix to a parameter row.  Returns ``(C, V)`` where
        ``C[y, r * size + v]`` counts uses of token v at row r along y, and
        ``V[y, r]`` counts visits to row r.  Cached under ``key``.
        """
        if key in self._cache:
            return self._cache[key]
        size = self.vocab.size
        ti, rows, toks = [], [], []
        for i, y in enumerate(self.trajectories):
            for prefix, tok in y.prefixes():
                ti.append(i)
                rows.append(row_of(prefix))
                toks.append(tok)
        ti, rows, toks = np.array(ti), np.array(rows), np.array(toks)
        ones = np.ones(len(ti))
        c = sparse.csr_matrix((ones, (ti, rows * size + toks)), shape=(len(self), n_rows * size))
        v = sparse.csr_matrix((ones, (ti, rows)), shape=(len(self), n_rows))
        c.sum_duplicates()
        v.sum_duplicates()
        self._cache[key] = (c, v)
        return c, v
