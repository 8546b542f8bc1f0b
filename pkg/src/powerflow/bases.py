"""Named base-policy generators for synthetic experiments."""
from __future__ import annotations

import math
import re

import numpy as np

from .policy import TabularPolicy
from .seqspace import SequenceSpace, Vocab

EXCLUDED = -1e4  # logit whose softmax mass underflows to exactly 0


def uniform_base(space: SequenceSpace, n_queries: int = 1) -> TabularPolicy:
    return TabularPolicy.uniform(space, n_queries)


def random_base(space: SequenceSpace, n_queries: int = 1, seed: int = 0, scale: float = 1.0) -> TabularPolicy:
    return TabularPolicy.random(space, n_queries, np.random.default_rng(seed), scale)


def constant_rate_base(space: SequenceSpace, c: float, n_queries: int = 1) -> TabularPolicy:
    """Every realizable token has log-probability ``c``.

    That forces ``m = exp(-c)`` equally likely tokens per step, so ``c`` must
    be ``-log m`` for an integer ``2 <= m <= vocab.size``.  EOS is always
    allowed; the remaining slots go to the lowest non-EOS ids.
    """
    m = round(math.exp(-c))
    if not 2 <= m <= space.vocab.size or abs(math.log(m) + c) > 1e-9:
        raise ValueError(f"constant rate {c} needs -log(m) for an integer 2 <= m <= {space.vocab.size}")
    allowed = [space.vocab.eos_id] + space.vocab.non_eos[: m - 1]
    row = np.full(space.vocab.size, EXCLUDED)
    row[allowed] = 0.0
    return TabularPolicy.from_function(space, n_queries, lambda q, s: row)


def _logits(probs) -> np.ndarray:
    return np.log(np.asarray(probs, dtype=float))


def two_mode_base(short_p: float = 0.9, long_p: float = 0.85, long_len: int = 8,
                  n_queries: int = 1) -> TabularPolicy:
    """Short low-confidence mode versus long high-confidence repetition.

    Tokens: 0 = ``a`` (short mode), 1 = ``r`` (the repeatable token),
    2 = EOS.  The root picks ``a`` with probability ``short_p`` and ``r``
    otherwise.  After ``a`` the model flips a coin between stopping and
    another ``a``.  Along the ``r`` chain, ``r`` repeats with probability
    ``long_p`` and EOS takes the rest.  Cross transitions (and EOS at the
    root) carry exactly zero mass.

    Trajectory-level sharpening favours the short ``[a, EOS]``; per-token
    averaging favours the all-``r`` trajectory of length ``long_len``.
    """
    if not 0 < short_p < 1 or not 0 < long_p < 1:
        raise ValueError("short_p and long_p must lie in (0, 1)")
    if long_len < 2:
        raise ValueError("long_len must be >= 2")
    space = SequenceSpace(Vocab(3), long_len)
    root = np.array([math.log(short_p), math.log(1 - short_p), EXCLUDED])
    coin = np.array([math.log(0.5), EXCLUDED, math.log(0.5)])
    repeat = np.array([EXCLUDED, math.log(long_p), math.log(1 - long_p)])

    def fn(q, s):
        if not s:
            return root
        return coin if s[0] == 0 else repeat

    return TabularPolicy.from_function(space, n_queries, fn)


def repeat_base(space: SequenceSpace, p_repeat: float = 0.9, repeat_id: int | None = None,
                n_queries: int = 1) -> TabularPolicy:
    """``repeat_id`` has probability ``p_repeat`` at every step; the rest share the remainder."""
    vocab = space.vocab
    r = vocab.non_eos[-1] if repeat_id is None else repeat_id
    probs = np.full(vocab.size, (1 - p_repeat) / (vocab.size - 1))
    probs[r] = p_repeat
    row = _logits(probs)
    return TabularPolicy.from_function(space, n_queries, lambda q, s: row)


def mismatch_instance() -> TabularPolicy:
    """Two-step universe where per-step temperature and trajectory power disagree.

    Tokens 0..3 = a, b, c, d; 4 = EOS; max length 2.  Root: a/b at 1/2 each.
    After a: c is certain.  After b: c/d at 1/2 each.  All other tokens carry
    exactly zero mass, leaving the support {ac: 1/2, bc: 1/4, bd: 1/4}.
    """
    space = SequenceSpace(Vocab(5), 2)

    def fn(q, s):
        row = np.full(5, EXCLUDED)
        if s == ():
            row[[0, 1]] = 0.0
        elif s == (0,):
            row[2] = 0.0
        elif s == (1,):
            row[[2, 3]] = 0.0
        else:
            row[4] = 0.0
        return row

    return TabularPolicy.from_function(space, 1, fn)


_SPEC = re.compile(r"^\s*([a-z-]+)\s*(?:\((.*)\))?\s*$")


def parse_base(text: str, vocab_size: int = 3, max_len: int = 4, n_queries: int = 1,
               marker_id: int | None = None) -> TabularPolicy:
    """Build a base from ``uniform``, ``constant-rate(c)``, ``random(seed)``,
    ``two-mode(short_p, long_p, long_len)``, ``repeat(p)`` or ``mismatch``.

    ``two-mode`` and ``mismatch`` fix their own vocabulary and length (and
    carry no marker).
    """
    m = _SPEC.match(text)
    if not m:
        raise ValueError(f"cannot parse base spec {text!r}")
    name = m.group(1)
    args = [a.strip() for a in m.group(2).split(",")] if m.group(2) else []
    space = SequenceSpace(Vocab(vocab_size, marker_id=marker_id), max_len)
    if name == "uniform" and not args:
        return uniform_base(space, n_queries)
    if name == "constant-rate" and len(args) == 1:
        return constant_rate_base(space, float(args[0]), n_queries)
    if name == "random" and len(args) in (1, 2):
        scale = float(args[1]) if len(args) == 2 else 1.0
        return random_base(space, n_queries, int(args[0]), scale)
    if name == "two-mode" and len(args) == 3:
        return two_mode_base(float(args[0]), float(args[1]), int(args[2]), n_queries)
    if name == "repeat" and len(args) == 1:
        return repeat_base(space, float(args[0]), n_queries=n_queries)
    if name == "mismatch" and not args:
        return mismatch_instance()
    raise ValueError(f"unknown base spec {text!r}")
