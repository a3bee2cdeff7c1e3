"""Sentence-level rewards on token-id sequences.

Each metric exists twice: a scalar function over Python sequences (``rouge2``,
``gleu``, ``sentence_bleu``) and a vectorized evaluator inside :class:`RewardFn`
that scores a whole ``(B, T)`` batch of equal-length hypotheses against one
cached reference.  Both count clipped n-gram matches, so any hypothesis token
absent from the reference can only ever contribute a non-match.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from typing import Callable, Sequence

import numpy as np

from .core import InvalidInput, Rng, as_sentence


class RewardKind(str, enum.Enum):
    BLEU = "bleu"
    GLEU = "gleu"
    ROUGE2 = "rouge2"

    @property
    def max_ngram_order(self) -> int:
        return 2 if self is RewardKind.ROUGE2 else 4

    @classmethod
    def parse(cls, name: str | "RewardKind") -> "RewardKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value == key:
                return kind
        raise InvalidInput(f"unknown reward {name!r}; valid: {', '.join(k.value for k in cls)}")


def ngram_counts(seq: Sequence[int], n: int) -> Counter:
    seq = [int(x) for x in seq]
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _clipped_matches(hyp: Sequence[int], ref: Sequence[int], n: int) -> int:
    h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
    return sum(min(c, r[g]) for g, c in h.items() if g in r)


def _nonempty(*sents):
    for s in sents:
        if len(s) == 0:
            raise InvalidInput("reward inputs must be non-empty sentences")


def rouge2(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Clipped bigram recall (unigram recall when the reference has one token)."""
    _nonempty(hyp, ref)
    n = 2 if len(ref) >= 2 else 1
    return _clipped_matches(hyp, ref, n) / (len(ref) - n + 1)


def gleu(hyp: Sequence[int], ref: Sequence[int], max_order: int = 4) -> float:
    _nonempty(hyp, ref)
    top = min(max_order, len(hyp), len(ref))
    matches = sum(_clipped_matches(hyp, ref, n) for n in range(1, top + 1))
    hyp_total = sum(len(hyp) - n + 1 for n in range(1, top + 1))
    ref_total = sum(len(ref) - n + 1 for n in range(1, top + 1))
    return min(matches / hyp_total, matches / ref_total)


def sentence_bleu(hyp: Sequence[int], ref: Sequence[int], max_order: int = 4) -> float:
    """Smoothed sentence BLEU.

    Orders >= 2 with zero clipped matches use (0 + 1) / (total + 1); non-zero
    counts are left raw so an exact match scores 1.
    """
    _nonempty(hyp, ref)
    log_sum = 0.0
    for n in range(1, max_order + 1):
        matches = _clipped_matches(hyp, ref, n)
        total = max(len(hyp) - n + 1, 0)
        if n == 1 and matches == 0:
            return 0.0
        if matches == 0:
            prec = 1.0 / (total + 1.0)
        else:
            prec = matches / total
        log_sum += math.log(prec)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum / max_order)


SCALAR_REWARDS: dict[RewardKind, Callable[[Sequence[int], Sequence[int]], float]] = {
    RewardKind.BLEU: sentence_bleu,
    RewardKind.GLEU: gleu,
    RewardKind.ROUGE2: rouge2,
}

# n-grams are packed into one int64 per window; ids must stay below this base
_CODE_BASE = 1 << 15


def _window_codes(Y: np.ndarray, n: int) -> np.ndarray:
    L = Y.shape[1] - n + 1
    codes = np.zeros((Y.shape[0], L), dtype=np.int64)
    for i in range(n):
        codes = codes * _CODE_BASE + Y[:, i:i + L]
    return codes


class RewardFn:
    """A reward bound to one reference, with a call counter.

    Every scored hypothesis (scalar or batched) adds one to :attr:`calls`.
    """

    def __init__(self, kind: RewardKind | str, reference: Sequence[int]):
        self.kind = RewardKind.parse(kind)
        self.reference = as_sentence(reference)
        if self.reference.max() >= _CODE_BASE:
            raise InvalidInput(f"token ids must be < {_CODE_BASE}")
        self.calls = 0
        ref = self.reference[None, :]
        self._ref_grams: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for n in range(1, self.kind.max_ngram_order + 1):
            if n > self.reference.size:
                break
            codes, counts = np.unique(_window_codes(ref, n)[0], return_counts=True)
            self._ref_grams[n] = (codes, counts)

    @property
    def reference_tokens(self) -> np.ndarray:
        """Distinct reference token ids, ascending."""
        return np.unique(self.reference)

    def __call__(self, hyp: Sequence[int]) -> float:
        return float(self.batch(np.asarray(hyp, dtype=np.int64)[None, :])[0])

    def _matches(self, Y: np.ndarray, n: int) -> np.ndarray:
        out = np.zeros(Y.shape[0])
        if n > Y.shape[1] or n not in self._ref_grams:
            return out
        codes = _window_codes(Y, n)
        for g, c in zip(*self._ref_grams[n]):
            out += np.minimum((codes == g).sum(axis=1), c)
        return out

    def batch(self, Y: np.ndarray) -> np.ndarray:
        """Score each row of an integer ``(B, T)`` array."""
        Y = np.asarray(Y, dtype=np.int64)
        if Y.ndim != 2 or Y.shape[1] == 0:
            raise InvalidInput("batch must be a (B, T) array with T >= 1")
        self.calls += Y.shape[0]
        T, R = Y.shape[1], self.reference.size
        if self.kind is RewardKind.ROUGE2:
            n = 2 if R >= 2 else 1
            return self._matches(Y, n) / (R - n + 1)
        if self.kind is RewardKind.GLEU:
            top = min(4, T, R)
            matches = sum(self._matches(Y, n) for n in range(1, top + 1))
            hyp_total = sum(T - n + 1 for n in range(1, top + 1))
            ref_total = sum(R - n + 1 for n in range(1, top + 1))
            return np.minimum(matches / hyp_total, matches / ref_total)
        log_sum = np.zeros(Y.shape[0])
        zero = np.zeros(Y.shape[0], dtype=bool)
        for n in range(1, 5):
            m = self._matches(Y, n)
            total = max(T - n + 1, 0)
            if n == 1:
                zero = m == 0
                prec = np.where(zero, 1.0, m / T)
            else:
                prec = np.where(m == 0, 1.0 / (total + 1.0), m / max(total, 1))
            log_sum += np.log(prec)
        bp = min(1.0, math.exp(1.0 - R / T))
        return np.where(zero, 0.0, bp * np.exp(log_sum / 4.0))


def is_reference_based_check(
    kind: RewardKind | str | Callable[[Sequence[int], Sequence[int]], float],
    ref: Sequence[int],
    vocab_size: int,
    trials: int,
    rng: Rng,
) -> bool:
    """Empirically test the out-of-reference substitution invariance.

    Each trial draws a random hypothesis that contains at least one token
    absent from ``ref``, swaps a random subset of its out-of-reference tokens
    for other out-of-reference tokens, and demands a bit-identical reward.
    """
    fn = SCALAR_REWARDS[RewardKind.parse(kind)] if isinstance(kind, (str, RewardKind)) else kind
    ref = [int(x) for x in ref]
    outside = np.setdiff1d(np.arange(vocab_size), ref)
    if outside.size < 2:
        raise InvalidInput("need at least 2 vocabulary tokens absent from the reference")
    for _ in range(trials):
        length = int(rng.integers(1, 2 * len(ref) + 2))
        hyp = rng.integers(0, vocab_size, size=length)
        hyp[rng.integers(0, length)] = rng.choice(outside)
        mask = np.isin(hyp, outside)
        swap = mask & (rng.random(length) < 0.5)
        if not swap.any():
            swap = mask
        alt = hyp.copy()
        for i in np.flatnonzero(swap):
            choices = outside[outside != hyp[i]]
            alt[i] = rng.choice(choices)
        if fn(hyp.tolist(), ref) != fn(alt.tolist(), ref):
            return False
    return True
