"""Bag-of-words and bag-of-ngrams objectives for position-factorized outputs.

The model's expected n-gram count for a gram ``g`` is the sliding-window sum
``sum_t prod_i p_{t+i}(g_i)``, which is exact because positions are
independent.  Only n-grams that occur in the reference can contribute a
match, so the L1 distance between the model and reference bags needs just
those entries.

All losses return gradients with respect to logits.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import InvalidInput, all_sentences, check_prob_table, sentence_probs, vector_to_logit_grad

Gram = tuple[int, ...]


@dataclass
class SparseNgramCounts:
    order: int
    entries: dict[Gram, float]

    def __getitem__(self, g: Gram) -> float:
        return self.entries.get(tuple(g), 0.0)

    def total(self) -> float:
        return float(sum(self.entries.values()))


@dataclass
class BonLossReport:
    loss: float
    match_total: float
    grad: np.ndarray


def bon_count(Y: Sequence[int], N: int) -> SparseNgramCounts:
    Y = [int(y) for y in Y]
    if N < 1 or len(Y) < N:
        raise InvalidInput(f"sentence of length {len(Y)} has no {N}-grams")
    entries: dict[Gram, float] = {}
    for t in range(len(Y) - N + 1):
        g = tuple(Y[t:t + N])
        entries[g] = entries.get(g, 0.0) + 1.0
    return SparseNgramCounts(N, entries)


def _window_probs(p: np.ndarray, g: Gram) -> np.ndarray:
    """Matrix ``F[t, i] = p_{t+i}(g_i)`` over every window start ``t``."""
    N = len(g)
    L = p.shape[0] - N + 1
    return np.stack([p[i:i + L, g[i]] for i in range(N)], axis=1)


def bon_theta_entry(p: np.ndarray, g: Gram) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] < len(g):
        raise InvalidInput(f"T={p.shape[0]} is shorter than the {len(g)}-gram")
    return float(_window_probs(p, tuple(g)).prod(axis=1).sum())


def bon_theta_expected_oracle(p: np.ndarray, N: int) -> SparseNgramCounts:
    """Expected bag of N-grams by enumerating all sentences (test oracle)."""
    p = check_prob_table(p)
    T, V = p.shape
    if V**T > 10**6:
        raise InvalidInput(f"search space {V}^{T} too large to enumerate")
    if T < N:
        raise InvalidInput(f"T={T} < N={N}")
    Y = all_sentences(T, V)
    P = sentence_probs(p, Y)
    entries = {g: 0.0 for g in itertools.product(range(V), repeat=N)}
    for t in range(T - N + 1):
        for row, prob in zip(map(tuple, Y[:, t:t + N]), P):
            entries[row] += prob
    return SparseNgramCounts(N, entries)


def bow_vector(p: np.ndarray) -> np.ndarray:
    return np.asarray(p, dtype=np.float64).sum(axis=0)


def _check_lengths(p: np.ndarray, ref: Sequence[int]) -> np.ndarray:
    ref = np.asarray(ref, dtype=np.int64)
    if ref.ndim != 1 or ref.size != p.shape[0]:
        raise InvalidInput(f"reference length {ref.size} != output length {p.shape[0]}")
    if ref.min() < 0 or ref.max() >= p.shape[1]:
        raise InvalidInput("reference id outside the vocabulary")
    return ref


@dataclass
class BowLosses:
    l1: float
    l2: float
    cos: float
    grad_l1: np.ndarray
    grad_l2: np.ndarray
    grad_cos: np.ndarray


def bow_losses(p: np.ndarray, ref: Sequence[int]) -> BowLosses:
    """BoW-L1 / 2T, BoW-L2 / 2T and 1 - cosine, with logit gradients."""
    p = np.asarray(p, dtype=np.float64)
    ref = _check_lengths(p, ref)
    T, V = p.shape
    w = bow_vector(p)
    c = np.bincount(ref, minlength=V).astype(np.float64)
    d = w - c

    l1 = np.abs(d).sum() / (2 * T)
    dw_l1 = np.sign(d) / (2 * T)

    norm_d = np.linalg.norm(d)
    l2 = norm_d / (2 * T)
    dw_l2 = d / (norm_d * 2 * T) if norm_d > 0 else np.zeros(V)

    nw, nc = np.linalg.norm(w), np.linalg.norm(c)
    assert nw > 0 and nc > 0
    dot = w @ c
    cos = 1.0 - dot / (nw * nc)
    dw_cos = -(c / (nw * nc) - dot * w / (nw**3 * nc))

    # every position contributes p_t to the bag, so dL/dp_t = dL/dw for all t
    def lift(dw):
        return vector_to_logit_grad(p, np.broadcast_to(dw, p.shape))

    return BowLosses(float(l1), float(l2), float(cos), lift(dw_l1), lift(dw_l2), lift(dw_cos))


def min_subgradient_policy(a: float, b: float) -> bool:
    """True when the gradient of ``min(a, b)`` should flow through ``a`` (ties included)."""
    return a <= b


def bon_l1_loss(p: np.ndarray, ref: Sequence[int], N: int) -> BonLossReport:
    """Normalized BoN-L1 distance ``(T-N+1 - match) / (T-N+1)`` and its logit gradient."""
    p = np.asarray(p, dtype=np.float64)
    ref = _check_lengths(p, ref)
    T, V = p.shape
    if T < N:
        raise InvalidInput(f"T={T} < N={N}")
    M = T - N + 1
    ref_bag = bon_count(ref, N)
    match = 0.0
    dp = np.zeros_like(p)
    for g in sorted(ref_bag.entries):
        F = _window_probs(p, g)
        theta = F.prod(axis=1).sum()
        target = ref_bag.entries[g]
        if not min_subgradient_policy(theta, target):
            match += target
            continue
        match += theta
        L = F.shape[0]
        for i in range(N):
            # product over the other window members, without dividing by F[:, i]
            others = np.prod(np.delete(F, i, axis=1), axis=1) if N > 1 else np.ones(L)
            dp[i:i + L, g[i]] += others
    loss = (M - match) / M
    grad = vector_to_logit_grad(p, -dp / M)
    return BonLossReport(loss=float(loss), match_total=float(match), grad=grad)


def dense_bon_l1(p: np.ndarray, ref: Sequence[int], N: int) -> float:
    """Unnormalized L1 distance over all V**N grams via enumeration (test oracle)."""
    theta = bon_theta_expected_oracle(p, N)
    ref_bag = bon_count(ref, N)
    return float(sum(abs(v - ref_bag[g]) for g, v in theta.entries.items()))
