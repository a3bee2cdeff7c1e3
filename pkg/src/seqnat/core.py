"""Value types shared across the package.

Tables are plain ``float64`` numpy arrays of shape ``(T, V)``:

* a *logit table* holds unconstrained scores ``z``,
* a *prob table* holds one categorical distribution per row (``softmax(z)``),
* a *grad table* holds ``dL/dz`` for some scalar loss ``L``.

Sentences are 1-D integer arrays of token ids.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Rng = np.random.Generator

ROW_SUM_TOL = 1e-9


class InvalidInput(ValueError):
    """Raised when an operation receives data violating its preconditions."""


def make_rng(seed: int, *keys: int) -> Rng:
    """Counter-based generator (Philox) keyed by ``seed`` and optional stream keys.

    ``make_rng(s, a, b)`` streams are independent of ``make_rng(s, a, c)`` and
    bit-reproducible across platforms.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 2:
            raise InvalidInput("vocabulary needs at least 2 tokens")
        if len(set(tokens)) != len(tokens):
            raise InvalidInput("vocabulary tokens must be unique")
        object.__setattr__(self, "index", {tok: i for i, tok in enumerate(tokens)})

    @classmethod
    def of_size(cls, size: int, prefix: str = "w") -> "Vocabulary":
        return cls(tuple(f"{prefix}{i}" for i in range(size)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> np.ndarray:
        return np.array([self.index[w] for w in words], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def as_sentence(ids: Sequence[int] | np.ndarray, vocab_size: int | None = None) -> np.ndarray:
    """Validate and return ``ids`` as an int64 sentence array."""
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInput("sentence must be a non-empty 1-D id sequence")
    if vocab_size is not None and (arr.min() < 0 or arr.max() >= vocab_size):
        raise InvalidInput(f"token id out of range [0, {vocab_size})")
    return arr


def check_prob_table(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 2:
        raise InvalidInput(f"prob table must be T x V with T>=1, V>=2; got {p.shape}")
    if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
        raise InvalidInput("prob table entries must lie in [0, 1]")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
        raise InvalidInput("prob table rows must sum to 1")
    return p


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInput("logit table must be 2-D")
    if not np.all(np.isfinite(z)):
        raise InvalidInput("logit table contains non-finite values")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_index(p: np.ndarray, t: int, y: int) -> None:
    T, V = p.shape
    if not (0 <= t < T) or not (0 <= y < V):
        raise IndexError(f"(t={t}, y={y}) outside table of shape {p.shape}")


def dlogp_dz(p: np.ndarray, t: int, y: int) -> np.ndarray:
    """Row ``t`` of d log p_t(y) / dz, i.e. ``onehot(y) - p_t``."""
    _check_index(p, t, y)
    row = -p[t].copy()
    row[y] += 1.0
    return row


def dp_dz(p: np.ndarray, t: int, y: int) -> np.ndarray:
    """Row ``t`` of d p_t(y) / dz, i.e. ``p_t(y) * (onehot(y) - p_t)``."""
    return p[t, y] * dlogp_dz(p, t, y)


def weighted_dp_dz(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Sum over tokens of ``w[t, y] * dp_dz(p, t, y)``, for every row at once.

    Equals ``p * w - p * <p, w>`` row-wise (softmax Jacobian times ``w``).
    """
    pw = p * w
    return pw - p * pw.sum(axis=-1, keepdims=True)


def vector_to_logit_grad(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Chain ``dL/dp`` through a row-wise softmax to get ``dL/dz``."""
    return weighted_dp_dz(p, dp)


def sample_tokens(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw: ``u[..., t]`` picks a token from row ``t`` of ``cdf``."""
    V = cdf.shape[1]
    out = np.empty(u.shape, dtype=np.int64)
    for t in range(cdf.shape[0]):
        out[..., t] = np.searchsorted(cdf[t], u[..., t], side="right")
    np.minimum(out, V - 1, out=out)
    return out


def row_cdf(p: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=1)
    # zero-probability tail tokens must never be selected by u close to 1
    last = np.argmax(cdf >= cdf[:, -1:], axis=1)
    for t, j in enumerate(last):
        cdf[t, j:] = np.inf
    return cdf


def sample_sentences(p: np.ndarray, rng: Rng, size: int | tuple[int, ...] = ()) -> np.ndarray:
    """Draw independent sentences; output shape is ``size + (T,)``."""
    size = (size,) if isinstance(size, int) else tuple(size)
    u = rng.random(size + (p.shape[0],))
    return sample_tokens(row_cdf(p), u)


def sample_sentence(p: np.ndarray, rng: Rng) -> np.ndarray:
    return sample_sentences(check_prob_table(p), rng)


def argmax_decode(p: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the smallest id on ties
    return np.argmax(np.asarray(p), axis=1).astype(np.int64)


def one_hot_table(ids: Sequence[int] | np.ndarray, V: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((ids.size, V))
    out[np.arange(ids.size), ids] = 1.0
    return out


def all_sentences(T: int, V: int) -> np.ndarray:
    """Every sentence in ``V**T`` lexicographic order, shape ``(V**T, T)``."""
    idx = np.arange(V**T, dtype=np.int64)
    powers = V ** np.arange(T - 1, -1, -1, dtype=np.int64)
    return (idx[:, None] // powers[None, :]) % V


def sentence_probs(p: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """P(Y) under the position-factorized model, for each row of ``Y``."""
    T = p.shape[0]
    return np.prod(p[np.arange(T)[None, :], Y], axis=1)
