"""Toy non-autoregressive model with a hand-written backward pass.

Decoder position ``t`` of a length-``T`` output reads source position
``j(t) = floor(t * |src| / T)`` (uniform copy).  Its input is the pair

    [ src_embed[src[j]] + pos_src[j],  mean(src_embed[src]) + pos_tgt[t] ]

fed through ``tanh(x @ W1 + b1) @ W2 + b2`` to give logits.  Positions never
interact, so the output factorizes over positions.

Forward and backward run on a *batch* of (source, length) pairs by stacking
every output position of every item into one matrix.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .core import InvalidInput, Rng, softmax_rows

BLOCKS = ("src_embed", "pos_src", "pos_tgt", "W1", "b1", "W2", "b2")
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    src_embed: np.ndarray
    pos_src: np.ndarray
    pos_tgt: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    # bumped on every in-place update; caches from older generations are stale
    generation: int = field(default=0, compare=False)

    @classmethod
    def init(cls, v_src: int, v_tgt: int, d: int, h: int, max_len: int, rng: Rng) -> "ModelParams":
        def u(*shape):
            return rng.uniform(-0.1, 0.1, size=shape)

        return cls(src_embed=u(v_src, d), pos_src=u(max_len, d), pos_tgt=u(max_len, d),
                   W1=u(2 * d, h), b1=np.zeros(h), W2=u(h, v_tgt), b2=np.zeros(v_tgt))

    @property
    def dims(self) -> dict[str, int]:
        return {"v_src": self.src_embed.shape[0], "v_tgt": self.W2.shape[1],
                "d": self.src_embed.shape[1], "h": self.W1.shape[1], "max_len": self.pos_src.shape[0]}

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()}, generation=self.generation)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.blocks().items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in BLOCKS:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


ParamGrads = ModelParams


@dataclass
class ForwardCache:
    generation: int
    srcs: list[np.ndarray]
    lengths: list[int]
    item: np.ndarray        # owning batch item of each stacked position
    pos: np.ndarray         # target position t
    src_pos: np.ndarray     # copied source position j(t)
    src_tok: np.ndarray     # copied source token src[j(t)]
    x: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray

    def split(self, arr: np.ndarray) -> list[np.ndarray]:
        return np.split(arr, np.cumsum(self.lengths)[:-1])


def copy_alignment(src_len: int, T: int) -> np.ndarray:
    return (np.arange(T) * src_len) // T


def forward_batch(params: ModelParams, srcs: Sequence[Sequence[int]], lengths: Sequence[int]):
    """Logit tables for every (source, length) pair plus a cache for backward."""
    L_max = params.pos_src.shape[0]
    srcs = [np.asarray(s, dtype=np.int64) for s in srcs]
    lengths = [int(T) for T in lengths]
    items, pos, src_pos, src_tok, ctx = [], [], [], [], []
    for b, (src, T) in enumerate(zip(srcs, lengths)):
        if T < 1 or src.size == 0:
            raise InvalidInput("source and output length must be non-empty")
        if T > L_max or src.size > L_max:
            raise InvalidInput(f"length exceeds max_len={L_max}")
        j = copy_alignment(src.size, T)
        items.append(np.full(T, b))
        pos.append(np.arange(T))
        src_pos.append(j)
        src_tok.append(src[j])
        ctx.append(np.broadcast_to(params.src_embed[src].mean(axis=0), (T, params.src_embed.shape[1])))
    item = np.concatenate(items)
    pos = np.concatenate(pos)
    src_pos = np.concatenate(src_pos)
    src_tok = np.concatenate(src_tok)
    copy_in = params.src_embed[src_tok] + params.pos_src[src_pos]
    ctx_in = np.concatenate(ctx) + params.pos_tgt[pos]
    x = np.concatenate([copy_in, ctx_in], axis=1)
    hidden = np.tanh(x @ params.W1 + params.b1)
    logits = hidden @ params.W2 + params.b2
    cache = ForwardCache(params.generation, srcs, lengths, item, pos, src_pos, src_tok, x, hidden, logits)
    return cache.split(logits), cache


def forward(params: ModelParams, src: Sequence[int], T: int):
    tables, cache = forward_batch(params, [src], [T])
    return tables[0], cache


def backward(params: ModelParams, cache: ForwardCache, dlogits) -> ModelParams:
    """Parameter gradients for upstream logit gradients (one table per item, or stacked)."""
    if cache.generation != params.generation:
        raise InvalidInput("stale forward cache: parameters changed since the forward pass")
    g = np.concatenate(dlogits, axis=0) if isinstance(dlogits, (list, tuple)) else np.asarray(dlogits)
    if g.shape != cache.logits.shape:
        raise InvalidInput(f"dlogits shape {g.shape} != logits shape {cache.logits.shape}")
    d = params.src_embed.shape[1]
    grads = params.zeros_like()
    grads.W2 = cache.hidden.T @ g
    grads.b2 = g.sum(axis=0)
    da = (g @ params.W2.T) * (1.0 - cache.hidden**2)
    grads.W1 = cache.x.T @ da
    grads.b1 = da.sum(axis=0)
    dx = da @ params.W1.T
    d_copy, d_ctx = dx[:, :d], dx[:, d:]
    np.add.at(grads.src_embed, cache.src_tok, d_copy)
    np.add.at(grads.pos_src, cache.src_pos, d_copy)
    np.add.at(grads.pos_tgt, cache.pos, d_ctx)
    # the context mean spreads each item's summed context gradient evenly over its source tokens
    ctx_sum = np.zeros((len(cache.srcs), d))
    np.add.at(ctx_sum, cache.item, d_ctx)
    for b, src in enumerate(cache.srcs):
        np.add.at(grads.src_embed, src, ctx_sum[b] / src.size)
    return grads


class CrossEntropy(NamedTuple):
    loss: float
    loss_per_token: float
    grad: np.ndarray
    clamped: int


PROB_FLOOR = 1e-300


def cross_entropy(p: np.ndarray, ref: Sequence[int]) -> CrossEntropy:
    p = np.asarray(p, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.int64)
    T = p.shape[0]
    if ref.shape != (T,):
        raise InvalidInput(f"reference length {ref.size} != output length {T}")
    picked = p[np.arange(T), ref]
    clamped = int((picked < PROB_FLOOR).sum())
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())
    grad = p.copy()
    grad[np.arange(T), ref] -= 1.0
    return CrossEntropy(loss, loss / T, grad, clamped)


def predict_probs(params: ModelParams, srcs: Sequence[Sequence[int]], lengths: Sequence[int] | None = None):
    if lengths is None:
        lengths = [len(s) for s in srcs]
    tables, _ = forward_batch(params, srcs, lengths)
    return [softmax_rows(z) for z in tables]


def save_checkpoint(params: ModelParams, path: str | Path, meta: dict | None = None) -> str:
    """Write an ``.npz`` checkpoint; returns the parameter digest stored in it."""
    digest = params.digest()
    header = {"format": "seqnat-checkpoint", "version": CHECKPOINT_VERSION, "dims": params.dims,
              "blocks": list(BLOCKS), "sha256": digest, "meta": meta or {}}
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header, sort_keys=True)), **params.blocks())
    Path(path).write_bytes(buf.getvalue())
    return digest


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != "seqnat-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
            raise InvalidInput(f"unsupported checkpoint format in {path}")
        params = ModelParams(**{name: data[name].copy() for name in BLOCKS})
    if params.digest() != header["sha256"]:
        raise InvalidInput(f"checkpoint checksum mismatch in {path}")
    return params, header
