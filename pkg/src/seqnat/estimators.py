"""Gradient estimators for the negative expected reward of a position-factorized model.

All estimators return gradients with respect to the *logits* of the model
output (the softmax Jacobian is folded in), so every result is directly
comparable with :func:`exact_gradient_oracle`.

Each estimator is implemented once, vectorized over ``runs`` independent
invocations; the public single-invocation functions call it with ``runs=1``.
Step rewards come from a pluggable source: :class:`MonteCarloStepReward`
(the sampling estimate) or :class:`ExactStepReward` (full enumeration, for
tests).
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import (
    InvalidInput,
    Rng,
    all_sentences,
    check_prob_table,
    row_cdf,
    sample_sentences,
    sample_tokens,
    sentence_probs,
    weighted_dp_dz,
)
from .rewards import RewardFn, RewardKind

ENUMERATION_LIMIT = 10**6
RESIDUAL_EPS = 1e-12


class Method(str, enum.Enum):
    BASE = "base"
    STEP = "step"
    TOPK = "topk"
    TRAVERSE_REF = "traverse_ref"

    @classmethod
    def parse(cls, name: str | "Method") -> "Method":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"reinforce_base": "base", "reinforce_step": "step", "reinforce_topk": "topk",
                   "traverseref": "traverse_ref", "tr": "traverse_ref"}
        key = aliases.get(key, key)
        for m in cls:
            if m.value == key:
                return m
        raise InvalidInput(f"unknown estimator {name!r}; valid: {', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class EstimatorConfig:
    method: Method = Method.TRAVERSE_REF
    n_samples: int = 10
    k: int = 5
    reward: RewardKind = RewardKind.ROUGE2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "reward", RewardKind.parse(self.reward))
        if self.n_samples < 1:
            raise InvalidInput("n_samples must be >= 1")
        if self.k < 1:
            raise InvalidInput("k must be >= 1")


@dataclass
class EstimatorReport:
    grad: np.ndarray
    reward_calls: int
    wall_time: float


@dataclass
class TopkPartition:
    """Per-position top-k split of a prob table.

    ``top[t]`` holds the k highest-probability ids (ties to smaller id),
    ``mass[t]`` their total probability and ``residual[t]`` the renormalized
    distribution over the remaining ids (all zero when ``empty[t]``).
    """

    top: np.ndarray
    mass: np.ndarray
    residual: np.ndarray
    empty: np.ndarray = field(default=None)


def _check_enumerable(V: int, T: int) -> None:
    if V**T > ENUMERATION_LIMIT:
        raise InvalidInput(f"search space V^T = {V}^{T} exceeds the enumeration limit {ENUMERATION_LIMIT}")


# ---------------------------------------------------------------------------
# exact oracles


def exact_gradient_oracle(p: np.ndarray, reward: RewardFn) -> np.ndarray:
    """dL/dz of L = -sum_Y P(Y) r(Y), by enumerating every sentence."""
    p = check_prob_table(p)
    T, V = p.shape
    _check_enumerable(V, T)
    Y = all_sentences(T, V)
    weight = sentence_probs(p, Y) * reward.batch(Y)
    # dP(Y)/dz_{t,j} = P(Y) * (1{y_t = j} - p_t(j))
    total = weight.sum()
    grad = np.empty((T, V))
    for t in range(T):
        grad[t] = -(np.bincount(Y[:, t], weights=weight, minlength=V) - p[t] * total)
    return grad


def exact_step_reward(p: np.ndarray, reward: RewardFn, t: int, y: int) -> float:
    """E[r(Y) | y_t = y] by enumerating the other T-1 positions."""
    p = check_prob_table(p)
    T, V = p.shape
    if not (0 <= t < T and 0 <= y < V):
        raise IndexError(f"(t={t}, y={y}) outside table of shape {p.shape}")
    _check_enumerable(V, T - 1)
    rest = all_sentences(T - 1, V) if T > 1 else np.zeros((1, 0), dtype=np.int64)
    Y = np.insert(rest, t, y, axis=1)
    others = np.delete(np.arange(T), t)
    w = np.prod(p[others[None, :], rest], axis=1) if T > 1 else np.ones(1)
    return float(np.dot(w, reward.batch(Y)))


def exact_step_reward_table(p: np.ndarray, reward: RewardFn) -> np.ndarray:
    T, V = p.shape
    return np.array([[exact_step_reward(p, reward, t, y) for y in range(V)] for t in range(T)])


# ---------------------------------------------------------------------------
# step-reward sources


class StepRewardSource(Protocol):
    def __call__(self, positions: np.ndarray, tokens: np.ndarray) -> np.ndarray: ...


class MonteCarloStepReward:
    """Sampling estimate of r(y_t): mean reward of ``n_samples`` completions.

    Each query ``(t, y)`` costs exactly ``n_samples`` reward calls.  Queries
    are answered in the order given, drawing from one rng stream.
    """

    def __init__(self, p: np.ndarray, reward: RewardFn, n_samples: int, rng: Rng):
        self.p, self.reward, self.n, self.rng = p, reward, n_samples, rng
        self.cdf = row_cdf(p)

    def __call__(self, positions: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        shape = np.shape(positions)
        pos = np.ravel(positions)
        tok = np.ravel(tokens)
        T = self.p.shape[0]
        u = self.rng.random((pos.size, self.n, T))
        Y = sample_tokens(self.cdf, u)
        Y[np.arange(pos.size), :, pos] = tok[:, None]
        r = self.reward.batch(Y.reshape(-1, T)).reshape(pos.size, self.n)
        return r.mean(axis=1).reshape(shape)


class ExactStepReward:
    """Exact step rewards from a precomputed enumeration table."""

    def __init__(self, p: np.ndarray, reward: RewardFn):
        self.table = exact_step_reward_table(p, reward)

    def __call__(self, positions: np.ndarray, tokens: np.ndarray) -> np.ndarray:
        return self.table[positions, tokens]


def estimate_step_reward(p: np.ndarray, reward: RewardFn, t: int, y: int,
                         n_samples: int, rng: Rng) -> float:
    src = MonteCarloStepReward(check_prob_table(p), reward, n_samples, rng)
    return float(src(np.array([t]), np.array([y]))[0])


# ---------------------------------------------------------------------------
# batched estimator kernels, each returning an array of shape (runs, T, V)


def _score_function(p: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d log p_t(y_t) / dz for each sampled row; shape (runs, T, V)."""
    runs, T = Y.shape
    g = np.broadcast_to(-p, (runs,) + p.shape).copy()
    g[np.arange(runs)[:, None], np.arange(T)[None, :], Y] += 1.0
    return g


def _base(p, reward, rng, runs):
    Y = sample_sentences(p, rng, runs)
    r = reward.batch(Y)
    return -r[:, None, None] * _score_function(p, Y)


def _step(p, reward, rng, runs, step_reward):
    T = p.shape[0]
    Y = sample_sentences(p, rng, runs)
    R = step_reward(np.broadcast_to(np.arange(T), Y.shape), Y)
    return -R[:, :, None] * _score_function(p, Y)


def build_topk_partition(p: np.ndarray, k: int) -> TopkPartition:
    T, V = p.shape
    if not 1 <= k <= V:
        raise InvalidInput(f"k must lie in [1, {V}]")
    # stable sort on -p keeps smaller ids first among equal probabilities
    order = np.argsort(-p, axis=1, kind="stable")
    top = np.sort(order[:, :k], axis=1)
    mass = np.take_along_axis(p, top, axis=1).sum(axis=1)
    residual = p.copy()
    np.put_along_axis(residual, top, 0.0, axis=1)
    empty = (1.0 - mass) < RESIDUAL_EPS
    left = residual.sum(axis=1)
    for t in range(T):
        if empty[t] or left[t] <= 0:
            residual[t] = 0.0
            empty[t] = True
        else:
            residual[t] /= left[t]
    return TopkPartition(top=top, mass=mass, residual=residual, empty=empty)


def _topk(p, reward, rng, runs, step_reward, k):
    T, V = p.shape
    part = build_topk_partition(p, k)
    live = np.flatnonzero(~part.empty)
    grads = np.zeros((runs, T, V))
    for t in range(T):
        w = np.zeros((runs, V))
        r_top = step_reward(np.full((runs, k), t), np.broadcast_to(part.top[t], (runs, k)))
        w[:, part.top[t]] = r_top
        grads[:, t] = -weighted_dp_dz(p[t][None, :], w)
        if t in live:
            cdf = row_cdf(part.residual[t][None, :])
            y = sample_tokens(cdf, rng.random((runs, 1)))[:, 0]
            r = step_reward(np.full(runs, t), y)
            score = -np.broadcast_to(p[t], (runs, V)).copy()
            score[np.arange(runs), y] += 1.0
            grads[:, t] -= (1.0 - part.mass[t]) * r[:, None] * score
    return grads


def _traverse_ref(p, reward, rng, runs, step_reward):
    T, V = p.shape
    ref_tokens = reward.reference_tokens
    ref_tokens = ref_tokens[ref_tokens < V]
    outside = np.setdiff1d(np.arange(V), ref_tokens)
    grads = np.empty((runs, T, V))
    # one representative out-of-reference word per invocation, drawn before the position loop
    w_tok = outside[rng.integers(0, outside.size, size=runs)] if outside.size else None
    for t in range(T):
        cands = np.broadcast_to(ref_tokens, (runs, ref_tokens.size))
        if w_tok is not None:
            cands = np.concatenate([cands, w_tok[:, None]], axis=1)
        R = step_reward(np.full(cands.shape, t), cands)
        w = np.empty((runs, V))
        if w_tok is not None:
            w[:] = R[:, -1:]
        w[:, ref_tokens] = R[:, :ref_tokens.size]
        grads[:, t] = -weighted_dp_dz(p[t][None, :], w)
    return grads


def _check_traverse_ref(reward: RewardFn) -> None:
    if not isinstance(getattr(reward, "kind", None), RewardKind):
        raise InvalidInput("traverse_ref requires a reference-based reward (bleu, gleu, rouge2)")


def sample_gradients(p: np.ndarray, reward: RewardFn, cfg: EstimatorConfig, rng: Rng,
                     runs: int = 1, exact_step: bool = False, chunk: int = 20000) -> np.ndarray:
    """``runs`` independent estimates stacked into an array of shape (runs, T, V).

    With ``exact_step=True`` the step rewards are computed by enumeration
    instead of by sampling completions (no reward calls are made for them beyond
    building the table).
    """
    p = check_prob_table(p)
    method = Method.parse(cfg.method)
    if method is Method.TOPK and cfg.k > p.shape[1]:
        raise InvalidInput(f"k={cfg.k} exceeds vocabulary size {p.shape[1]}")
    if method is Method.TRAVERSE_REF:
        _check_traverse_ref(reward)
    exact = ExactStepReward(p, reward) if exact_step and method is not Method.BASE else None
    out = []
    done = 0
    while done < runs:
        m = min(chunk, runs - done)
        src = exact or MonteCarloStepReward(p, reward, cfg.n_samples, rng)
        if method is Method.BASE:
            out.append(_base(p, reward, rng, m))
        elif method is Method.STEP:
            out.append(_step(p, reward, rng, m, src))
        elif method is Method.TOPK:
            out.append(_topk(p, reward, rng, m, src, cfg.k))
        else:
            out.append(_traverse_ref(p, reward, rng, m, src))
        done += m
    return np.concatenate(out, axis=0)


def expected_reward_calls(p: np.ndarray, reward: RewardFn, cfg: EstimatorConfig) -> int:
    """Closed-form reward-call count of one invocation of ``cfg.method``."""
    T, V = np.shape(p)
    n = cfg.n_samples
    method = Method.parse(cfg.method)
    if method is Method.BASE:
        return 1
    if method is Method.STEP:
        return n * T
    if method is Method.TOPK:
        live = int((~build_topk_partition(np.asarray(p), cfg.k).empty).sum())
        return n * (cfg.k * T + live)
    ref = reward.reference_tokens
    n_ref = int((ref < V).sum())
    has_outside = n_ref < V
    return n * (n_ref + int(has_outside)) * T


def run_estimator(p: np.ndarray, reward: RewardFn, cfg: EstimatorConfig, rng: Rng,
                  exact_step: bool = False) -> EstimatorReport:
    start_calls = reward.calls
    t0 = time.perf_counter()
    grad = sample_gradients(p, reward, cfg, rng, runs=1, exact_step=exact_step)[0]
    return EstimatorReport(grad=grad, reward_calls=reward.calls - start_calls,
                           wall_time=time.perf_counter() - t0)


def reinforce_base(p: np.ndarray, reward: RewardFn, rng: Rng) -> EstimatorReport:
    return run_estimator(p, reward, EstimatorConfig(method=Method.BASE), rng)


def reinforce_step(p: np.ndarray, reward: RewardFn, cfg: EstimatorConfig, rng: Rng,
                   exact_step: bool = False) -> EstimatorReport:
    return run_estimator(p, reward, _with_method(cfg, Method.STEP), rng, exact_step)


def reinforce_topk(p: np.ndarray, reward: RewardFn, cfg: EstimatorConfig, rng: Rng,
                   exact_step: bool = False) -> EstimatorReport:
    return run_estimator(p, reward, _with_method(cfg, Method.TOPK), rng, exact_step)


def traverse_ref(p: np.ndarray, reward: RewardFn, cfg: EstimatorConfig, rng: Rng,
                 exact_step: bool = False) -> EstimatorReport:
    return run_estimator(p, reward, _with_method(cfg, Method.TRAVERSE_REF), rng, exact_step)


def _with_method(cfg: EstimatorConfig, method: Method) -> EstimatorConfig:
    return cfg if cfg.method is method else EstimatorConfig(
        method=method, n_samples=cfg.n_samples, k=cfg.k, reward=cfg.reward, seed=cfg.seed)


# ---------------------------------------------------------------------------
# variance bench


@dataclass
class BenchResult:
    method: Method
    k: int
    n_samples: int
    runs: int
    mean_grad: np.ndarray
    total_variance: float
    mse_vs_oracle: float | None
    reward_calls: int
    wall_time: float


def estimator_variance_bench(p: np.ndarray, reward: RewardFn, cfgs: Sequence[EstimatorConfig],
                             runs: int, rng: Rng) -> list[BenchResult]:
    """Run each configuration ``runs`` times; report spread and error against the oracle.

    ``total_variance`` sums the per-component sample variance over the grad
    table; ``mse_vs_oracle`` is the mean squared difference between the mean
    estimate and the exact gradient (``None`` when enumeration is infeasible).
    ``reward_calls`` is per invocation.
    """
    p = check_prob_table(p)
    T, V = p.shape
    oracle = exact_gradient_oracle(p, reward) if V**T <= ENUMERATION_LIMIT else None
    results = []
    for cfg in cfgs:
        before = reward.calls
        t0 = time.perf_counter()
        G = sample_gradients(p, reward, cfg, rng, runs=runs)
        elapsed = time.perf_counter() - t0
        mean = G.mean(axis=0)
        var = G.var(axis=0, ddof=1).sum() if runs > 1 else 0.0
        mse = float(np.mean((mean - oracle) ** 2)) if oracle is not None else None
        results.append(BenchResult(
            method=cfg.method, k=cfg.k, n_samples=cfg.n_samples, runs=runs, mean_grad=mean,
            total_variance=float(var), mse_vs_oracle=mse,
            reward_calls=(reward.calls - before) // runs, wall_time=elapsed))
    return results


def canonical_instance(V: int = 8, T: int = 4, peak: float = 3.0, seed: int = 0):
    """Peaked toy prob table and its reference ``[0, 1, ..., T-1]``.

    Each row puts a logit bonus ``peak`` on the reference token over Gaussian
    noise, so the reference token dominates but every token keeps some mass.
    """
    from .core import make_rng, softmax_rows

    rng = make_rng(seed)
    ref = np.arange(T) % V
    z = rng.normal(size=(T, V))
    z[np.arange(T), ref] += peak
    return softmax_rows(z), ref
