"""Staged training (word-level, bag-of-ngrams, reinforcement), evaluation and loss correlation."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..bon import bon_l1_loss, bow_losses
from ..core import InvalidInput, argmax_decode, make_rng, softmax_rows
from ..estimators import EstimatorConfig, Method, sample_gradients
from ..model import ModelParams, backward, cross_entropy, forward_batch, predict_probs, save_checkpoint
from ..rewards import SCALAR_REWARDS, RewardFn, RewardKind, gleu
from .optim import Adam
from .tasks import Corpus, Pair

log = logging.getLogger(__name__)

OBJECTIVES = ("ce", "bon", "bow", "rl")
BOW_METRICS = ("l1", "l2", "cos")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    objective: str
    steps: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    ngram: int = 2
    bow_metric: str = "l1"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise InvalidInput(f"unknown objective {self.objective!r}; valid: {', '.join(OBJECTIVES)}")
        if self.steps <= 0:
            raise InvalidInput("stage steps must be > 0")
        if self.batch_size <= 0:
            raise InvalidInput("batch size must be > 0")
        if self.bow_metric not in BOW_METRICS:
            raise InvalidInput(f"unknown bow metric {self.bow_metric!r}; valid: {', '.join(BOW_METRICS)}")

    @property
    def label(self) -> str:
        if self.objective == "bon":
            return f"bon:{self.ngram}"
        if self.objective == "bow":
            return f"bow:{self.bow_metric}"
        if self.objective == "rl":
            return f"rl:{self.estimator.method.value}"
        return "ce"


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise InvalidInput("schedule needs at least one stage")

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)


def _broadcast(values, n: int, name: str) -> list:
    values = list(values) if isinstance(values, (list, tuple)) else [values]
    if len(values) == 1:
        values = values * n
    if len(values) != n:
        raise InvalidInput(f"{name} lists {len(values)} values for {n} stages")
    return values


def parse_strategy(strategy: str, steps, batch_size=32, learning_rate=1e-3,
                   n_samples: int = 10, k: int = 5, reward: str = "rouge2") -> StageSchedule:
    """Parse ``"ce,bon:2,rl:traverse_ref"``-style strategy strings.

    ``steps``, ``batch_size`` and ``learning_rate`` are scalars or one value per stage.
    """
    parts = [s.strip() for s in strategy.split(",") if s.strip()]
    if not parts:
        raise InvalidInput("empty strategy")
    for part in parts:
        name, _, arg = part.partition(":")
        if name.lower() not in OBJECTIVES:
            raise InvalidInput(f"unknown objective {name!r}; valid: {', '.join(OBJECTIVES)}")
        if name.lower() == "rl":
            Method.parse(arg or "traverse_ref")
    steps = _broadcast(steps, len(parts), "steps")
    batch_size = _broadcast(batch_size, len(parts), "batch_size")
    learning_rate = _broadcast(learning_rate, len(parts), "learning_rate")
    stages = []
    for part, st, bs, lr in zip(parts, steps, batch_size, learning_rate):
        name, _, arg = part.partition(":")
        name = name.lower()
        kw = dict(steps=int(st), batch_size=int(bs), learning_rate=float(lr))
        if name == "ce":
            stages.append(Stage("ce", **kw))
        elif name == "bon":
            stages.append(Stage("bon", ngram=int(arg or 2), **kw))
        elif name == "bow":
            stages.append(Stage("bow", bow_metric=(arg or "l1").lower(), **kw))
        elif name == "rl":
            cfg = EstimatorConfig(method=Method.parse(arg or "traverse_ref"), n_samples=n_samples,
                                  k=k, reward=RewardKind.parse(reward))
            stages.append(Stage("rl", estimator=cfg, **kw))
        else:
            raise InvalidInput(f"unknown objective {name!r}; valid: {', '.join(OBJECTIVES)}")
    return StageSchedule(tuple(stages))


LOG_FIELDS = ("step", "stage", "objective", "loss", "val_gleu", "val_bleu", "reward_calls_cum")


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    stage_digests: list[str] = field(default_factory=list)
    reward_calls: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if row.get(k) is None else _fmt(row[k])) for k in LOG_FIELDS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _item_grad(stage: Stage, p: np.ndarray, ref: np.ndarray, seed: int, key: tuple[int, ...]):
    """(loss, dlogits, reward_calls) for one batch item under the stage objective."""
    if stage.objective == "ce":
        ce = cross_entropy(p, ref)
        return ce.loss_per_token, ce.grad, 0
    if stage.objective == "bon":
        n = min(stage.ngram, ref.size)
        rep = bon_l1_loss(p, ref, n)
        return rep.loss, rep.grad, 0
    if stage.objective == "bow":
        res = bow_losses(p, ref)
        return getattr(res, stage.bow_metric), getattr(res, f"grad_{stage.bow_metric}"), 0
    cfg = stage.estimator
    if cfg.method is Method.TOPK and cfg.k > p.shape[1]:
        cfg = EstimatorConfig(method=cfg.method, n_samples=cfg.n_samples, k=p.shape[1], reward=cfg.reward)
    reward = RewardFn(cfg.reward, ref)
    grad = sample_gradients(p, reward, cfg, make_rng(seed, *key), runs=1)[0]
    # logged value only; scored outside the counted reward so call accounting stays exact
    loss = -SCALAR_REWARDS[cfg.reward](argmax_decode(p).tolist(), ref.tolist())
    return loss, grad, reward.calls


def train(corpus: Corpus, params: ModelParams, schedule: StageSchedule, seed: int = 0, *,
          eval_every: int = 0, eval_limit: int = 200, threads: int = 1,
          checkpoint_dir: str | Path | None = None, start_stage: int = 0,
          log_every: int = 1) -> tuple[ModelParams, TrainingLog]:
    """Run the stages in order, updating ``params`` in place.

    Randomness for stage ``s`` step ``i`` comes from the stream
    ``make_rng(seed, s, i, ...)``, so resuming at a stage boundary from that
    stage's checkpoint reproduces an uninterrupted run exactly.  Each stage
    starts a fresh optimizer with its own warmup.
    """
    train_pairs = corpus.train
    if not train_pairs:
        raise InvalidInput("empty training split")
    tlog = TrainingLog()
    global_step = sum(s.steps for s in schedule.stages[:start_stage])
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for s_idx, stage in enumerate(schedule.stages):
            if s_idx < start_stage:
                continue
            tlog.stage_digests.append(params.digest())
            opt = Adam(lr=stage.learning_rate, total_steps=stage.steps)
            for i in range(stage.steps):
                global_step += 1
                rng = make_rng(seed, s_idx, i, 0)
                idx = rng.integers(0, len(train_pairs), size=stage.batch_size)
                batch = [train_pairs[j] for j in idx]
                tables, cache = forward_batch(params, [s for s, _ in batch], [r.size for _, r in batch])
                probs = [softmax_rows(z) for z in tables]
                jobs = [(stage, p, r, seed, (s_idx, i, b + 1)) for b, (p, (_, r)) in enumerate(zip(probs, batch))]
                results = list(pool.map(lambda a: _item_grad(*a), jobs)) if pool else [_item_grad(*a) for a in jobs]
                B = len(batch)
                loss = sum(r[0] for r in results) / B
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at stage {s_idx} step {i}")
                dlogits = [r[1] / B for r in results]
                tlog.reward_calls += sum(r[2] for r in results)
                grads = backward(params, cache, dlogits)
                opt.step(params, grads)
                row = {"step": global_step, "stage": s_idx, "objective": stage.label, "loss": loss,
                       "val_gleu": None, "val_bleu": None, "reward_calls_cum": tlog.reward_calls}
                last = i == stage.steps - 1
                if (eval_every and (i + 1) % eval_every == 0) or (last and eval_every):
                    scores = evaluate(params, corpus.valid[:eval_limit], [RewardKind.GLEU, RewardKind.BLEU])
                    row["val_gleu"], row["val_bleu"] = scores["gleu"], scores["bleu"]
                if log_every and ((i + 1) % log_every == 0 or last or row["val_gleu"] is not None):
                    tlog.rows.append(row)
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(params, Path(checkpoint_dir) / f"stage{s_idx}.npz",
                                meta={"stage": s_idx, "objective": stage.label, "step": global_step})
            log.info("stage %d (%s) done at step %d", s_idx, stage.label, global_step)
    finally:
        if pool:
            pool.shutdown()
    return params, tlog


def evaluate(params: ModelParams, split: Sequence[Pair], metrics: Sequence[RewardKind | str]) -> dict:
    """Corpus means of sentence-level metrics for argmax decoding at source length."""
    if not split:
        raise InvalidInput("cannot evaluate an empty split")
    kinds = [RewardKind.parse(m) for m in metrics]
    probs = predict_probs(params, [s for s, _ in split])
    hyps = [argmax_decode(p) for p in probs]
    out = {}
    for kind in kinds:
        fn = SCALAR_REWARDS[kind]
        out[kind.value] = float(np.mean([fn(h.tolist(), r.tolist()) for h, (_, r) in zip(hyps, split)]))
    out["exact_match"] = float(np.mean([h.size == r.size and np.array_equal(h, r) for h, (_, r) in zip(hyps, split)]))
    return out


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    return float((x @ y) / np.sqrt((x @ x) * (y @ y)))


def correlate_losses(params: ModelParams, split: Sequence[Pair], N: int = 2, min_size: int = 100) -> dict:
    """Pearson correlation of negated per-sentence losses with GLEU of the argmax output.

    Losses use the reference length; cross-entropy is divided by it and
    BoN-L1 is normalized to [0, 1].
    """
    if len(split) < min_size:
        raise InvalidInput(f"correlation needs at least {min_size} sentences, got {len(split)}")
    probs = predict_probs(params, [s for s, _ in split], [r.size for _, r in split])
    ce, bon, quality = [], [], []
    for p, (_, ref) in zip(probs, split):
        ce.append(cross_entropy(p, ref).loss_per_token)
        bon.append(bon_l1_loss(p, ref, min(N, ref.size)).loss)
        quality.append(gleu(argmax_decode(p).tolist(), ref.tolist()))
    columns = {"ce": np.array(ce), "bon": np.array(bon), "gleu": np.array(quality)}
    for name, col in columns.items():
        if np.ptp(col) == 0:
            raise InvalidInput(f"zero variance in column {name!r}; correlation undefined")
    return {"pearson_ce": pearson(-columns["ce"], columns["gleu"]),
            "pearson_bon": pearson(-columns["bon"], columns["gleu"]),
            "n_sentences": len(split)}
